use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::loss::{loss_total, LossConfig};
use crate::data::SceneRecord;
use crate::model::{Model, ModelConfig, ModelInput, PoseMetadata};
use crate::nn::{Binding, Grads, LoadError, ParamGroup, ParamStore};
use crate::tensor::blob::{read_checkpoint_file, write_checkpoint_file, BlobError};
use crate::tensor::optim::{AdamW, AdamWConfig, LrSchedule, OptimError, ScheduleKind};
use crate::tensor::{FlushDenormals, Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per optimizer step.
    pub batch: usize,
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub warmup: usize,
    pub schedule: ScheduleKind,
    pub seed: u64,
    /// Draw the canonical view uniformly per scene; otherwise view 0.
    pub randomize_canonical: bool,
    /// Rescale the accumulated gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    pub optimizer: AdamWConfig,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr_backbone: 2e-4,
            lr_rest: 2e-4,
            warmup: 500,
            schedule: ScheduleKind::WarmupConstant,
            seed: 0,
            randomize_canonical: true,
            grad_clip: Some(1.0),
            optimizer: AdamWConfig::default(),
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 || self.batch == 0 {
            return Err("train.steps and train.batch must be positive".into());
        }
        if self.warmup > self.steps {
            return Err(format!(
                "train.warmup {} exceeds train.steps {}",
                self.warmup, self.steps
            ));
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_rest", self.lr_rest)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(format!("train.{name} must be a finite non-negative number"));
            }
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err("train.grad_clip must be positive".into());
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup: self.warmup,
            total: self.steps,
            kind: self.schedule,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss {loss} at step {step} (scene seed {scene_seed}, canonical view {canonical})")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        scene_seed: u64,
        canonical: usize,
    },
    #[error("step {step}: {source}")]
    Optim {
        step: usize,
        #[source]
        source: OptimError,
    },
    #[error("no training scenes")]
    NoScenes,
    #[error("{0}")]
    Scene(String),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("{path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub loss: f64,
    pub lr_rest: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

/// Input images `[res, res, 3]` and their poses as model input.
pub fn model_input<T: Real>(
    scene: &SceneRecord,
    poses: Vec<crate::geometry::CameraPose>,
) -> ModelInput<T> {
    ModelInput {
        images: scene.images[..scene.inputs]
            .iter()
            .map(|t| t.cast())
            .collect(),
        poses: PoseMetadata::new(poses),
        intrinsics: scene.intrinsics,
    }
}

/// Loss of re-rendering every input view of `scene` from the field built
/// with `canonical`, and the parameter gradients.
pub fn scene_loss<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    scene: &SceneRecord,
    canonical: usize,
    loss: &LossConfig,
    rng: &mut ChaCha8Rng,
) -> (f64, Grads<T>) {
    let g = Graph::new();
    let b = Binding::new(&g, store, true);
    let input = model_input::<T>(scene, scene.poses[..scene.inputs].to_vec());
    let out = model.forward(&b, &input, canonical);
    let jitter = model.cfg.render.stratified;
    let canon_pose = scene.poses[canonical];
    let rendered: Vec<_> = (0..scene.inputs)
        .map(|i| {
            let pose = model.render_pose(&canon_pose, &scene.poses[i]);
            if jitter {
                model.render(&b, &out.field, &pose, &scene.intrinsics, Some(&mut *rng))
            } else {
                model.render::<_, ChaCha8Rng>(&b, &out.field, &pose, &scene.intrinsics, None)
            }
        })
        .collect();
    let images: Vec<Tensor<T>> = scene.images[..scene.inputs]
        .iter()
        .map(|t| t.cast())
        .collect();
    let masks: Vec<Tensor<T>> = scene.masks[..scene.inputs]
        .iter()
        .map(|t| t.cast())
        .collect();
    let l = loss_total(&rendered, &images, &masks, loss);
    let value = l.item().as_f64();
    if !value.is_finite() {
        return (value, Grads::empty(store.len()));
    }
    g.backward(l);
    (value, b.grads())
}

pub struct Trainer<T: Real> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub cfg: TrainConfig,
    pub loss: LossConfig,
    opt: AdamW<T>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model, store: ParamStore<T>, cfg: TrainConfig, loss: LossConfig) -> Self {
        let opt = AdamW::new(cfg.optimizer, &store.shapes());
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Trainer {
            model,
            store,
            cfg,
            loss,
            opt,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        }
    }

    /// Next `batch` scene indices, reshuffling after each pass.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        (0..self.cfg.batch)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        let peak = match group {
            ParamGroup::Backbone => self.cfg.lr_backbone,
            ParamGroup::Rest => self.cfg.lr_rest,
        };
        peak * self.cfg.schedule().factor(self.step)
    }

    pub fn train_step(&mut self, scenes: &[SceneRecord]) -> Result<StepStats, TrainError> {
        if scenes.is_empty() {
            return Err(TrainError::NoScenes);
        }
        let _ftz = FlushDenormals::new();
        let start = Instant::now();
        let batch = self.next_batch(scenes.len());
        let mut grads = Grads::empty(self.store.len());
        let mut total = 0.0;
        for &s in &batch {
            let scene = &scenes[s];
            let canonical = if self.cfg.randomize_canonical {
                self.rng.random_range(0..scene.inputs)
            } else {
                0
            };
            let (l, g) = scene_loss(
                &self.model,
                &self.store,
                scene,
                canonical,
                &self.loss,
                &mut self.rng,
            );
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step: self.step,
                    loss: l,
                    scene_seed: scene.seed,
                    canonical,
                });
            }
            total += l;
            grads.accumulate(&g);
        }
        let inv = 1.0 / batch.len() as f64;
        grads.scale(inv);
        let grad_norm = grads.global_norm();
        if let Some(c) = self.cfg.grad_clip {
            if grad_norm > c {
                grads.scale(c / grad_norm);
            }
        }
        let lrs: Vec<f64> = self.store.iter().map(|p| self.lr(p.group)).collect();
        let dense: Vec<Tensor<T>> = self
            .store
            .iter()
            .enumerate()
            .map(|(i, p)| grads.dense(i, p.value.shape()))
            .collect();
        let mut items: Vec<_> = self
            .store
            .iter_mut()
            .zip(&dense)
            .zip(&lrs)
            .map(|((p, g), &lr)| (&mut p.value, g, lr))
            .collect();
        let step = self.step;
        self.opt
            .step(&mut items)
            .map_err(|source| TrainError::Optim { step, source })?;
        let stats = StepStats {
            step: self.step,
            loss: total * inv,
            lr_rest: self.lr(ParamGroup::Rest),
            grad_norm,
            seconds: start.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(stats)
    }

    /// Runs the remaining steps, appending one CSV row per `log_every`
    /// steps (and the last) to `log` when given.
    pub fn run(
        &mut self,
        scenes: &[SceneRecord],
        mut log: Option<&mut dyn std::io::Write>,
        mut on_step: impl FnMut(&StepStats),
    ) -> Result<Vec<StepStats>, TrainError> {
        let start = Instant::now();
        if let Some(w) = log.as_mut() {
            writeln!(w, "step,loss,lr,grad_norm,wall_clock")
                .map_err(|e| io_error("training log", e))?;
        }
        let mut history = Vec::with_capacity(self.cfg.steps);
        while self.step < self.cfg.steps {
            let s = self.train_step(scenes)?;
            on_step(&s);
            let every = self.cfg.log_every.max(1);
            if let Some(w) = log.as_mut() {
                if s.step % every == 0 || s.step + 1 == self.cfg.steps {
                    writeln!(
                        w,
                        "{},{:.8},{:.8e},{:.6e},{:.3}",
                        s.step,
                        s.loss,
                        s.lr_rest,
                        s.grad_norm,
                        start.elapsed().as_secs_f64()
                    )
                    .map_err(|e| io_error("training log", e))?;
                }
            }
            history.push(s);
        }
        Ok(history)
    }
}

fn io_error(path: &str, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_string(),
        source,
    }
}

/// Metadata written next to a checkpoint's weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub step: usize,
    pub seed: u64,
    pub weights: String,
}

/// Writes `<stem>.vlck` (weights) and `<stem>.json` (model config, step).
pub fn save_checkpoint<T: Real>(
    dir: &Path,
    stem: &str,
    model: &Model,
    store: &ParamStore<T>,
    step: usize,
    seed: u64,
) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(&dir.display().to_string(), e))?;
    let weights = format!("{stem}.vlck");
    write_checkpoint_file(&dir.join(&weights), &store.entries())?;
    let meta = CheckpointMeta {
        model: model.cfg.clone(),
        step,
        seed,
        weights,
    };
    let path = dir.join(format!("{stem}.json"));
    let mut f =
        std::fs::File::create(&path).map_err(|e| io_error(&path.display().to_string(), e))?;
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    writeln!(f, "{text}").map_err(|e| io_error(&path.display().to_string(), e))
}

/// Reads a checkpoint written by [`save_checkpoint`] from its `.json` path.
pub fn load_checkpoint<T: Real>(
    meta_path: &Path,
) -> Result<(Model, ParamStore<T>, CheckpointMeta), TrainError> {
    let name = meta_path.display().to_string();
    let text = std::fs::read_to_string(meta_path).map_err(|e| io_error(&name, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint {
        path: name.clone(),
        message: e.to_string(),
    })?;
    let (model, mut store) =
        Model::new::<T>(&meta.model, meta.seed).map_err(|e| TrainError::Checkpoint {
            path: name.clone(),
            message: e.to_string(),
        })?;
    let weights = meta_path.with_file_name(&meta.weights);
    let entries = read_checkpoint_file(&weights)?;
    store.load(&entries).map_err(|e| TrainError::Checkpoint {
        path: weights.display().to_string(),
        message: e.to_string(),
    })?;
    Ok((model, store, meta))
}
