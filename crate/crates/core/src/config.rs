//! Experiment configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, ScenePreset, SceneRecord, SceneSpec, SpecError};
use crate::model::{EncoderVariant, ModelConfig};
use crate::train::{LossConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: SceneSpec,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Scenes of the dot preset used by the epipolar probe.
    pub probe_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scene: SceneSpec::default(),
            train_scenes: 64,
            eval_scenes: 16,
            probe_scenes: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Rotation noise levels of the pose-noise table, in degrees.
    pub pose_noise_deg: Vec<f64>,
    pub pose_noise_translation: f64,
    pub noise_seed: u64,
    pub density_slices: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            pose_noise_deg: vec![0.0, 5.0, 10.0, 15.0],
            pose_noise_translation: 0.0,
            noise_seed: 0,
            density_slices: 8,
        }
    }
}

/// Switches applied on top of `model` before building it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub no_encoder: bool,
    pub encoder_variant: Option<EncoderVariant>,
    pub mapping_blocks: Option<usize>,
    pub world_frame: bool,
}

impl AblationConfig {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        if self.no_encoder {
            m.encoder_blocks = 0;
        }
        if let Some(v) = self.encoder_variant {
            m.encoder_variant = v;
        }
        if let Some(n) = self.mapping_blocks {
            m.mapping_blocks = n;
        }
        m.world_frame |= self.world_frame;
        m
    }
}

/// Independent scene streams drawn from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
    Probe,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Probe];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Probe => "probe",
        }
    }

    pub fn seed(self, seed: u64) -> u64 {
        match self {
            Split::Train => seed,
            Split::Eval => seed ^ 0x0e7a_1000_0000_0001,
            Split::Probe => seed ^ 0x0d07_2000_0000_0002,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: AblationConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config =
            serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Config::from_json(&text).map_err(|e| match e {
            ConfigError::Invalid(m) => ConfigError::Read {
                path: path.display().to_string(),
                message: m,
            },
            other => other,
        })
    }

    pub fn split_spec(&self, split: Split) -> SceneSpec {
        match split {
            Split::Probe => SceneSpec {
                preset: ScenePreset::Dot,
                k: 2,
                inputs: 2,
                ..self.data.scene.clone()
            },
            _ => self.data.scene.clone(),
        }
    }

    pub fn split_count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.data.train_scenes,
            Split::Eval => self.data.eval_scenes,
            Split::Probe => self.data.probe_scenes,
        }
    }

    pub fn generate(&self, split: Split, seed: u64) -> Result<Vec<SceneRecord>, SpecError> {
        generate_dataset(
            &self.split_spec(split),
            split.seed(seed),
            self.split_count(split),
        )
    }

    /// Model configuration with the ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        self.ablation.apply(&self.model)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| ConfigError::Invalid(m);
        self.effective_model()
            .validate()
            .map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(bad)?;
        self.loss.validate().map_err(bad)?;
        self.data.scene.validate().map_err(|e| bad(e.to_string()))?;
        if self.data.scene.res != self.model.res {
            return Err(bad(format!(
                "data.scene.res {} differs from model.res {}",
                self.data.scene.res, self.model.res
            )));
        }
        if self.data.train_scenes == 0 {
            return Err(bad("data.train_scenes must be positive".into()));
        }
        if self
            .eval
            .pose_noise_deg
            .iter()
            .any(|s| !(s.is_finite() && *s >= 0.0))
        {
            return Err(bad(
                "eval.pose_noise_deg entries must be finite and >= 0".into()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_preset_is_valid() {
        let c = Config::from_json(include_str!("../../../configs/full-scale.json")).unwrap();
        c.validate().unwrap();
        assert_eq!(c.model.field_res, 64);
    }

    #[test]
    fn default_round_trips() {
        let c = Config::default();
        c.validate().unwrap();
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(Config::from_json(&json).unwrap(), c);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c = Config::from_json(r#"{"train": {"steps": 7, "warmup": 2}}"#).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn rejects_unknown_and_inconsistent_keys() {
        assert!(Config::from_json(r#"{"modle": {}}"#).is_err());
        assert!(Config::from_json(r#"{"model": {"res": 16}}"#).is_err());
        assert!(Config::from_json(r#"{"train": {"steps": 5, "warmup": 10}}"#).is_err());
    }

    #[test]
    fn ablation_switches_edit_the_model() {
        let a = AblationConfig {
            no_encoder: true,
            mapping_blocks: Some(2),
            world_frame: true,
            ..Default::default()
        };
        let m = a.apply(&ModelConfig::default());
        assert_eq!(
            (m.encoder_blocks, m.mapping_blocks, m.world_frame),
            (0, 2, true)
        );
    }
}
