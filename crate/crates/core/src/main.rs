use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posefree::config::{Config, ConfigError, Split};
use posefree::data::{read_dataset, read_scene, write_dataset, SceneRecord};
use posefree::geometry::CameraPose;
use posefree::model::Model;
use posefree::nn::{Binding, ParamStore};
use posefree::render::{encode_ppm, encode_ppm_gray, write_ppm};
use posefree::tensor::Graph;
use posefree::train::{
    ablation_variants, attention_maps, density_slices, epipolar_probe, evaluate, load_checkpoint,
    model_input, pose_noise_experiment, save_checkpoint, select_best_canonical, EvalReport,
    PoseNoise, Trainer,
};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(
    name = "posefree",
    version,
    about = "Pose-free sparse-view 3D modeling experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Trained {
    /// Checkpoint metadata file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory or single scene directory; generated from the
    /// config and seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
    Probe,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate procedural scenes.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Train a model and write a checkpoint and CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train on the dot preset instead of the training split.
        #[arg(long)]
        probe: bool,
    },
    /// Evaluate held-out views and write the report.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        /// Rotation noise on the model's input poses, in degrees.
        #[arg(long, default_value_t = 0.0)]
        noise_deg: f64,
    },
    /// Render views of one scene for relative poses.
    Render {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Canonical input view; the best one when omitted.
        #[arg(long)]
        canonical: Option<usize>,
        /// Camera-to-canonical pose as 12 comma-separated numbers of a
        /// row-major 3x4 matrix; repeatable. Defaults to the held-out views.
        #[arg(long, value_delimiter = ',', num_args = 12, action = clap::ArgAction::Append)]
        pose: Vec<f64>,
    },
    /// Measure how a dot is lifted along its ray and export density slices.
    ProbeEpipolar {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
    },
    /// Evaluate under increasing input-pose rotation noise.
    PoseNoise {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        /// Noise levels in degrees; `eval.pose_noise_deg` when omitted.
        #[arg(long, value_delimiter = ',')]
        sigmas: Vec<f64>,
    },
    /// Train and evaluate every ablation variant under one budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train_data: Option<PathBuf>,
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Subset of variants to run.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Export attention maps of one forward pass as heatmaps.
    InspectAttn {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        trained: Trained,
        #[arg(long, default_value_t = 0)]
        scene: usize,
        #[arg(long, default_value_t = 0)]
        canonical: usize,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<Config> {
    match &common.config {
        Some(p) => Ok(Config::load(p)?),
        None => Ok(Config::default()),
    }
}

fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out)
        .map_err(|e| runtime(format!("{}: {e}", common.out.display())))?;
    Ok(&common.out)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_image(path: &Path, bytes: &[u8]) -> Result<()> {
    write_ppm(path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

/// Scenes from `data` (a dataset or a single scene directory), or the
/// generated `split`.
fn scenes(cfg: &Config, split: Split, seed: u64, data: Option<&Path>) -> Result<Vec<SceneRecord>> {
    match data {
        Some(p) if p.join("manifest.json").is_file() => Ok(vec![read_scene(p).map_err(runtime)?]),
        Some(p) => read_dataset(p).map_err(runtime),
        None => cfg
            .generate(split, seed)
            .map_err(|e| CliError::Usage(e.to_string())),
    }
}

fn checkpoint(trained: &Trained) -> Result<(Model, ParamStore<f32>)> {
    let (model, store, _) = load_checkpoint::<f32>(&trained.checkpoint).map_err(runtime)?;
    Ok((model, store))
}

fn scene_at(scenes: &[SceneRecord], index: usize) -> Result<&SceneRecord> {
    scenes.get(index).ok_or_else(|| {
        CliError::Usage(format!(
            "scene {index} out of range ({} scenes)",
            scenes.len()
        ))
    })
}

fn train_model(
    cfg: &Config,
    seed: u64,
    scenes: &[SceneRecord],
    out: &Path,
) -> Result<(Model, ParamStore<f32>)> {
    let (model, store) = Model::new::<f32>(&cfg.effective_model(), seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut train = cfg.train.clone();
    train.seed = seed;
    let steps = train.steps;
    let every = train.log_every.max(1);
    let mut trainer = Trainer::new(model, store, train, cfg.loss);
    let log_path = out.join("train_log.csv");
    let mut log =
        fs::File::create(&log_path).map_err(|e| runtime(format!("{}: {e}", log_path.display())))?;
    trainer
        .run(scenes, Some(&mut log as &mut dyn std::io::Write), |s| {
            if s.step % every == 0 || s.step + 1 == steps {
                eprintln!(
                    "step {:>6} loss {:.6} lr {:.2e} |g| {:.3e}",
                    s.step, s.loss, s.lr_rest, s.grad_norm
                );
            }
        })
        .map_err(runtime)?;
    log.flush().map_err(runtime)?;
    save_checkpoint(
        out,
        "checkpoint",
        &trainer.model,
        &trainer.store,
        trainer.step,
        seed,
    )
    .map_err(runtime)?;
    Ok((trainer.model, trainer.store))
}

fn write_report(out: &Path, stem: &str, report: &EvalReport, seconds: f64) -> Result<()> {
    write_file(&out.join(format!("{stem}.json")), report.to_json())?;
    write_file(&out.join(format!("{stem}.txt")), report.table())?;
    write_file(
        &out.join(format!("{stem}_timing.json")),
        format!("{{\n  \"runtime_seconds\": {seconds:.3}\n}}\n"),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, split } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let splits: Vec<Split> = match split {
                SplitArg::Train => vec![Split::Train],
                SplitArg::Eval => vec![Split::Eval],
                SplitArg::Probe => vec![Split::Probe],
                SplitArg::All => Split::ALL.to_vec(),
            };
            for s in splits {
                let records = scenes(&cfg, s, common.seed, None)?;
                write_dataset(&out.join(s.name()), &records).map_err(runtime)?;
                eprintln!("{}: {} scenes", s.name(), records.len());
            }
        }
        Command::Train {
            common,
            data,
            probe,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let split = if probe { Split::Probe } else { Split::Train };
            let records = scenes(&cfg, split, common.seed, data.as_deref())?;
            write_file(
                &out.join("config.json"),
                serde_json::to_string_pretty(&cfg).expect("config serializes") + "\n",
            )?;
            train_model(&cfg, common.seed, &records, out)?;
        }
        Command::Eval {
            common,
            trained,
            noise_deg,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let (model, store) = checkpoint(&trained)?;
            let records = scenes(&cfg, Split::Eval, common.seed, trained.data.as_deref())?;
            let noise = PoseNoise {
                rotation_deg: noise_deg,
                translation: cfg.eval.pose_noise_translation,
                seed: cfg.eval.noise_seed,
            };
            let (report, time) = evaluate(&model, &store, &records, &noise);
            write_report(out, "eval_report", &report, time.as_secs_f64())?;
            print!("{}", report.table());
        }
        Command::Render {
            common,
            trained,
            scene,
            canonical,
            pose,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let (model, store) = checkpoint(&trained)?;
            let records = scenes(&cfg, Split::Eval, common.seed, trained.data.as_deref())?;
            let sc = scene_at(&records, scene)?;
            let gt = &sc.poses[..sc.inputs];
            let input = model_input::<f32>(sc, gt.to_vec());
            let canonical = match canonical {
                Some(c) if c < sc.inputs => c,
                Some(c) => {
                    return Err(CliError::Usage(format!(
                        "canonical {c} >= {} inputs",
                        sc.inputs
                    )))
                }
                None => select_best_canonical(&model, &store, &input, gt).index,
            };
            let targets: Vec<CameraPose> = if pose.is_empty() {
                sc.held_out()
                    .map(|v| model.render_pose(&gt[canonical], &sc.poses[v]))
                    .collect()
            } else {
                pose.chunks(12)
                    .map(|m| {
                        let p = CameraPose::from_matrix_3x4(m.try_into().expect("12 values"));
                        if p.is_valid(1e-6) {
                            Ok(if cfg.model.world_frame {
                                gt[canonical].compose(&p)
                            } else {
                                p
                            })
                        } else {
                            Err(CliError::Usage("--pose is not a rigid transform".into()))
                        }
                    })
                    .collect::<Result<_>>()?
            };
            let g = Graph::new();
            let b = Binding::new(&g, &store, false);
            let f = model.forward(&b, &input, canonical);
            for (i, t) in targets.iter().enumerate() {
                let r = model.render::<_, ChaCha8Rng>(&b, &f.field, t, &sc.intrinsics, None);
                write_image(
                    &out.join(format!("view_{i}.ppm")),
                    &encode_ppm(r.image.value().as_ref()),
                )?;
            }
            eprintln!("canonical {canonical}, {} views", targets.len());
        }
        Command::ProbeEpipolar { common, trained } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let (model, store) = checkpoint(&trained)?;
            let records = scenes(&cfg, Split::Probe, common.seed, trained.data.as_deref())?;
            let mut results = Vec::new();
            for (i, sc) in records.iter().enumerate() {
                if sc.geometry.dot.is_none() {
                    return Err(CliError::Usage(format!("scene {i} is not a dot scene")));
                }
                let (r, density) = epipolar_probe(&model, &store, sc);
                let dir = out.join(format!("scene_{i:05}"));
                fs::create_dir_all(&dir).map_err(runtime)?;
                let (slices, mip) = density_slices(&density, cfg.eval.density_slices);
                for (z, s) in slices {
                    write_image(
                        &dir.join(format!("density_z{z:03}.ppm")),
                        &encode_ppm_gray(&s),
                    )?;
                }
                write_image(&dir.join("density_mip.ppm"), &encode_ppm_gray(&mip))?;
                println!(
                    "scene {i}: distance {:.4} baseline {:.4} ratio {:.3}",
                    r.distance,
                    r.baseline,
                    r.ratio()
                );
                results.push(r);
            }
            let n = results.len() as f64;
            let summary = serde_json::json!({
                "scenes": results,
                "mean_distance": results.iter().map(|r| r.distance).sum::<f64>() / n,
                "mean_baseline": results.iter().map(|r| r.baseline).sum::<f64>() / n,
            });
            write_file(
                &out.join("probe.json"),
                serde_json::to_string_pretty(&summary).unwrap() + "\n",
            )?;
        }
        Command::PoseNoise {
            common,
            trained,
            sigmas,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let (model, store) = checkpoint(&trained)?;
            let records = scenes(&cfg, Split::Eval, common.seed, trained.data.as_deref())?;
            let sigmas = if sigmas.is_empty() {
                cfg.eval.pose_noise_deg.clone()
            } else {
                sigmas
            };
            if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(CliError::Usage("--sigmas must be finite and >= 0".into()));
            }
            let (table, _) =
                pose_noise_experiment(&model, &store, &records, &sigmas, cfg.eval.noise_seed);
            write_file(
                &out.join("pose_noise.json"),
                serde_json::to_string_pretty(&table).unwrap() + "\n",
            )?;
            write_file(&out.join("pose_noise.txt"), table.table())?;
            print!("{}", table.table());
        }
        Command::Ablate {
            common,
            train_data,
            eval_data,
            variants,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let all = ablation_variants(&cfg.effective_model());
            for v in &variants {
                if !all.iter().any(|(n, _)| n == v) {
                    return Err(CliError::Usage(format!("unknown variant `{v}`")));
                }
            }
            let train_scenes = scenes(&cfg, Split::Train, common.seed, train_data.as_deref())?;
            let eval_scenes = scenes(&cfg, Split::Eval, common.seed, eval_data.as_deref())?;
            let mut summary = String::from("variant        psnr     ssim\n");
            for (name, model_cfg) in all {
                if !variants.is_empty() && !variants.iter().any(|v| v == name) {
                    continue;
                }
                eprintln!("== {name}");
                let mut vcfg = cfg.clone();
                vcfg.model = model_cfg;
                vcfg.ablation = Default::default();
                let dir = out.join(name);
                fs::create_dir_all(&dir).map_err(runtime)?;
                let (model, store) = train_model(&vcfg, common.seed, &train_scenes, &dir)?;
                let (report, time) = evaluate(&model, &store, &eval_scenes, &PoseNoise::default());
                write_report(&dir, "eval_report", &report, time.as_secs_f64())?;
                summary += &format!(
                    "{name:<12} {:>8.3} {:>8.4}\n",
                    report.mean_psnr, report.mean_ssim
                );
            }
            write_file(&out.join("ablation.txt"), &summary)?;
            print!("{summary}");
        }
        Command::InspectAttn {
            common,
            trained,
            scene,
            canonical,
        } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common)?;
            let (model, store) = checkpoint(&trained)?;
            let records = scenes(&cfg, Split::Eval, common.seed, trained.data.as_deref())?;
            let sc = scene_at(&records, scene)?;
            if canonical >= sc.inputs {
                return Err(CliError::Usage(format!(
                    "canonical {canonical} >= {} inputs",
                    sc.inputs
                )));
            }
            let input = model_input::<f32>(sc, sc.poses[..sc.inputs].to_vec());
            for (name, map) in attention_maps(&model, &store, &input, canonical) {
                write_image(&out.join(format!("{name}.ppm")), &encode_ppm_gray(&map))?;
                eprintln!("{name}: {:?}", map.shape());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
