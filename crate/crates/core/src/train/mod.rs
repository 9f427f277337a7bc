mod eval;
mod experiments;
mod loss;
pub mod metrics;
mod trainer;

pub use eval::{
    argmax_lowest, evaluate, input_view_psnr, select_best_canonical, CanonicalChoice, EvalReport,
    PoseNoise, SceneReport, ViewReport,
};
pub use experiments::{
    ablation_variants, attention_heatmap, attention_maps, density_slices, epipolar_probe,
    field_points, pose_noise_experiment, top_fraction, NoiseRow, NoiseTable, ProbeResult,
};
pub use loss::{loss_total, mse, LossConfig};
pub use metrics::{psnr, ssim, PSNR_CAP};
pub use trainer::{
    load_checkpoint, model_input, save_checkpoint, scene_loss, CheckpointMeta, StepStats,
    TrainConfig, TrainError, Trainer,
};
