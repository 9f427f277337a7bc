use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim};
use super::trainer::model_input;
use crate::data::SceneRecord;
use crate::geometry::{perturb_pose, CameraPose, Intrinsics};
use crate::model::{Model, ModelInput};
use crate::nn::{Binding, ParamStore};
use crate::render::RadianceField;
use crate::tensor::{FlushDenormals, Graph, Real, Tensor};

/// Index of the largest score; the lowest index wins ties.
pub fn argmax_lowest(scores: &[f64]) -> usize {
    assert!(!scores.is_empty(), "argmax of nothing");
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalChoice {
    pub index: usize,
    /// Mean input-view PSNR for each canonical choice.
    pub input_psnr: Vec<f64>,
}

fn render_views<'g, T: Real>(
    model: &Model,
    b: &Binding<'g, T>,
    field: &RadianceField<'g, T>,
    canonical: &CameraPose,
    targets: &[CameraPose],
    k: &Intrinsics,
) -> Vec<Tensor<T>> {
    targets
        .iter()
        .map(|t| {
            let pose = model.render_pose(canonical, t);
            model
                .render::<_, ChaCha8Rng>(b, field, &pose, k, None)
                .image
                .value()
                .as_ref()
                .clone()
        })
        .collect()
}

fn mean_psnr<T: Real>(pred: &[Tensor<T>], gt: &[Tensor<T>]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| psnr(p, g)).sum::<f64>() / pred.len() as f64
}

/// Runs the model once per canonical choice, re-renders the input views
/// with `gt_poses` and keeps the choice with the best mean PSNR.
pub fn select_best_canonical<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    input: &ModelInput<T>,
    gt_poses: &[CameraPose],
) -> CanonicalChoice {
    let k = input.k();
    assert_eq!(gt_poses.len(), k, "one ground-truth pose per input view");
    let input_psnr: Vec<f64> = (0..k)
        .map(|c| {
            let g = Graph::new();
            let b = Binding::new(&g, store, false);
            let out = model.forward(&b, input, c);
            let views = render_views(
                model,
                &b,
                &out.field,
                &gt_poses[c],
                gt_poses,
                &input.intrinsics,
            );
            mean_psnr(&views, &input.images)
        })
        .collect();
    CanonicalChoice {
        index: argmax_lowest(&input_psnr),
        input_psnr,
    }
}

/// Noise applied to the poses handed to the model (never to the poses
/// used for rendering and scoring).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseNoise {
    pub rotation_deg: f64,
    pub translation: f64,
    pub seed: u64,
}

impl PoseNoise {
    pub fn apply(&self, poses: &[CameraPose], scene: usize) -> Vec<CameraPose> {
        if self.rotation_deg == 0.0 && self.translation == 0.0 {
            return poses.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(scene as u64);
        poses
            .iter()
            .map(|p| {
                perturb_pose(
                    p,
                    self.rotation_deg.to_radians(),
                    self.translation,
                    &mut rng,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewReport {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub seed: u64,
    pub canonical: usize,
    pub input_psnr: Vec<f64>,
    pub views: Vec<ViewReport>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pose_noise: PoseNoise,
    pub scenes: Vec<SceneReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{:>12} {:>9} {:>8} {:>8}",
            "scene_seed", "canonical", "psnr", "ssim"
        )
        .unwrap();
        for r in &self.scenes {
            writeln!(
                s,
                "{:>12} {:>9} {:>8.3} {:>8.4}",
                r.seed, r.canonical, r.psnr, r.ssim
            )
            .unwrap();
        }
        writeln!(
            s,
            "{:>12} {:>9} {:>8.3} {:>8.4}",
            "mean", "", self.mean_psnr, self.mean_ssim
        )
        .unwrap();
        s
    }
}

/// Scores the held-out views of every scene. Each scene's field comes from
/// its best canonical input view; `noise` perturbs only the model's input
/// poses.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    scenes: &[SceneRecord],
    noise: &PoseNoise,
) -> (EvalReport, Duration) {
    let _ftz = FlushDenormals::new();
    let start = Instant::now();
    let mut reports = Vec::with_capacity(scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        assert!(
            scene.k() > scene.inputs,
            "scene {} has no held-out views",
            scene.seed
        );
        let gt_inputs = &scene.poses[..scene.inputs];
        let input = model_input::<T>(scene, noise.apply(gt_inputs, si));
        let choice = select_best_canonical(model, store, &input, gt_inputs);
        let g = Graph::new();
        let b = Binding::new(&g, store, false);
        let out = model.forward(&b, &input, choice.index);
        let held: Vec<usize> = scene.held_out().collect();
        let targets: Vec<CameraPose> = held.iter().map(|&v| scene.poses[v]).collect();
        let rendered = render_views(
            model,
            &b,
            &out.field,
            &gt_inputs[choice.index],
            &targets,
            &scene.intrinsics,
        );
        let views: Vec<ViewReport> = held
            .iter()
            .zip(&rendered)
            .map(|(&v, img)| {
                let gt: Tensor<T> = scene.images[v].cast();
                ViewReport {
                    view: v,
                    psnr: psnr(img, &gt),
                    ssim: ssim(img, &gt),
                }
            })
            .collect();
        let n = views.len() as f64;
        reports.push(SceneReport {
            seed: scene.seed,
            canonical: choice.index,
            input_psnr: choice.input_psnr,
            psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
            ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
            views,
        });
    }
    let n = reports.len().max(1) as f64;
    let report = EvalReport {
        pose_noise: *noise,
        mean_psnr: reports.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        scenes: reports,
    };
    (report, start.elapsed())
}

/// Mean PSNR of re-rendered input views from canonical view 0 or the
/// best canonical view.
pub fn input_view_psnr<T: Real>(model: &Model, store: &ParamStore<T>, scene: &SceneRecord) -> f64 {
    let gt = &scene.poses[..scene.inputs];
    let input = model_input::<T>(scene, gt.to_vec());
    let choice = select_best_canonical(model, store, &input, gt);
    choice.input_psnr[choice.index]
}
