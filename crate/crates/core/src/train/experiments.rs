use std::fmt::Write as _;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport, PoseNoise};
use super::trainer::model_input;
use crate::data::SceneRecord;
use crate::geometry::{point_to_ray_distance, project_point};
use crate::model::{EncoderVariant, Model, ModelConfig, ModelInput};
use crate::nn::{Binding, ParamStore};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub sigma_deg: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTable {
    pub rows: Vec<NoiseRow>,
}

impl NoiseTable {
    pub fn table(&self) -> String {
        let mut s = format!("{:>10} {:>8} {:>8}\n", "sigma_deg", "psnr", "ssim");
        for r in &self.rows {
            writeln!(
                s,
                "{:>10.2} {:>8.3} {:>8.4}",
                r.sigma_deg, r.mean_psnr, r.mean_ssim
            )
            .unwrap();
        }
        s
    }
}

/// Evaluates `scenes` once per rotation noise level in `sigmas_deg`,
/// perturbing only the input poses given to the model.
pub fn pose_noise_experiment<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    scenes: &[SceneRecord],
    sigmas_deg: &[f64],
    seed: u64,
) -> (NoiseTable, Vec<EvalReport>) {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &sigma in sigmas_deg {
        let noise = PoseNoise {
            rotation_deg: sigma,
            translation: 0.0,
            seed,
        };
        let (report, _) = evaluate(model, store, scenes, &noise);
        rows.push(NoiseRow {
            sigma_deg: sigma,
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
        });
        reports.push(report);
    }
    (NoiseTable { rows }, reports)
}

/// Variant names and configurations of the ablation matrix.
pub fn ablation_variants(base: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let with = |f: &dyn Fn(&mut ModelConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("full", base.clone()),
        ("no_encoder", with(&|c| c.encoder_blocks = 0)),
        (
            "gcr_only",
            with(&|c| c.encoder_variant = EncoderVariant::GcrOnly),
        ),
        (
            "nvu_only",
            with(&|c| c.encoder_variant = EncoderVariant::NvuOnly),
        ),
        ("mapping_2", with(&|c| c.mapping_blocks = 2)),
        ("world_frame", with(&|c| c.world_frame = true)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub scene_seed: u64,
    /// Pixel of the dot in the canonical view.
    pub pixel: [f64; 2],
    pub top_voxels: usize,
    /// Mean distance of the densest voxels to the dot's ray.
    pub distance: f64,
    /// Mean distance of all voxels to the same ray.
    pub baseline: f64,
}

impl ProbeResult {
    pub fn ratio(&self) -> f64 {
        self.distance / self.baseline
    }
}

/// Node positions of a `dims` field in the canonical camera frame, in
/// row-major grid order.
pub fn field_points(
    model: &Model,
    dims: [usize; 3],
    canonical: &crate::geometry::CameraPose,
) -> Vec<Vector3<f64>> {
    let frame = model.cfg.volume_frame();
    let to_canonical = canonical.inverse();
    let node = |i: usize, n: usize| {
        if n > 1 {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    let mut pts = Vec::with_capacity(dims.iter().product());
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = frame.from_volume(&Vector3::new(
                    node(i, dims[0]),
                    node(j, dims[1]),
                    node(k, dims[2]),
                ));
                pts.push(if model.cfg.world_frame {
                    to_canonical.apply(&p)
                } else {
                    p
                });
            }
        }
    }
    pts
}

/// Indices of the `ceil(fraction * n)` largest values, ties to the lower index.
pub fn top_fraction(values: &[f64], fraction: f64) -> Vec<usize> {
    let n = ((values.len() as f64 * fraction).ceil() as usize).clamp(1, values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Lifts the single dot of a dot scene with canonical view 0 and measures
/// how close the densest 1% of the field lies to the dot's ray. Also
/// returns the density grid.
pub fn epipolar_probe<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    scene: &SceneRecord,
) -> (ProbeResult, Tensor<f64>) {
    let dot = scene
        .geometry
        .dot
        .expect("epipolar probe needs a dot scene");
    let canonical = scene.poses[0];
    let input = model_input::<T>(scene, scene.poses[..scene.inputs].to_vec());
    let g = Graph::new();
    let b = Binding::new(&g, store, false);
    let out = model.forward(&b, &input, 0);
    let dims = out.field.dims();
    let density: Tensor<f64> = out
        .field
        .density
        .value()
        .as_ref()
        .clone()
        .reshape(&dims)
        .cast();

    let (u, v, _) = project_point(&Vector3::from(dot), &canonical, &scene.intrinsics);
    let dir = scene.intrinsics.direction(u, v);
    let pts = field_points(model, dims, &canonical);
    let dist = point_to_ray_distance(&pts, &Vector3::zeros(), &dir);
    let top = top_fraction(density.data(), 0.01);
    let distance = top.iter().map(|&i| dist[i]).sum::<f64>() / top.len() as f64;
    let baseline = dist.iter().sum::<f64>() / dist.len() as f64;
    (
        ProbeResult {
            scene_seed: scene.seed,
            pixel: [u, v],
            top_voxels: top.len(),
            distance,
            baseline,
        },
        density,
    )
}

/// Depth slices `[y, x]` of a density grid indexed `[x, y, z]`, plus the
/// maximum projection along z, all scaled by the grid maximum.
pub fn density_slices(
    density: &Tensor<f64>,
    count: usize,
) -> (Vec<(usize, Tensor<f64>)>, Tensor<f64>) {
    let s = density.shape();
    let (nx, ny, nz) = (s[0], s[1], s[2]);
    let d = density.data();
    let max = d.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    let at = |x: usize, y: usize, z: usize| d[(x * ny + y) * nz + z] / max;
    let count = count.clamp(1, nz);
    let slices = (0..count)
        .map(|i| {
            let z = if count > 1 {
                i * (nz - 1) / (count - 1)
            } else {
                nz / 2
            };
            (z, Tensor::from_fn(&[ny, nx], |i| at(i % nx, i / nx, z)))
        })
        .collect();
    let mip = Tensor::from_fn(&[ny, nx], |i| {
        (0..nz).map(|z| at(i % nx, i / nx, z)).fold(0.0, f64::max)
    });
    (slices, mip)
}

/// Head-averaged `[queries, keys]` attention with every row divided by
/// its maximum.
pub fn attention_heatmap<T: Real>(weights: &Tensor<T>) -> Tensor<f64> {
    let s = weights.shape();
    assert_eq!(s.len(), 3, "attention weights are [heads, queries, keys]");
    let (h, q, k) = (s[0], s[1], s[2]);
    let w = weights.data();
    let mut out = vec![0.0; q * k];
    for head in 0..h {
        for (o, x) in out.iter_mut().zip(&w[head * q * k..(head + 1) * q * k]) {
            *o += x.as_f64() / h as f64;
        }
    }
    for row in out.chunks_mut(k) {
        let m = row.iter().copied().fold(0.0f64, f64::max);
        if m > 0.0 {
            row.iter_mut().for_each(|x| *x /= m);
        }
    }
    Tensor::new(&[q, k], out)
}

/// Named heatmaps of every attention layer of one forward pass.
pub fn attention_maps<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    input: &ModelInput<T>,
    canonical: usize,
) -> Vec<(String, Tensor<f64>)> {
    let g = Graph::new();
    let b = Binding::new(&g, store, false);
    let out = model.forward(&b, input, canonical);
    out.attention
        .iter()
        .map(|a| {
            (
                a.name.clone(),
                attention_heatmap(a.weights.value().as_ref()),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_fraction_rounds_up_and_breaks_ties_low() {
        let v = [1.0, 3.0, 3.0, 0.0];
        assert_eq!(top_fraction(&v, 0.01), vec![1]);
        assert_eq!(top_fraction(&v, 0.5), vec![1, 2]);
    }

    #[test]
    fn heatmap_rows_peak_at_one() {
        let w = Tensor::new(
            &[2, 2, 3],
            vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.4, 0.3, 0.3, 0.0, 0.0, 1.0],
        );
        let m = attention_heatmap(&w);
        let want = [0.75, 0.75, 1.0, 1.0, 0.0, 1.0];
        for (a, b) in m.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", m.data());
        }
    }

    #[test]
    fn slices_are_normalized() {
        let t = Tensor::from_fn(&[4, 3, 2], |i| (i / 6 + i / 2 % 3 + i % 2) as f64);
        let (sl, mip) = density_slices(&t, 2);
        assert_eq!(sl.len(), 2);
        assert_eq!(sl[1].1.shape(), &[3, 4]);
        assert!((mip.data().iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        assert_eq!(sl[0].1.data()[0], 0.0);
    }

    #[test]
    fn ablation_matrix_names() {
        let names: Vec<_> = ablation_variants(&ModelConfig::default())
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert_eq!(
            names,
            [
                "full",
                "no_encoder",
                "gcr_only",
                "nvu_only",
                "mapping_2",
                "world_frame"
            ]
        );
    }
}
