//! Differentiable volume rendering of voxel radiance fields.

use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{generate_rays, CameraPose, Intrinsics, VolumeFrame};
use crate::nn::sample::{push_trilinear, Taps};
use crate::nn::{Binding, Conv2d, Init, ParamGroup, ParamStore};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_samples: usize,
    /// Multiplies field densities; with `field_res / 2` a density of 1 is an
    /// optical depth of 1 per field voxel.
    pub density_scale: f64,
    /// Jitter sample positions within their bins.
    pub stratified: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 32,
            density_scale: 16.0,
            stratified: false,
        }
    }
}

/// Density `[X, Y, Z]` (non-negative) and features `[X, Y, Z, C]`.
#[derive(Clone, Copy)]
pub struct RadianceField<'g, T: Real> {
    pub density: Var<'g, T>,
    pub features: Var<'g, T>,
}

impl<'g, T: Real> RadianceField<'g, T> {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.density.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[3]
    }
}

/// Composited feature map `[res, res, C]` and accumulated alpha `[res, res]`.
#[derive(Clone, Copy)]
pub struct RenderMaps<'g, T: Real> {
    pub features: Var<'g, T>,
    pub mask: Var<'g, T>,
}

/// Feature map, mask and RGB image `[res, res, 3]`.
#[derive(Clone, Copy)]
pub struct RenderOutput<'g, T: Real> {
    pub image: Var<'g, T>,
    pub mask: Var<'g, T>,
    pub features: Var<'g, T>,
}

/// Alpha-composites one ray: returns `(feature [C], alpha)`.
pub fn composite<'g, T: Real>(
    sigma: Var<'g, T>,
    features: Var<'g, T>,
    delta: f64,
) -> (Var<'g, T>, Var<'g, T>) {
    let n = sigma.numel();
    let w = sigma
        .reshape(&[1, n])
        .composite_weights(vec![T::lit(delta)]);
    let c = features.shape()[1];
    let feat = (w.reshape(&[n, 1]) * features).sum_axis(0).reshape(&[c]);
    (feat, opacity(sigma.reshape(&[1, n]), &[delta]).reshape(&[]))
}

/// `1 - exp(-sum_i sigma_i delta)` per ray of `sigma: [rays, samples]`.
/// Equals the sum of the compositing weights but cannot round above one.
fn opacity<'g, T: Real>(sigma: Var<'g, T>, deltas: &[f64]) -> Var<'g, T> {
    let rays = deltas.len();
    let d = sigma.graph().constant(Tensor::new(
        &[rays, 1],
        deltas.iter().map(|&d| T::lit(d)).collect(),
    ));
    (sigma * d)
        .sum_axis(1)
        .neg()
        .exp()
        .neg()
        .add_scalar(1.0)
        .reshape(&[rays, 1])
}

/// Sample positions along each hit ray, in volume coordinates.
struct RaySamples {
    hit_rows: Vec<usize>,
    deltas: Vec<f64>,
    taps: Taps,
}

fn sample_rays<R: Rng + ?Sized>(
    pose: &CameraPose,
    k: &Intrinsics,
    frame: &VolumeFrame,
    dims: [usize; 3],
    cfg: &RenderConfig,
    mut jitter: Option<&mut R>,
) -> RaySamples {
    assert!(cfg.n_samples > 0, "n_samples must be positive");
    let rays = generate_rays(&frame.pose_to_volume(pose), k);
    let mut out = RaySamples {
        hit_rows: Vec::new(),
        deltas: Vec::new(),
        taps: Taps::new(8),
    };
    let ns = cfg.n_samples;
    for i in 0..rays.len() {
        if !rays.hit[i] {
            continue;
        }
        let delta = (rays.far[i] - rays.near[i]) / ns as f64;
        out.hit_rows.push(i);
        out.deltas.push(delta);
        for s in 0..ns {
            let u = match jitter.as_deref_mut() {
                Some(rng) if cfg.stratified => rng.random::<f64>(),
                _ => 0.5,
            };
            let p = rays.point(i, rays.near[i] + (s as f64 + u) * delta);
            push_trilinear(&mut out.taps, dims, [p.x, p.y, p.z]);
        }
    }
    out
}

/// Renders the feature map and mask of `field` seen from `pose`, which is
/// expressed in the frame that `frame` maps onto the `[-1, 1]^3` volume.
/// Rays that miss the volume get zero features and zero alpha.
pub fn render_maps<'g, T: Real, R: Rng + ?Sized>(
    field: &RadianceField<'g, T>,
    pose: &CameraPose,
    k: &Intrinsics,
    frame: &VolumeFrame,
    cfg: &RenderConfig,
    jitter: Option<&mut R>,
) -> RenderMaps<'g, T> {
    let dims = field.dims();
    let c = field.channels();
    let n_vox: usize = dims.iter().product();
    let res = k.res;
    let graph = field.density.graph();
    let rs = sample_rays(pose, k, frame, dims, cfg, jitter);
    let n_hit = rs.hit_rows.len();
    if n_hit == 0 {
        return RenderMaps {
            features: graph.constant(Tensor::zeros(&[res, res, c])),
            mask: graph.constant(Tensor::zeros(&[res, res])),
        };
    }
    let ns = cfg.n_samples;
    let grid = Var::concat(
        &[
            field.density.reshape(&[n_vox, 1]),
            field.features.reshape(&[n_vox, c]),
        ],
        1,
    );
    let samples = rs.taps.apply(grid);
    let sigma = samples
        .slice(1, 0, 1)
        .reshape(&[n_hit, ns])
        .scale(cfg.density_scale);
    let w = sigma.composite_weights(rs.deltas.iter().map(|&d| T::lit(d)).collect());
    let feats = samples.slice(1, 1, c).reshape(&[n_hit, ns, c]);
    let feat = (w.reshape(&[n_hit, ns, 1]) * feats).sum_axis(1);
    let alpha = opacity(sigma, &rs.deltas);
    let packed = Var::concat(&[feat, alpha], 1).scatter_rows(&rs.hit_rows, res * res);
    RenderMaps {
        features: packed.slice(1, 0, c).reshape(&[res, res, c]),
        mask: packed.slice(1, c, 1).reshape(&[res, res]),
    }
}

/// Accumulated alpha only; skips the feature channels.
pub fn mask_render<'g, T: Real>(
    density: Var<'g, T>,
    pose: &CameraPose,
    k: &Intrinsics,
    frame: &VolumeFrame,
    cfg: &RenderConfig,
) -> Var<'g, T> {
    let s = density.shape();
    let dims = [s[0], s[1], s[2]];
    let res = k.res;
    let rs = sample_rays::<rand_chacha::ChaCha8Rng>(pose, k, frame, dims, cfg, None);
    let n_hit = rs.hit_rows.len();
    if n_hit == 0 {
        return density.graph().constant(Tensor::zeros(&[res, res]));
    }
    let sigma = rs
        .taps
        .apply(density.reshape(&[dims.iter().product(), 1]))
        .reshape(&[n_hit, cfg.n_samples])
        .scale(cfg.density_scale);
    opacity(sigma, &rs.deltas)
        .scatter_rows(&rs.hit_rows, res * res)
        .reshape(&[res, res])
}

/// Two 3x3 convolutions with a shifted-softplus between, then a sigmoid.
#[derive(Clone, Debug)]
pub struct Readout {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl Readout {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        channels: usize,
    ) -> Self {
        Readout {
            conv1: Conv2d::new(
                store,
                init,
                &format!("{name}.conv1"),
                3,
                channels,
                channels,
                ParamGroup::Rest,
            ),
            conv2: Conv2d::new(
                store,
                init,
                &format!("{name}.conv2"),
                3,
                channels,
                3,
                ParamGroup::Rest,
            ),
        }
    }

    pub fn forward<'g, T: Real>(&self, b: &Binding<'g, T>, features: Var<'g, T>) -> Var<'g, T> {
        assert_eq!(
            features.shape()[2],
            self.conv1.c_in,
            "readout channel mismatch"
        );
        let h = self.conv1.forward(b, features).shifted_softplus();
        self.conv2.forward(b, h).sigmoid()
    }
}

#[allow(clippy::too_many_arguments)]
pub fn render<'g, T: Real, R: Rng + ?Sized>(
    b: &Binding<'g, T>,
    readout: &Readout,
    field: &RadianceField<'g, T>,
    pose: &CameraPose,
    k: &Intrinsics,
    frame: &VolumeFrame,
    cfg: &RenderConfig,
    jitter: Option<&mut R>,
) -> RenderOutput<'g, T> {
    let maps = render_maps(field, pose, k, frame, cfg, jitter);
    RenderOutput {
        image: readout.forward(b, maps.features),
        mask: maps.mask,
        features: maps.features,
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (P6) of an `[h, w, 3]` image with values in `[0, 1]`.
pub fn encode_ppm<T: Real>(image: &Tensor<T>) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[2] == 3, "ppm needs [h, w, 3], got {s:?}");
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|v| quantize(v.as_f64())));
    out
}

/// Grayscale `[h, w]` map written as a 3-channel PPM.
pub fn encode_ppm_gray<T: Real>(map: &Tensor<T>) -> Vec<u8> {
    let s = map.shape();
    assert_eq!(s.len(), 2, "gray ppm needs [h, w], got {s:?}");
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    for v in map.data() {
        let q = quantize(v.as_f64());
        out.extend([q, q, q]);
    }
    out
}

pub fn write_ppm(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)
}
