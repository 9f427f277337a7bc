use rand::Rng;

use super::ModelConfig;
use crate::geometry::{project_point, relative_pose, CameraPose, Intrinsics, Vec3};
use crate::nn::sample::{push_bilinear, Taps};
use crate::nn::{
    Binding, FeedForward, Init, LayerNorm, Linear, ParamGroup, ParamId, ParamStore, TokenSet,
};
use crate::tensor::{Real, Var};

/// Pose-based aggregation: each voxel averages bilinear samples of the
/// token grids of the views it projects into.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub proj: Linear,
    pub blocks: Vec<(LayerNorm, FeedForward)>,
}

impl ProjectionHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        cfg: &ModelConfig,
    ) -> Self {
        let g = ParamGroup::Rest;
        let c = cfg.width;
        ProjectionHead {
            proj: Linear::new(store, init, "projection.in", c, c, true, g),
            blocks: (0..cfg.projection_blocks)
                .map(|i| {
                    (
                        LayerNorm::new(store, &format!("projection.block{i}.norm"), c, g),
                        FeedForward::new(
                            store,
                            init,
                            &format!("projection.block{i}.ffn"),
                            c,
                            c * cfg.ffn_mult,
                            g,
                        ),
                    )
                })
                .collect(),
        }
    }

    /// `views` and `poses` are in processing order, canonical first.
    pub fn forward<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        cfg: &ModelConfig,
        volume: ParamId,
        views: &[TokenSet<'g, T>],
        poses: &[CameraPose],
        k: &Intrinsics,
    ) -> Var<'g, T> {
        assert_eq!(views.len(), poses.len(), "one pose per view");
        let taps = aggregation_taps(cfg, poses, k);
        let tokens = TokenSet::concat(views).tokens;
        let mut x = self.proj.forward(b, taps.apply(tokens)) + b.param(volume);
        for (norm, ffn) in &self.blocks {
            x = x + ffn.forward(b, norm.forward(b, x));
        }
        x
    }
}

/// Volume-frame coordinate of node `i` of `n` along one axis.
pub fn node_coord(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// For every voxel of the latent volume, `4 k` taps into the concatenated
/// per-view token rows. Views the voxel does not project into get zero
/// weight; the rest share weight equally.
pub fn aggregation_taps(cfg: &ModelConfig, poses: &[CameraPose], k: &Intrinsics) -> Taps {
    let n = cfg.volume_res;
    let g = cfg.grid();
    let hw = g * g;
    let frame = cfg.volume_frame();
    let reference = if cfg.world_frame {
        CameraPose::identity()
    } else {
        poses[0]
    };
    let rel: Vec<CameraPose> = poses.iter().map(|p| relative_pose(&reference, p)).collect();
    let scale = k.res as f64 / cfg.res as f64 * cfg.patch as f64;
    let mut taps = Taps::new(4 * poses.len());
    let mut hits = Vec::with_capacity(poses.len());
    for i in 0..n {
        for j in 0..n {
            for l in 0..n {
                let p = frame.from_volume(&Vec3::new(
                    node_coord(i, n),
                    node_coord(j, n),
                    node_coord(l, n),
                ));
                hits.clear();
                for (v, pose) in rel.iter().enumerate() {
                    let (u, w, ok) = project_point(&p, pose, k);
                    if ok {
                        hits.push((v, w / scale - 0.5, u / scale - 0.5));
                    }
                }
                let share = if hits.is_empty() {
                    0.0
                } else {
                    1.0 / hits.len() as f64
                };
                for &(v, row, col) in &hits {
                    push_bilinear(&mut taps, [g, g], row, col, v * hw, share);
                }
                for _ in hits.len()..poses.len() {
                    taps.idx.extend([0; 4]);
                    taps.weights.extend([0.0; 4]);
                }
            }
        }
    }
    taps
}
