//! The pose-free reconstruction network and the projection baseline.

mod config;
mod decoder;
mod projection;

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{relative_pose, CameraPose, Intrinsics};
use crate::nn::{
    Binding, Init, ParamGroup, ParamId, ParamStore, PatchEmbed, TokenSet, TransformerBlock,
};
use crate::render::{render, RadianceField, Readout, RenderOutput};
use crate::tensor::{Real, Tensor, Var};

pub use config::{ConfigError, EncoderVariant, ModelConfig, ModelKind};
pub use decoder::Decoder;
pub use projection::{aggregation_taps, ProjectionHead};

/// Camera poses travelling with the input images. Reads are counted so
/// tests can assert that the pose-free path never looks at them.
#[derive(Debug, Default)]
pub struct PoseMetadata {
    poses: Vec<CameraPose>,
    reads: Cell<usize>,
}

impl PoseMetadata {
    pub fn new(poses: Vec<CameraPose>) -> Self {
        PoseMetadata {
            poses,
            reads: Cell::new(0),
        }
    }

    pub fn get(&self) -> &[CameraPose] {
        self.reads.set(self.reads.get() + 1);
        &self.poses
    }

    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// `k` input images `[res, res, 3]` with their (possibly noisy) poses.
pub struct ModelInput<T> {
    pub images: Vec<Tensor<T>>,
    pub poses: PoseMetadata,
    pub intrinsics: Intrinsics,
}

impl<T: Real> ModelInput<T> {
    pub fn k(&self) -> usize {
        self.images.len()
    }
}

/// A recorded attention map `[heads, queries, keys]`.
pub struct AttentionMap<'g, T: Real> {
    pub name: String,
    pub weights: Var<'g, T>,
}

pub struct ForwardOutput<'g, T: Real> {
    pub field: RadianceField<'g, T>,
    /// Input views in processing order; the canonical view comes first.
    pub view_order: Vec<usize>,
    pub attention: Vec<AttentionMap<'g, T>>,
}

/// Layer structure; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub patch: PatchEmbed,
    pub backbone: Vec<TransformerBlock>,
    pub nvu: Vec<Option<TransformerBlock>>,
    pub gcr: Vec<Option<TransformerBlock>>,
    pub volume: ParamId,
    pub mapping: Vec<(TransformerBlock, TransformerBlock)>,
    pub projection: Option<ProjectionHead>,
    pub decoder: Decoder,
    pub readout: Readout,
}

impl Model {
    /// Builds the layers and draws initial parameters from `seed`.
    pub fn new<T: Real>(
        cfg: &ModelConfig,
        seed: u64,
    ) -> Result<(Model, ParamStore<T>), ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let model = Self::build(cfg, &mut store, &mut rng);
        Ok((model, store))
    }

    fn build<T: Real, R: Rng>(cfg: &ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Model {
        let mut init = Init { rng };
        let att = cfg.attention();
        let bb = ParamGroup::Backbone;
        let rest = ParamGroup::Rest;
        let patch = PatchEmbed::new(
            store,
            &mut init,
            "backbone.patch",
            cfg.res,
            cfg.patch,
            cfg.width,
            bb,
        );
        let backbone = (0..cfg.backbone_blocks)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &mut init,
                    &format!("backbone.block{i}"),
                    &att,
                    false,
                    bb,
                )
            })
            .collect();
        let posefree = cfg.kind == ModelKind::Posefree;
        let (mut nvu, mut gcr) = (Vec::new(), Vec::new());
        if posefree {
            for i in 0..cfg.encoder_blocks {
                let with_nvu = cfg.encoder_variant != EncoderVariant::GcrOnly;
                let with_gcr = cfg.encoder_variant != EncoderVariant::NvuOnly;
                nvu.push(with_nvu.then(|| {
                    TransformerBlock::new(
                        store,
                        &mut init,
                        &format!("encoder{i}.nvu"),
                        &att,
                        true,
                        rest,
                    )
                }));
                gcr.push(with_gcr.then(|| {
                    TransformerBlock::new(
                        store,
                        &mut init,
                        &format!("encoder{i}.gcr"),
                        &att,
                        false,
                        rest,
                    )
                }));
            }
        }
        let n_vox = cfg.volume_res.pow(3);
        let volume = store.add("volume", init.normal(&[n_vox, cfg.width], 0.02), rest);
        let mapping = if posefree {
            (0..cfg.mapping_blocks)
                .map(|i| {
                    (
                        TransformerBlock::new(
                            store,
                            &mut init,
                            &format!("mapping{i}.cross"),
                            &att,
                            true,
                            rest,
                        ),
                        TransformerBlock::new(
                            store,
                            &mut init,
                            &format!("mapping{i}.self"),
                            &att,
                            false,
                            rest,
                        ),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let projection = (!posefree).then(|| ProjectionHead::new(store, &mut init, cfg));
        let decoder = Decoder::new(store, &mut init, cfg);
        let readout = Readout::new(store, &mut init, "readout", cfg.feature_channels);
        Model {
            cfg: cfg.clone(),
            patch,
            backbone,
            nvu,
            gcr,
            volume,
            mapping,
            projection,
            decoder,
            readout,
        }
    }

    /// Canonical view first, then the others in cyclic order.
    pub fn view_order(k: usize, canonical: usize) -> Vec<usize> {
        assert!(
            canonical < k,
            "canonical index {canonical} out of range for {k} views"
        );
        (0..k).map(|i| (canonical + i) % k).collect()
    }

    /// Per-view tokens from the shared image backbone, in `order`.
    pub fn encode_views<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        images: &[Tensor<T>],
        order: &[usize],
    ) -> Vec<TokenSet<'g, T>> {
        order
            .iter()
            .map(|&v| {
                let mut t = self.patch.forward(b, b.constant(images[v].clone()), v);
                for blk in &self.backbone {
                    t.tokens = blk.forward_self(b, t.tokens).out;
                }
                t
            })
            .collect()
    }

    /// Alternating non-canonical update and global consensus blocks.
    /// `views[0]` is the canonical view.
    pub fn multi_view_encode<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        views: &[TokenSet<'g, T>],
        attention: &mut Vec<AttentionMap<'g, T>>,
    ) -> TokenSet<'g, T> {
        let hw = views[0].len();
        let k = views.len();
        let mut all = TokenSet::concat(views);
        for (i, (nvu, gcr)) in self.nvu.iter().zip(&self.gcr).enumerate() {
            if let (Some(nvu), true) = (nvu, k > 1) {
                let canon = all.tokens.slice(0, 0, hw);
                let others = all.tokens.slice(0, hw, (k - 1) * hw);
                let a = nvu.forward_cross(b, others, canon);
                attention.push(AttentionMap {
                    name: format!("encoder{i}.nvu"),
                    weights: a.weights,
                });
                all.tokens = Var::concat(&[canon, a.out], 0);
            }
            if let Some(gcr) = gcr {
                let a = gcr.forward_self(b, all.tokens);
                attention.push(AttentionMap {
                    name: format!("encoder{i}.gcr"),
                    weights: a.weights,
                });
                all.tokens = a.out;
            }
        }
        all
    }

    /// Voxel tokens `[H*W*D, c]` updated by cross-attention to `f` and
    /// self-attention among themselves, `n_m` times.
    pub fn map_2d_to_3d<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        f: &TokenSet<'g, T>,
        attention: &mut Vec<AttentionMap<'g, T>>,
    ) -> Var<'g, T> {
        let mut v = b.param(self.volume);
        for (i, (cross, refine)) in self.mapping.iter().enumerate() {
            let a = cross.forward_cross(b, v, f.tokens);
            attention.push(AttentionMap {
                name: format!("mapping{i}.cross"),
                weights: a.weights,
            });
            v = refine.forward_self(b, a.out).out;
        }
        v
    }

    /// Images to radiance field in the canonical view's frame.
    pub fn forward<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        input: &ModelInput<T>,
        canonical: usize,
    ) -> ForwardOutput<'g, T> {
        let k = input.k();
        assert!(k >= 1, "need at least one view");
        for im in &input.images {
            assert_eq!(
                im.shape(),
                &[self.cfg.res, self.cfg.res, 3],
                "input image shape"
            );
        }
        let order = Self::view_order(k, canonical);
        let views = self.encode_views(b, &input.images, &order);
        let mut attention = Vec::new();
        let volume = match &self.projection {
            None => {
                let f = self.multi_view_encode(b, &views, &mut attention);
                self.map_2d_to_3d(b, &f, &mut attention)
            }
            Some(head) => {
                let poses = input.poses.get();
                let ordered: Vec<CameraPose> = order.iter().map(|&v| poses[v]).collect();
                head.forward(
                    b,
                    &self.cfg,
                    self.volume,
                    &views,
                    &ordered,
                    &input.intrinsics,
                )
            }
        };
        ForwardOutput {
            field: self.decoder.forward(b, volume),
            view_order: order,
            attention,
        }
    }

    /// Pose of `target` as the renderer expects it: relative to the
    /// canonical camera, or absolute for a world-frame model.
    pub fn render_pose(&self, canonical: &CameraPose, target: &CameraPose) -> CameraPose {
        if self.cfg.world_frame {
            *target
        } else {
            relative_pose(canonical, target)
        }
    }

    /// Render with samples at interval midpoints.
    pub fn render_midpoint<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        field: &RadianceField<'g, T>,
        pose: &CameraPose,
        k: &Intrinsics,
    ) -> RenderOutput<'g, T> {
        self.render::<T, rand_chacha::ChaCha8Rng>(b, field, pose, k, None)
    }

    pub fn render<'g, T: Real, R: Rng + ?Sized>(
        &self,
        b: &Binding<'g, T>,
        field: &RadianceField<'g, T>,
        pose: &CameraPose,
        k: &Intrinsics,
        jitter: Option<&mut R>,
    ) -> RenderOutput<'g, T> {
        render(
            b,
            &self.readout,
            field,
            pose,
            k,
            &self.cfg.volume_frame(),
            &self.cfg.render,
            jitter,
        )
    }
}
