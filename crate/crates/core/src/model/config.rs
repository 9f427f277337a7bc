use serde::{Deserialize, Serialize};

use crate::geometry::VolumeFrame;
use crate::nn::AttentionConfig;
use crate::render::RenderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Attention-based 2D-3D mapping; never reads input poses.
    Posefree,
    /// Voxel features sampled at pinhole projections into each input view.
    Projection,
}

/// Which layers each multi-view encoder block contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    /// Non-canonical view update followed by global consensus reasoning.
    Full,
    GcrOnly,
    NvuOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub res: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub pre_norm: bool,
    pub backbone_blocks: usize,
    pub encoder_blocks: usize,
    pub encoder_variant: EncoderVariant,
    pub mapping_blocks: usize,
    /// Latent volume edge `H = W = D`.
    pub volume_res: usize,
    /// Radiance field edge, `4 * volume_res`.
    pub field_res: usize,
    pub feature_channels: usize,
    /// Output widths of the two upsampling stages.
    pub decoder_channels: [usize; 2],
    pub density_bias_init: f64,
    /// Residual FFN blocks after projection aggregation.
    pub projection_blocks: usize,
    /// Distance from the canonical camera to the volume center.
    pub volume_depth: f64,
    pub volume_half_extent: f64,
    /// Define the volume in the world frame and render with absolute poses.
    pub world_frame: bool,
    pub render: RenderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Posefree,
            res: 32,
            patch: 4,
            width: 64,
            heads: 4,
            ffn_mult: 2,
            pre_norm: true,
            backbone_blocks: 2,
            encoder_blocks: 2,
            encoder_variant: EncoderVariant::Full,
            mapping_blocks: 4,
            volume_res: 8,
            field_res: 32,
            feature_channels: 8,
            decoder_channels: [32, 16],
            density_bias_init: -6.0,
            projection_blocks: 2,
            volume_depth: 3.4,
            volume_half_extent: 1.6,
            world_frame: false,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError(m));
        if self.res == 0 || self.patch == 0 || !self.res.is_multiple_of(self.patch) {
            return err(format!(
                "res {} must be a positive multiple of patch {}",
                self.res, self.patch
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return err(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.mapping_blocks == 0 && self.kind == ModelKind::Posefree {
            return err("mapping_blocks must be at least 1".into());
        }
        if self.volume_res == 0 || self.field_res != 4 * self.volume_res {
            return err(format!(
                "field_res {} must be 4 x volume_res {}",
                self.field_res, self.volume_res
            ));
        }
        if self.feature_channels == 0 || self.ffn_mult == 0 || self.decoder_channels.contains(&0) {
            return err("channel counts must be positive".into());
        }
        if self.render.n_samples == 0 || self.render.density_scale <= 0.0 {
            return err("render.n_samples and render.density_scale must be positive".into());
        }
        if !(self.volume_half_extent > 0.0 && self.volume_depth.is_finite()) {
            return err("volume_half_extent must be positive".into());
        }
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            width: self.width,
            heads: self.heads,
            ffn_mult: self.ffn_mult,
            pre_norm: self.pre_norm,
        }
    }

    pub fn grid(&self) -> usize {
        self.res / self.patch
    }

    pub fn tokens_per_view(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn volume_frame(&self) -> VolumeFrame {
        if self.world_frame {
            VolumeFrame::unit()
        } else {
            VolumeFrame::in_front(self.volume_depth, self.volume_half_extent)
        }
    }

    /// Tiny configuration for end-to-end gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            res: 8,
            patch: 4,
            width: 8,
            heads: 2,
            ffn_mult: 1,
            backbone_blocks: 1,
            encoder_blocks: 1,
            mapping_blocks: 1,
            volume_res: 2,
            field_res: 8,
            feature_channels: 2,
            decoder_channels: [4, 3],
            projection_blocks: 1,
            render: RenderConfig {
                n_samples: 4,
                density_scale: 4.0,
                stratified: false,
            },
            ..Self::default()
        }
    }
}
