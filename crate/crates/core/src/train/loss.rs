use serde::{Deserialize, Serialize};

use crate::render::RenderOutput;
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mask_weight: f64,
    /// Weight of a perceptual term. No pretrained network ships with this
    /// crate, so only 0 is accepted.
    pub perceptual_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mask_weight: 5.0,
            perceptual_weight: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.mask_weight >= 0.0 && self.mask_weight.is_finite()) {
            return Err(format!(
                "loss.mask_weight must be >= 0, got {}",
                self.mask_weight
            ));
        }
        if self.perceptual_weight != 0.0 {
            return Err("loss.perceptual_weight is not supported; set it to 0".into());
        }
        Ok(())
    }
}

pub fn mse<'g, T: Real>(pred: Var<'g, T>, target: &Tensor<T>) -> Var<'g, T> {
    assert_eq!(pred.shape(), target.shape(), "loss shape mismatch");
    (pred - pred.graph().constant(target.clone()))
        .square()
        .mean()
}

/// `sum_i mse(image_i) + mask_weight * sum_i mse(mask_i)`.
pub fn loss_total<'g, T: Real>(
    rendered: &[RenderOutput<'g, T>],
    images: &[Tensor<T>],
    masks: &[Tensor<T>],
    cfg: &LossConfig,
) -> Var<'g, T> {
    assert!(!rendered.is_empty(), "no rendered views");
    assert_eq!(rendered.len(), images.len());
    assert_eq!(rendered.len(), masks.len());
    let mut total: Option<Var<'g, T>> = None;
    for ((r, img), m) in rendered.iter().zip(images).zip(masks) {
        let mut term = mse(r.image, img);
        if cfg.mask_weight > 0.0 {
            term = term + mse(r.mask, m).scale(cfg.mask_weight);
        }
        total = Some(match total {
            Some(t) => t + term,
            None => term,
        });
    }
    total.expect("at least one view")
}
