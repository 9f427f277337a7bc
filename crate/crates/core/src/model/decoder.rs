use rand::Rng;

use super::ModelConfig;
use crate::nn::{Binding, Conv3d, Init, LayerNorm, ParamGroup, ParamStore};
use crate::render::RadianceField;
use crate::tensor::{Real, Var};

/// Volume tokens to a radiance field four times finer per axis.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub norm: LayerNorm,
    pub stem: Conv3d,
    pub up1: Conv3d,
    pub up2: Conv3d,
    pub density: Conv3d,
    pub features: Conv3d,
    pub volume_res: usize,
}

impl Decoder {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        cfg: &ModelConfig,
    ) -> Self {
        let g = ParamGroup::Rest;
        let [d0, d1] = cfg.decoder_channels;
        let dec = Decoder {
            norm: LayerNorm::new(store, "decoder.norm", cfg.width, g),
            stem: Conv3d::new(store, init, "decoder.stem", 3, cfg.width, d0, g),
            up1: Conv3d::new(store, init, "decoder.up1", 3, d0, d1, g),
            up2: Conv3d::new(store, init, "decoder.up2", 3, d1, d1, g),
            density: Conv3d::new(store, init, "decoder.density", 1, d1, 1, g),
            features: Conv3d::new(
                store,
                init,
                "decoder.features",
                1,
                d1,
                cfg.feature_channels,
                g,
            ),
            volume_res: cfg.volume_res,
        };
        store
            .get_mut(dec.density.bias)
            .value
            .fill(T::lit(cfg.density_bias_init));
        dec
    }

    /// `tokens: [n^3, c]` with the first grid axis slowest.
    pub fn forward<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        tokens: Var<'g, T>,
    ) -> RadianceField<'g, T> {
        let n = self.volume_res;
        let c = tokens.shape()[1];
        let x = self.norm.forward(b, tokens).reshape(&[n, n, n, c]);
        let x = self.stem.forward(b, x).shifted_softplus();
        let x = self.up1.forward(b, upsample2(x)).shifted_softplus();
        let x = self.up2.forward(b, upsample2(x)).shifted_softplus();
        let m = 4 * n;
        RadianceField {
            density: self.density.forward(b, x).softplus().reshape(&[m, m, m]),
            features: self.features.forward(b, x).tanh(),
        }
    }
}

/// Nearest-neighbour doubling of a `[n, n, n, c]` grid.
pub fn upsample2<'g, T: Real>(x: Var<'g, T>) -> Var<'g, T> {
    let s = x.shape();
    let (nx, ny, nz, c) = (s[0], s[1], s[2], s[3]);
    let mut rows = Vec::with_capacity(8 * nx * ny * nz);
    for i in 0..2 * nx {
        for j in 0..2 * ny {
            for k in 0..2 * nz {
                rows.push(((i / 2) * ny + j / 2) * nz + k / 2);
            }
        }
    }
    x.reshape(&[nx * ny * nz, c])
        .index_select(&rows)
        .reshape(&[2 * nx, 2 * ny, 2 * nz, c])
}
