use rand::Rng;

use super::{Binding, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Real, Var};

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        group: ParamGroup,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.fan_in(&[d_in, d_out], d_in),
            group,
        );
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), init.fan_in(&[d_out], d_in), group));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward<'g, T: Real>(&self, b: &Binding<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.matmul(b.param(self.weight));
        match self.bias {
            Some(bias) => y + b.param(bias),
            None => y,
        }
    }
}

/// Layer normalization over the last axis with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        group: ParamGroup,
    ) -> Self {
        LayerNorm {
            gamma: store.add(
                format!("{name}.gamma"),
                crate::tensor::Tensor::full(&[width], T::one()),
                group,
            ),
            beta: store.add(
                format!("{name}.beta"),
                crate::tensor::Tensor::zeros(&[width]),
                group,
            ),
            eps: 1e-5,
        }
    }

    pub fn forward<'g, T: Real>(&self, b: &Binding<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.layer_norm(self.eps) * b.param(self.gamma) + b.param(self.beta)
    }
}

/// Two linear maps around a shifted-softplus activation.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        width: usize,
        hidden: usize,
        group: ParamGroup,
    ) -> Self {
        FeedForward {
            up: Linear::new(
                store,
                init,
                &format!("{name}.up"),
                width,
                hidden,
                true,
                group,
            ),
            down: Linear::new(
                store,
                init,
                &format!("{name}.down"),
                hidden,
                width,
                true,
                group,
            ),
        }
    }

    pub fn forward<'g, T: Real>(&self, b: &Binding<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let h = self.up.forward(b, x).shifted_softplus();
        self.down.forward(b, h)
    }
}

/// 3D convolution, stride 1, zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = kernel.pow(3) * c_in;
        Conv3d {
            weight: store.add(
                format!("{name}.weight"),
                init.fan_in(&[kernel, kernel, kernel, c_in, c_out], fan_in),
                group,
            ),
            bias: store.add(format!("{name}.bias"), init.fan_in(&[c_out], fan_in), group),
            kernel,
            c_in,
            c_out,
        }
    }

    pub fn forward<'g, T: Real>(&self, b: &Binding<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv3d(b.param(self.weight)) + b.param(self.bias)
    }
}

/// 2D convolution, stride 1, zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = kernel * kernel * c_in;
        Conv2d {
            weight: store.add(
                format!("{name}.weight"),
                init.fan_in(&[kernel, kernel, c_in, c_out], fan_in),
                group,
            ),
            bias: store.add(format!("{name}.bias"), init.fan_in(&[c_out], fan_in), group),
            kernel,
            c_in,
            c_out,
        }
    }

    pub fn forward<'g, T: Real>(&self, b: &Binding<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.conv2d(b.param(self.weight)) + b.param(self.bias)
    }
}

/// Where a token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenOrigin {
    pub view: usize,
    pub row: usize,
    pub col: usize,
}

/// Tokens `[n, c]` with per-token provenance.
#[derive(Clone, Debug)]
pub struct TokenSet<'g, T: Real> {
    pub tokens: Var<'g, T>,
    pub origins: Vec<TokenOrigin>,
}

impl<'g, T: Real> TokenSet<'g, T> {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn concat(sets: &[TokenSet<'g, T>]) -> TokenSet<'g, T> {
        let vars: Vec<_> = sets.iter().map(|s| s.tokens).collect();
        TokenSet {
            tokens: Var::concat(&vars, 0),
            origins: sets
                .iter()
                .flat_map(|s| s.origins.iter().copied())
                .collect(),
        }
    }
}

/// Splits an image into `p x p` patches, maps each linearly to `c` channels,
/// and adds a learned per-patch position embedding shared by all views.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub res: usize,
    pub patch: usize,
}

impl PatchEmbed {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        res: usize,
        patch: usize,
        width: usize,
        group: ParamGroup,
    ) -> Self {
        assert!(
            res.is_multiple_of(patch),
            "resolution {res} not divisible by patch {patch}"
        );
        let grid = res / patch;
        PatchEmbed {
            proj: Linear::new(
                store,
                init,
                &format!("{name}.proj"),
                patch * patch * 3,
                width,
                true,
                group,
            ),
            pos: store.add(
                format!("{name}.pos"),
                init.normal(&[grid * grid, width], 0.02),
                group,
            ),
            res,
            patch,
        }
    }

    pub fn grid(&self) -> usize {
        self.res / self.patch
    }

    /// `image: [res, res, 3]` -> `(res/p)^2` tokens in row-major patch order.
    pub fn forward<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        image: Var<'g, T>,
        view: usize,
    ) -> TokenSet<'g, T> {
        let shape = image.shape();
        assert!(
            shape == [self.res, self.res, 3],
            "patch_embed expects [{0},{0},3], got {shape:?}",
            self.res
        );
        let (g, p) = (self.grid(), self.patch);
        let patches = image
            .reshape(&[g, p, g, p, 3])
            .permute(&[0, 2, 1, 3, 4])
            .reshape(&[g * g, p * p * 3]);
        let tokens = self.proj.forward(b, patches) + b.param(self.pos);
        let origins = (0..g * g)
            .map(|i| TokenOrigin {
                view,
                row: i / g,
                col: i % g,
            })
            .collect();
        TokenSet { tokens, origins }
    }
}
