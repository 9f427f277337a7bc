use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Binding, FeedForward, Init, LayerNorm, Linear, ParamGroup, ParamStore};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    /// FFN hidden width is `ffn_mult * width`.
    pub ffn_mult: usize,
    #[serde(default = "default_pre_norm")]
    pub pre_norm: bool,
}

fn default_pre_norm() -> bool {
    true
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        assert!(
            self.heads > 0 && self.width.is_multiple_of(self.heads),
            "width {} not divisible by {} heads",
            self.width,
            self.heads
        );
        self.width / self.heads
    }
}

pub struct AttentionOutput<'g, T: Real> {
    pub out: Var<'g, T>,
    /// `[heads, n_queries, n_keys]`, rows sum to one.
    pub weights: Var<'g, T>,
}

/// Scaled dot-product attention on already projected `q [nq, c]`,
/// `k [nk, c]`, `v [nk, c]`, split into `heads` along the channel axis.
pub fn attend<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
) -> AttentionOutput<'g, T> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    assert!(
        qs.len() == 2 && ks.len() == 2 && vs.len() == 2,
        "attention operands must be rank 2"
    );
    assert_eq!(qs[1], ks[1], "query/key width mismatch");
    assert_eq!(ks, vs, "key/value shape mismatch");
    let (nq, nk, c) = (qs[0], ks[0], qs[1]);
    assert!(c % heads == 0, "width {c} not divisible by {heads} heads");
    let dh = c / heads;
    let qh = q.reshape(&[nq, heads, dh]).permute(&[1, 0, 2]);
    let kt = k.reshape(&[nk, heads, dh]).permute(&[1, 2, 0]);
    let vh = v.reshape(&[nk, heads, dh]).permute(&[1, 0, 2]);
    let weights = qh.matmul(kt).scale(1.0 / (dh as f64).sqrt()).softmax();
    let out = weights.matmul(vh).permute(&[1, 0, 2]).reshape(&[nq, c]);
    AttentionOutput { out, weights }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cfg: &AttentionConfig,
        group: ParamGroup,
    ) -> Self {
        cfg.head_dim();
        let c = cfg.width;
        MultiHeadAttention {
            q: Linear::new(store, init, &format!("{name}.q"), c, c, true, group),
            k: Linear::new(store, init, &format!("{name}.k"), c, c, false, group),
            v: Linear::new(store, init, &format!("{name}.v"), c, c, true, group),
            o: Linear::new(store, init, &format!("{name}.o"), c, c, true, group),
            heads: cfg.heads,
        }
    }

    pub fn forward<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        query: Var<'g, T>,
        kv: Var<'g, T>,
    ) -> AttentionOutput<'g, T> {
        let width = self.q.d_in;
        assert_eq!(query.shape()[1], width, "query width mismatch");
        assert_eq!(kv.shape()[1], width, "key/value width mismatch");
        let a = attend(
            self.q.forward(b, query),
            self.k.forward(b, kv),
            self.v.forward(b, kv),
            self.heads,
        );
        AttentionOutput {
            out: self.o.forward(b, a.out),
            weights: a.weights,
        }
    }
}

/// Attention plus FFN with residuals. Cross blocks normalize keys/values
/// with their own layer norm.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub norm_kv: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub pre_norm: bool,
}

impl TransformerBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        init: &mut Init<'_, R>,
        name: &str,
        cfg: &AttentionConfig,
        cross: bool,
        group: ParamGroup,
    ) -> Self {
        let c = cfg.width;
        TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c, group),
            norm_kv: cross.then(|| LayerNorm::new(store, &format!("{name}.norm_kv"), c, group)),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), cfg, group),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c, group),
            ffn: FeedForward::new(
                store,
                init,
                &format!("{name}.ffn"),
                c,
                c * cfg.ffn_mult,
                group,
            ),
            pre_norm: cfg.pre_norm,
        }
    }

    pub fn forward_self<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        x: Var<'g, T>,
    ) -> AttentionOutput<'g, T> {
        assert!(
            self.norm_kv.is_none(),
            "cross-attention block used as self-attention"
        );
        self.run(b, x, None)
    }

    pub fn forward_cross<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        x: Var<'g, T>,
        kv: Var<'g, T>,
    ) -> AttentionOutput<'g, T> {
        assert!(
            self.norm_kv.is_some(),
            "self-attention block used for cross-attention"
        );
        self.run(b, x, Some(kv))
    }

    fn run<'g, T: Real>(
        &self,
        b: &Binding<'g, T>,
        x: Var<'g, T>,
        kv: Option<Var<'g, T>>,
    ) -> AttentionOutput<'g, T> {
        if self.pre_norm {
            let h = self.norm1.forward(b, x);
            let kv = match (kv, &self.norm_kv) {
                (Some(kv), Some(n)) => n.forward(b, kv),
                _ => h,
            };
            let a = self.attn.forward(b, h, kv);
            let x = x + a.out;
            let x = x + self.ffn.forward(b, self.norm2.forward(b, x));
            AttentionOutput {
                out: x,
                weights: a.weights,
            }
        } else {
            let kv = match (kv, &self.norm_kv) {
                (Some(kv), Some(n)) => n.forward(b, kv),
                _ => x,
            };
            let a = self.attn.forward(b, x, kv);
            let x = self.norm1.forward(b, x + a.out);
            let x = self.norm2.forward(b, x + self.ffn.forward(b, x));
            AttentionOutput {
                out: x,
                weights: a.weights,
            }
        }
    }
}
