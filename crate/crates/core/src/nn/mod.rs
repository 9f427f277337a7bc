//! Parameter storage and differentiable building blocks.

mod attention;
mod layers;
pub mod sample;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::blob::AnyTensor;
use crate::tensor::{Graph, Real, Tensor, Var};

pub use attention::{
    attend, AttentionConfig, AttentionOutput, MultiHeadAttention, TransformerBlock,
};
pub use layers::{
    Conv2d, Conv3d, FeedForward, LayerNorm, Linear, PatchEmbed, TokenOrigin, TokenSet,
};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Per-view image feature extractor.
    Backbone,
    Rest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("checkpoint is missing parameter `{0}`")]
    Missing(String),
    #[error("parameter `{name}` has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has unknown parameter `{0}`")]
    Unknown(String),
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, value, group });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.params
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Replaces every parameter value by name, converting precision if needed.
    pub fn load(&mut self, entries: &[(String, AnyTensor)]) -> Result<(), LoadError> {
        for (name, _) in entries {
            if self.find(name).is_none() {
                return Err(LoadError::Unknown(name.clone()));
            }
        }
        for p in &mut self.params {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| LoadError::Missing(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(LoadError::Shape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = t.to();
        }
        Ok(())
    }

    /// All values concatenated in store order.
    pub fn flatten(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .params
            .iter()
            .flat_map(|p| p.value.data().iter().copied())
            .collect();
        let n = data.len();
        Tensor::new(&[n], data)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    group: p.group,
                })
                .collect(),
        }
    }
}

/// Parameter initialization helpers; values are drawn in `f64` so the
/// same seed gives the same model in either precision.
pub struct Init<'r, R: Rng> {
    pub rng: &'r mut R,
}

impl<R: Rng> Init<'_, R> {
    /// Zero-mean uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in<T: Real>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)))
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| T::lit(d.sample(self.rng)))
    }
}

/// Stored parameters bound as graph leaves for one forward pass.
pub struct Binding<'g, T: Real> {
    graph: &'g Graph<T>,
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Binding<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        Binding {
            graph,
            vars: store
                .iter()
                .map(|p| graph.leaf(p.value.clone(), trainable))
                .collect(),
        }
    }

    /// Binds every parameter as a slice of one flat vector laid out in
    /// store order, so a gradient check can perturb all weights at once.
    pub fn from_flat(store: &ParamStore<T>, flat: Var<'g, T>) -> Self {
        let total: usize = store.iter().map(|p| p.value.numel()).sum();
        assert_eq!(
            flat.shape(),
            vec![total],
            "flat parameter vector has wrong length"
        );
        let mut off = 0;
        let vars = store
            .iter()
            .map(|p| {
                let n = p.value.numel();
                let v = flat.slice(0, off, n).reshape(p.value.shape());
                off += n;
                v
            })
            .collect();
        Binding {
            graph: flat.graph(),
            vars,
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(t)
    }

    /// Gradients of every parameter after `backward`.
    pub fn grads(&self) -> Grads<T> {
        Grads {
            tensors: self.vars.iter().map(|&v| self.graph.grad(v)).collect(),
        }
    }
}

/// Per-parameter gradients, `None` where a parameter was unused.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub tensors: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn empty(n: usize) -> Self {
        Grads {
            tensors: vec![None; n],
        }
    }

    pub fn accumulate(&mut self, other: &Grads<T>) {
        assert_eq!(self.tensors.len(), other.tensors.len());
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(b) = b {
                match a {
                    Some(a) => a.add_assign(b),
                    None => *a = Some(b.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.iter_mut().flatten() {
            t.scale_in_place(T::lit(s));
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|t| t.is_finite())
    }

    /// Dense gradient for parameter `i`, zeros when it was unused.
    pub fn dense(&self, i: usize, shape: &[usize]) -> Tensor<T> {
        self.tensors[i]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}
