use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::ops::Op;
use super::{Real, Tensor};

pub(crate) struct Node<T: Real> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Records tensor operations in execution order so gradients can be
/// replayed in reverse.
///
/// Nodes are append-only, so the recorded graph is acyclic. Leaf
/// gradients accumulate across `backward` calls until `zero_grad`.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(Vec::new()),
        }
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Rc::new(value), Op::Leaf, requires_grad)
    }

    pub(crate) fn push(&self, value: Rc<Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.leaf_grads.borrow().get(var.id).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.leaf_grads
            .borrow_mut()
            .iter_mut()
            .for_each(|g| *g = None);
    }

    /// Reverse-mode sweep from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&self, root: Var<'_, T>) {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.id].value.numel(),
            1,
            "backward requires a scalar root, got shape {:?}",
            nodes[root.id].value.shape()
        );
        if !nodes[root.id].requires_grad {
            return;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.id + 1];
        grads[root.id] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();
        if leaf_grads.len() < nodes.len() {
            leaf_grads.resize(nodes.len(), None);
        }
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Op::Leaf = node.op {
                let slot = &mut leaf_grads[id];
                match slot {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => *slot = Some(Tensor::new(node.value.shape(), g)),
                }
                continue;
            }
            node.op.backward(&nodes, &node.value, &g, &mut grads);
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    pub(crate) id: usize,
    pub(crate) graph: &'g Graph<T>,
}

impl<T: Real> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// Same value, cut from the gradient path.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.push(self.value(), Op::Leaf, false)
    }

    pub fn item(&self) -> T {
        self.value().item()
    }
}
