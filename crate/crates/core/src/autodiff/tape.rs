use std::cell::{Cell, Ref, RefCell};

use super::ops::Op;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
}

/// Records a forward computation so [`Tape::backward`] can replay it in reverse.
///
/// Nodes are appended in evaluation order, which is always a valid topological
/// order. A tape is single-threaded; run independent tapes for data parallelism.
pub struct Tape<T> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
    frozen: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            frozen: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.get()
    }

    /// Drops every recorded node so the tape can host a new forward pass.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.frozen.set(false);
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0])
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a trainable leaf regardless of the tensor's own flag.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.node(v).shape.clone()
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node holds a consistent tensor")
    }

    pub fn values(&self, v: Var) -> Vec<T> {
        self.node(v).value.clone()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients accumulate additively across fan-out. The tape is frozen
    /// afterwards; call [`reset`](Self::reset) before recording again.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.frozen.get() {
            return Err(Error::TapeFrozen);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            super::ops::backprop(node, &g, &nodes, &mut grads);
            grads[id] = Some(g);
        }
        self.frozen.set(true);
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep: one optional gradient per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `n` when `v` was unreachable from the loss.
    pub fn get_or_zeros(&self, v: Var, n: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); n], |g| g.to_vec())
    }

    /// Adds the gradient of `v` into `tensor`'s buffer (zeros if unreachable).
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) {
        let g = self.get_or_zeros(v, tensor.numel());
        tensor.accumulate_grad(&g);
    }
}

pub(crate) fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    target: Var,
    delta: Vec<T>,
) {
    if !nodes[target.0].needs_grad {
        return;
    }
    match grads[target.0].as_mut() {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => grads[target.0] = Some(delta),
    }
}
