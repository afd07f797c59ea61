//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends one node holding its output value,
//! its parent node ids and a backward closure mapping the output gradient to
//! parent gradients. [`Tape::backward`] replays the nodes in reverse.
//! Nodes whose parents are all constants record no closure.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod shape;

use std::cell::{Ref, RefCell};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

/// Inputs handed to a backward closure.
pub(crate) struct BackwardCtx<'a, T: Element> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether parent `i` needs a gradient at all.
    pub needs: Vec<bool>,
}

struct Node<T: Element> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Recording of the operations applied to a set of leaves.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf; it participates in differentiation iff
    /// `value.requires_grad()`.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let rg = value.requires_grad();
        self.push_node(value, Vec::new(), None, rg)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value.with_requires_grad(false))
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward: if requires_grad { backward } else { None },
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records an operation output computed from `parents`.
    pub(crate) fn push<F>(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: F,
    ) -> Var<'_, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        let nodes = self.nodes.borrow();
        for p in parents {
            assert!(std::ptr::eq(p.tape, self), "variable from a different tape");
        }
        let rg = parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parents.iter().map(|p| p.id).collect();
        self.push_node(
            value.with_requires_grad(rg),
            ids,
            Some(Box::new(backward)),
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every recorded node
    /// that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Grads<T>> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &g,
                output: &node.value,
                inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|&p| nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.len(),
                    nodes[p].value.numel(),
                    "gradient size for node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Grads { grads, shapes })
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }
}

/// Result of [`Tape::backward`].
pub struct Grads<T: Element> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Grads<T> {
    /// Gradient for `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        let g = self.grads.get(v.id)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Gradient for `v`; exact zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]))
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy-on-write handle to the recorded value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.value_ref(self.id).numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let loss = a.mul(a).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(a).data(), &[2.0, 4.0]);
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn constants_record_no_gradient() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(&[3]));
        let y = c.exp().sum();
        assert!(!y.requires_grad());
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(tape.backward(x).is_err());
    }
}
