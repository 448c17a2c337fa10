//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s together with
//! a closure that maps the output gradient to input gradients. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse.

use std::cell::RefCell;

use super::{Real, Tensor};
use crate::error::{ensure, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule: receives the output gradient and, per parent, whether a
/// gradient is wanted. Returns one optional gradient per parent.
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; backward closures are dropped.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: self.grad_enabled,
        })
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
        })
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|&p| self.requires_grad(p));
        self.push(Node {
            value,
            parents: parents.to_vec(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            requires_grad,
        })
    }

    /// Gradients of the scalar `root` with respect to every recorded value.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        ensure!(
            nodes[root.0].value.len() == 1,
            "backward needs a scalar root, got shape {:?}",
            nodes[root.0].value.shape()
        );
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|p| nodes[p.0].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((parent, g), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(g), true) = (g, *need) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), nodes[parent.0].value.shape());
                accumulate(&mut grads[parent.0], g);
            }
            // Keep leaf gradients; interior ones are no longer needed.
            if node.parents.is_empty() {
                grads[i] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot.take() {
        None => *slot = Some(g),
        Some(prev) => {
            let shape = prev.shape().to_vec();
            let mut data = prev.into_vec();
            for (a, &b) in data.iter_mut().zip(g.data()) {
                *a += b;
            }
            *slot = Some(Tensor::new(&shape, data).expect("same shape"));
        }
    }
}

/// Result of [`Tape::backward`]; gradients are kept for leaves.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when no path reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}
