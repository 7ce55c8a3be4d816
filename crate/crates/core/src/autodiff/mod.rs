//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every differentiable operation in execution order.
//! Values are computed eagerly; each recorded node keeps a closure that maps
//! the gradient of its output to gradients of its inputs. [`Graph::backward`]
//! walks the tape once in reverse, so nodes are visited exactly once and in
//! topological order.
//!
//! Nodes that do not depend on any gradient-requiring leaf store no backward
//! closure at all, which is how detached quantities (the closed-form
//! background light, fixed filter kernels) stay out of the gradient path.

mod check;
mod ops;

pub use check::{grad_check, grad_check_coords, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps the output gradient of a node to gradients for each of its inputs.
///
/// Arguments are the input values, the node's output value and the gradient
/// flowing into the output. Returning `None` for an input means it receives
/// no contribution.
pub type BackwardFn =
    Box<dyn Fn(&[&Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node {
    op: &'static str,
    value: Tensor,
    inputs: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Rejects non-finite data.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient. Rejects non-finite data.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("graph leaf"));
        }
        Ok(self.push_node("leaf", value, Vec::new(), requires_grad, None))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor,
        inputs: Vec<Var>,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            inputs,
            requires_grad,
            backward,
        });
        Var(id)
    }

    /// Records an operation whose output has already been computed.
    ///
    /// The backward closure is dropped when none of the inputs need a
    /// gradient.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        value: Tensor,
        backward: BackwardFn,
    ) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push_node(op, value, inputs.to_vec(), requires_grad, backward)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        if !loss_node.value.is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g_out) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let contributions = backward(&inputs, &node.value, &g_out);
            debug_assert_eq!(contributions.len(), node.inputs.len(), "op {}", node.op);
            for (input, contribution) in node.inputs.iter().zip(contributions) {
                let Some(contribution) = contribution else {
                    continue;
                };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if !(node.requires_grad && node.inputs.is_empty()) {
                    return None;
                }
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients of a scalar with respect to every trainable leaf.
///
/// A leaf that the loss does not reach gets an all-zero gradient.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
