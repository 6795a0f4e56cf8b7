//! A small reverse-mode differentiation tape.
//!
//! Operations on [`Var`]s always compute their value eagerly. When at least one
//! operand is tracked by a [`Tape`], the operation also records a backward
//! closure; untracked computations (inference) leave no trace and free their
//! intermediates as soon as the `Var`s drop.

mod attention;
mod conv;
mod ops;

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};

pub use attention::{attention_probs, window_attention, AttentionLayout};
pub use conv::{conv3d, conv3d_forward, conv_transpose3d_k2, Conv3dSpec};
pub use ops::{
    add, concat_channels, gather, gelu, instance_norm, layer_norm, leaky_relu, linear, mse_loss,
    IndexMap, ZERO_INDEX,
};

/// Backward closure: receives the output gradient and which inputs need a
/// gradient, returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    /// Tape ids of the operation inputs; `None` for untracked operands.
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
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
        }
    }

    /// Registers a differentiable leaf (a trainable parameter).
    pub fn leaf(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            backward: None,
        });
        Var {
            value,
            node: Some((self, nodes.len() - 1)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagates from a scalar output and returns gradients for every
    /// tape node (leaves included), indexed by node id.
    pub fn backward(&self, output: &Var<'_, T>) -> Gradients<T> {
        let (_, out_id) = output.node.expect("backward called on an untracked value");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[out_id] = Some(Tensor::full(output.value.shape(), T::one()));
        for id in (0..=out_id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            for (slot, grad) in node.inputs.iter().zip(input_grads) {
                if let (Some(pid), Some(grad)) = (slot, grad) {
                    match &mut grads[*pid] {
                        Some(acc) => acc.add_assign(&grad),
                        empty => *empty = Some(grad),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the output with respect to `var`; zeros when the output
    /// does not depend on it.
    pub fn get(&self, var: &Var<'_, T>) -> Tensor<T> {
        var.node
            .and_then(|(_, id)| self.grads[id].clone())
            .unwrap_or_else(|| Tensor::zeros(var.value.shape()))
    }
}

#[derive(Clone)]
pub struct Var<'t, T> {
    value: Arc<Tensor<T>>,
    node: Option<(&'t Tape<T>, usize)>,
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn constant(value: Tensor<T>) -> Self {
        Var {
            value: Arc::new(value),
            node: None,
        }
    }

    pub fn shared(value: Arc<Tensor<T>>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub(crate) fn arc(&self) -> Arc<Tensor<T>> {
        self.value.clone()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_value(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|shared| (*shared).clone())
    }
}

/// Wraps a freshly computed value, recording `backward` when any input is tracked.
pub(crate) fn record<'t, T: Scalar>(
    inputs: &[&Var<'t, T>],
    value: Tensor<T>,
    backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
) -> Var<'t, T> {
    let tape = inputs.iter().find_map(|v| v.node.map(|(t, _)| t));
    let Some(tape) = tape else {
        return Var::constant(value);
    };
    let mut nodes = tape.nodes.borrow_mut();
    nodes.push(Node {
        inputs: inputs.iter().map(|v| v.node.map(|(_, id)| id)).collect(),
        backward: Some(Box::new(backward)),
    });
    Var {
        value: Arc::new(value),
        node: Some((tape, nodes.len() - 1)),
    }
}
