use super::{ensure_finite, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Inputs handed to a backward rule.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad_out: &'a [T],
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each input needs a gradient; rules may skip the others.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one recorded operation. Returns one optional
/// gradient buffer per input, each shaped like that input.
pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    grad: Option<Vec<T>>,
}

/// Single-owner record of a forward computation.
///
/// Nodes are appended in execution order, so parents always precede their
/// children and a reverse sweep is a valid topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_node("leaf", value, Vec::new(), true, None)
    }

    /// Register an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_node("constant", value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for a leaf by [`Tape::backward`]. Leaves that
    /// require grad but are disconnected from the loss get zeros; constants
    /// get `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &node.grad {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Record an operation with a caller-supplied backward rule.
    ///
    /// The output is checked for non-finite values; the error names `op`.
    pub fn custom(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var> {
        ensure_finite(op, output.data())?;
        let parents: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        let backward = requires_grad.then_some(backward);
        Ok(self.push_node(op, output, parents, requires_grad, backward))
    }

    fn push_node(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        self.nodes.push(Node { op, value, parents, requires_grad, backward, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`, populating leaf gradients.
    ///
    /// May run once per tape; a second call is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].backward.is_none() {
                continue;
            }
            let Some(grad_out) = self.nodes[idx].grad.take() else {
                continue;
            };
            let input_grads = {
                let node = &self.nodes[idx];
                let ctx = BackwardCtx {
                    grad_out: &grad_out,
                    output: &node.value,
                    inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                    needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
                };
                (node.backward.as_ref().unwrap())(&ctx)
            };
            let op = self.nodes[idx].op;
            let parents = self.nodes[idx].parents.clone();
            for (parent, g) in parents.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[parent].requires_grad {
                    continue;
                }
                if g.len() != self.nodes[parent].value.numel() {
                    return Err(Error::Invariant(format!(
                        "backward rule of {op} returned {} grads for an input of {} scalars",
                        g.len(),
                        self.nodes[parent].value.numel()
                    )));
                }
                ensure_finite(&format!("backward of {op}"), &g)?;
                match &mut self.nodes[parent].grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}
