//! Reverse-mode automatic differentiation over a recorded operation list.
//!
//! Nodes are appended in execution order, so index order is a topological
//! order and `backward` can walk the node list in reverse. Intermediate
//! gradients are dropped as soon as they have been propagated; only leaves
//! that require a gradient keep theirs.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs available to a backward rule.
pub struct BackwardCtx<'a, T> {
    /// Gradient of the loss with respect to this node's output.
    pub grad: &'a Tensor<T>,
    /// This node's forward output.
    pub out: &'a Tensor<T>,
    /// Forward values of the parents, in the order they were given.
    pub inputs: Vec<&'a Tensor<T>>,
    /// Whether each parent needs a gradient. Rules may skip work for `false` entries.
    pub needs: Vec<bool>,
}

impl<T> BackwardCtx<'_, T> {
    pub fn needs(&self, i: usize) -> bool {
        self.needs[i]
    }
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<Var>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<T>>,
    grad: Option<Tensor<T>>,
}

/// Operation record for one forward pass. A graph is single-use: build it,
/// call [`Graph::backward`] once, read leaf gradients.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor. Leaves with `requires_grad == false` are frozen:
    /// they never receive a gradient.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            is_leaf: true,
            backward: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Gradient of a leaf after [`Graph::backward`]; `None` for frozen leaves
    /// or leaves not reached from the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Records an operation with a caller-supplied backward rule. The rule must
    /// return one entry per parent, shaped like that parent.
    pub fn custom(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.to_vec(),
            requires_grad,
            is_leaf: false,
            backward: if requires_grad { Some(Box::new(backward)) } else { None },
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Clears leaf gradients so that a further backward pass is allowed.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward(
                "graph already differentiated; call reset() first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.is_leaf {
                if node.requires_grad {
                    self.nodes[i].grad = Some(g);
                }
                continue;
            }
            let Some(rule) = node.backward.as_ref() else { continue };
            let ctx = BackwardCtx {
                grad: &g,
                out: &node.value,
                inputs: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = rule(&ctx);
            if parent_grads.len() != node.parents.len() {
                return Err(Error::Backward(format!(
                    "node {i}: rule returned {} gradients for {} parents",
                    parent_grads.len(),
                    node.parents.len()
                )));
            }
            let parents = node.parents.clone();
            for (p, pg) in parents.into_iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                if pg.shape() != self.nodes[p.0].value.shape() {
                    return Err(Error::Backward(format!(
                        "node {i}: gradient shape {:?} for parent of shape {:?}",
                        pg.shape(),
                        self.nodes[p.0].value.shape()
                    )));
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::Backward(_))));
        g.reset();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2]), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([3]), true);
        let w = g.leaf(Tensor::full([3], 2.0), false);
        let y = g.mul(x, w).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // sum(x*x) at [1,2] -> grad [2,4]
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64([2], &[1.0, 2.0]).unwrap(), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }
}
