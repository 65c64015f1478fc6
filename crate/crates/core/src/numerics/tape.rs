use std::cell::RefCell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Gradient function: given the upstream gradient and a per-parent "needed"
/// mask, produce gradients for each parent (aligned with the parent list).
pub(crate) type BackFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

pub(crate) struct Node<T: Scalar> {
    pub value: Tensor<T>,
    pub requires_grad: bool,
    pub parents: Vec<usize>,
    pub backward: Option<BackFn<T>>,
}

/// Records a single forward computation for reverse-mode differentiation.
///
/// Node indices grow monotonically, so reverse creation order is a reverse
/// topological order: [`Tape::backward`] touches each node exactly once.
/// A tape is single-threaded by design.
pub struct Tape<T: Scalar> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert an input node.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Val<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None });
        Val { tape: self, id }
    }

    /// Insert a constant (never differentiated).
    pub fn constant(&self, value: Tensor<T>) -> Val<'_, T> {
        self.leaf(value, false)
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[usize],
        backward: impl FnOnce() -> BackFn<T>,
    ) -> Val<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        let id = nodes.len();
        if requires_grad {
            nodes.push(Node {
                value,
                requires_grad,
                parents: parents.to_vec(),
                backward: Some(backward()),
            });
        } else {
            nodes.push(Node { value, requires_grad, parents: Vec::new(), backward: None });
        }
        Val { tape: self, id }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    ///
    /// Deterministic: gradients are accumulated in reverse creation order, so
    /// two invocations on the same tape produce bit-identical results.
    pub fn backward(&self, loss: Val<'_, T>) -> Result<GradMap<T>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::usage("backward on an empty tape"));
        }
        let loss_node = &nodes[loss.id];
        if !loss_node.value.is_scalar() {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(back) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].clone() else { continue };
            let needs: Vec<bool> =
                node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = back(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (slot, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[*slot].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[*slot].value.shape());
                grads[*slot] = Some(match grads[*slot].take() {
                    None => pg,
                    Some(acc) => acc
                        .zip_map(&pg, |a, b| a + b)
                        .expect("gradient shapes agree"),
                });
            }
        }
        Ok(GradMap { grads })
    }
}

/// Handle to a tape node. Copyable; all arithmetic goes through methods that
/// return `Result` so shape errors surface at the offending call.
#[derive(Clone, Copy)]
pub struct Val<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> std::fmt::Debug for Val<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Val").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}


impl<'t, T: Scalar> Val<'t, T> {
    /// Cheap clone of the node's value (shared buffer).
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Same value, detached from the graph.
    pub fn detach(&self) -> Val<'t, T> {
        self.tape.constant(self.value())
    }

    /// Scalar value of a one-element node.
    pub fn item(&self) -> Result<T> {
        self.value().item()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct GradMap<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, v: Val<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub(crate) fn by_id(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}
