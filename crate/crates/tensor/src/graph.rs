//! Recording tape for reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass. Every op that has at least one
//! tracked input appends a node holding the backward rule; [`Graph::backward`]
//! replays the nodes in reverse recording order exactly once. A graph is
//! confined to the thread that created it.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Backward rule: receives the output gradient and a per-input flag saying
/// whether that input needs a gradient. Returns one optional gradient per input.
pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// A value produced inside a [`Graph`]. Cloning is cheap.
#[derive(Clone)]
pub struct Var<T: Scalar> {
    value: Rc<Tensor<T>>,
    node: Option<usize>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.value.shape())
            .field("node", &self.node)
            .finish()
    }
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records backward rules.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: true,
            consumed: Cell::new(false),
        }
    }

    /// A graph that never records; intermediate values are freed as soon as
    /// the caller drops them.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            recording: false,
            consumed: Cell::new(false),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<T> {
        let node = (self.recording && requires_grad).then(|| {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                parents: Vec::new(),
                backward: None,
            });
            nodes.len() - 1
        });
        Var {
            value: Rc::new(value),
            node,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.leaf(value, false)
    }

    /// True when an op over `inputs` will be recorded.
    pub(crate) fn tracks(&self, inputs: &[&Var<T>]) -> bool {
        self.recording && inputs.iter().any(|v| v.node.is_some())
    }

    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<T>],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<T> {
        if !self.tracks(inputs) {
            return Var {
                value: Rc::new(value),
                node: None,
            };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: inputs.iter().map(|v| v.node).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            value: Rc::new(value),
            node: Some(nodes.len() - 1),
        }
    }

    /// Propagate gradients from a one-element `loss` to every tracked leaf.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::BackwardTwice);
        }
        if loss.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        let root = loss.node.ok_or(TensorError::UntrackedLoss)?;
        self.consumed.set(true);

        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(loss.shape()));

        for i in (0..=root).rev() {
            let node = &mut nodes[i];
            let Some(backward) = node.backward.take() else {
                continue; // leaf: keep its gradient
            };
            let Some(g) = grads[i].take() else {
                continue; // no path from this node to the loss
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.parents.len());
            for (parent, ig) in node.parents.iter().zip(input_grads) {
                if let (Some(p), Some(ig)) = (parent, ig) {
                    match &mut grads[*p] {
                        Some(acc) => acc.add_assign_unchecked(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
        }
        // drop rules that were never reached so saved tensors are released
        for node in nodes.iter_mut() {
            node.backward = None;
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf, `None` if it has no path to the loss.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.node.and_then(|i| self.grads.get(i)).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    pub fn take(&mut self, var: &Var<T>) -> Option<Tensor<T>> {
        var.node.and_then(|i| self.grads.get_mut(i)).and_then(Option::take)
    }
}
