//! Recorded operation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and, when any
//! input needs a gradient, a [`BackwardOp`] that maps the output gradient to
//! input gradients. [`Graph::backward`] walks the nodes in reverse creation
//! order, which is a topological order of the tape.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::{Error, ParamStore, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Gradient rule of one recorded operation.
pub trait BackwardOp<T: Scalar> {
    /// Returns one entry per input; entries whose `needs` flag is false may
    /// be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    inputs: Vec<NodeId>,
    op: Option<Box<dyn BackwardOp<T> + 'p>>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
    params: Option<&'p ParamStore<T>>,
    param_nodes: BTreeMap<&'p str, NodeId>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: None,
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            inputs: Vec::new(),
            op: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// The leaf for a named parameter; repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let store = self
            .params
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let (key, value) = store
            .entry(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            inputs: Vec::new(),
            op: None,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(key, id);
        Ok(id)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Records an operation. The backward rule is dropped when no input
    /// needs a gradient.
    pub fn record(
        &mut self,
        value: Tensor<T>,
        inputs: &[NodeId],
        op: impl BackwardOp<T> + 'p,
    ) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            inputs: inputs.to_vec(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn BackwardOp<T> + 'p>),
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Back-propagates from a single-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must have one element, got shape {}", loss_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            let Some(grad) = grads[i].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|id| self.value(*id)).collect();
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for ((id, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert!(
                    g.shape().same_dims(&self.value(*id).shape()),
                    "gradient shape {} != value shape {}",
                    g.shape(),
                    self.value(*id).shape()
                );
                match &mut grads[id.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        let mut params = BTreeMap::new();
        if let Some(store) = self.params {
            for (name, value) in store.iter() {
                let g = self
                    .param_nodes
                    .get(name)
                    .and_then(|id| grads[id.0].clone())
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                params.insert(name.to_string(), g);
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }
}

/// Result of a backward pass: gradients of leaf nodes and of every
/// parameter in the graph's store (zeros for parameters the loss does not
/// reach).
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
