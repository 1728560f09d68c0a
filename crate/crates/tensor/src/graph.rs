use std::cell::RefCell;
use std::collections::HashMap;

use crate::{Result, Scalar, Tensor, TensorError};

/// Maps the gradient of an op's output to gradients of its inputs, in input order.
pub type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Recording context for one forward/backward pass.
///
/// A tracking graph records every op applied to vars that descend from a
/// [`Graph::leaf`]; an inference graph records nothing, so intermediate
/// tensors are dropped as soon as the caller releases them.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
    track: bool,
}

/// A tensor value tagged with its position on the tape (if any).
#[derive(Clone, Debug)]
pub struct Var<T> {
    id: Option<usize>,
    value: Tensor<T>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn into_value(self) -> Tensor<T> {
        self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn id(&self) -> Option<usize> {
        self.id
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }
}

/// Gradients of leaf vars after [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_id: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf; `None` when the leaf did not influence the root.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.by_id.get(&id))
    }

    /// Gradient for a leaf, zero-filled when it did not influence the root.
    pub fn get_or_zeros(&self, var: &Var<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape().to_vec()))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records ops for backpropagation.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            track: true,
        }
    }

    /// A graph that never records; leaves are plain constants.
    pub fn inference() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            track: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input (parameter or probed input).
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if !self.track {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: Vec::new(),
            backward: None,
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { id: None, value }
    }

    /// Records a custom op with an explicit backward rule.
    ///
    /// `backward` receives the output gradient and must return one entry per
    /// input (`None` for inputs it does not differentiate). It is only
    /// constructed when some input requires a gradient.
    pub fn custom<F>(&self, inputs: &[&Var<T>], value: Tensor<T>, backward: F) -> Var<T>
    where
        F: FnOnce(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        if !self.track || inputs.iter().all(|v| v.id.is_none()) {
            return Var { id: None, value };
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: Some(Box::new(backward)),
        });
        Var {
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// True when recording a backward closure for these inputs is worthwhile.
    pub fn needs_grad(&self, inputs: &[&Var<T>]) -> bool {
        self.track && inputs.iter().any(|v| v.id.is_some())
    }

    /// Reverse sweep from a single-element root. Consumes the recorded
    /// closures; the graph cannot be backpropagated twice.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root.shape().to_vec()));
        }
        let mut grads = Gradients::default();
        let Some(root_id) = root.id else {
            return Ok(grads);
        };
        let mut nodes = self.nodes.borrow_mut();
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; root_id + 1];
        pending[root_id] = Some(Tensor::ones(root.shape().to_vec()));
        for id in (0..=root_id).rev() {
            let Some(grad) = pending[id].take() else {
                continue;
            };
            let node = &mut nodes[id];
            match node.backward.take() {
                None => {
                    grads.by_id.insert(id, grad);
                }
                Some(f) => {
                    let parents = std::mem::take(&mut node.parents);
                    let input_grads = f(&grad);
                    debug_assert_eq!(input_grads.len(), parents.len());
                    for (parent, g) in parents.into_iter().zip(input_grads) {
                        if let (Some(p), Some(g)) = (parent, g) {
                            match &mut pending[p] {
                                Some(acc) => acc.add_assign(&g),
                                slot @ None => *slot = Some(g),
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}
