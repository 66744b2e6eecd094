use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Backward rule of a recorded operation.
pub trait GradFn<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the gradient of the
    /// output. Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    inputs: Vec<usize>,
    grad_fn: Option<Box<dyn GradFn<T>>>,
    name: &'static str,
    requires_grad: bool,
}

/// Ordered record of executed operations. Confined to one thread.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<usize, usize>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Scalar> Copy for Var<'_, T> {}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
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
            params: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded operations in execution order.
    pub fn trace(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.name).collect()
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            value,
            inputs: Vec::new(),
            grad_fn: None,
            name: "leaf",
            requires_grad,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter. Repeated registration of the same
    /// `key` returns the same leaf so that gradients accumulate.
    pub fn param(&self, key: usize, value: &Arc<Tensor<T>>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(&key) {
            return Var { tape: self, id };
        }
        let v = self.leaf_shared(Arc::clone(value), true);
        self.params.borrow_mut().insert(key, v.id);
        v
    }

    /// Records an operation whose forward value has already been computed.
    pub fn record(
        &self,
        name: &'static str,
        inputs: &[Var<'_, T>],
        value: Tensor<T>,
        grad_fn: impl GradFn<T> + 'static,
    ) -> Result<Var<'_, T>> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        let grad_fn: Option<Box<dyn GradFn<T>>> = if requires_grad {
            Some(Box::new(grad_fn))
        } else {
            None
        };
        Ok(self.push(Node {
            value: Arc::new(value),
            inputs: inputs.iter().map(|v| v.id).collect(),
            grad_fn,
            name,
            requires_grad,
        }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(Error::Backward(
                "backward already ran on this tape; call reset first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        let mut visited = 0;
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(f) = &node.grad_fn {
                visited += 1;
                let inputs: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|&j| &*nodes[j].value).collect();
                let needs: Vec<bool> = node
                    .inputs
                    .iter()
                    .map(|&j| nodes[j].requires_grad)
                    .collect();
                let input_grads = f.backward(&inputs, &node.value, &g, &needs)?;
                for (k, ig) in input_grads.into_iter().enumerate() {
                    let (true, Some(ig)) = (needs[k], ig) else { continue };
                    let j = node.inputs[k];
                    if ig.shape() != nodes[j].value.shape() {
                        return Err(Error::Backward(format!(
                            "{} produced gradient {:?} for input {:?}",
                            f.name(),
                            ig.shape(),
                            nodes[j].value.shape()
                        )));
                    }
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&ig),
                        slot => *slot = Some(ig),
                    }
                }
            }
            grads[i] = Some(g);
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && node.grad_fn.is_none() && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        self.consumed.set(true);
        let mut params: Vec<(usize, usize)> =
            self.params.borrow().iter().map(|(&k, &id)| (k, id)).collect();
        params.sort_unstable();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    /// Allows another backward pass over the same recording.
    pub fn reset(&self) {
        self.consumed.set(false);
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, usize)>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// `(param key, gradient)` for every registered parameter.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(k, id)| self.grads[id].as_ref().map(|g| (k, g)))
    }

    /// Number of operations whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.visited
    }
}
