use std::collections::HashMap;

use crate::error::{shape_err, NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule of a recorded operation.
///
/// `backward` receives the forward inputs and output together with the
/// gradient of the loss with respect to the output, and returns one gradient
/// per input (same length as that input), or `None` for inputs whose entry in
/// `needs` is false.
pub trait Function<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<usize>,
    func: Option<Box<dyn Function<T>>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape for one forward pass.
///
/// Parameters are read from the borrowed store; gradients come back as a
/// detached [`Gradients`] value so the store can be updated once the graph is
/// dropped.
pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            no_grad: false,
        }
    }

    /// A graph that records no backward rules (inference).
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            no_grad: true,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            func: None,
            requires_grad: requires_grad && !self.no_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false, None)
    }

    /// A non-parameter leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true, None)
    }

    /// The parameter as a leaf node; repeated requests share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push_leaf(value, true, Some(id));
        self.param_nodes.insert(id, v);
        v
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

    /// Record an operation whose output was computed by the caller.
    pub fn apply<F: Function<T> + 'static>(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        func: F,
    ) -> Result<Var> {
        if !output.is_finite() {
            return Err(NnError::NonFiniteValue { op: func.name() });
        }
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let func: Option<Box<dyn Function<T>>> = if requires_grad {
            Some(Box::new(func))
        } else {
            None
        };
        self.nodes.push(Node {
            value: output,
            inputs: inputs.iter().map(|v| v.0).collect(),
            func,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", root.value.shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            params: HashMap::new(),
            leaves: HashMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.func {
                Some(func) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
                    let input_grads = func.backward(&inputs, &node.value, &grad, &needs);
                    for ((&j, g), &need) in node.inputs.iter().zip(input_grads).zip(&needs) {
                        let Some(g) = g.filter(|_| need) else { continue };
                        debug_assert_eq!(g.len(), self.nodes[j].value.len(), "{}", func.name());
                        match &mut grads[j] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            slot => *slot = Some(g),
                        }
                    }
                }
                None => match node.param {
                    Some(id) => {
                        out.params.insert(id, grad);
                    }
                    None => {
                        out.leaves.insert(i, grad);
                    }
                },
            }
        }
        Ok(out)
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: HashMap<ParamId, Vec<T>>,
    leaves: HashMap<usize, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of an [`Graph::input`] leaf, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn reached_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Add the parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (&id, g) in &self.params {
            store
                .grad_mut(id)
                .data_mut()
                .iter_mut()
                .zip(g)
                .for_each(|(a, &b)| *a += b);
        }
    }
}
