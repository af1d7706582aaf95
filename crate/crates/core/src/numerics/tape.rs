//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every primitive whose inputs (transitively) depend on a
//! trainable leaf. Values that depend only on constants are never recorded, so
//! a forward pass through a frozen network costs no tape memory at all.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamSet, ParamSource};
use super::{Element, NumericError, Tensor};

/// Maps the upstream gradient to one gradient per input. `needs[i]` is false
/// for constant inputs, whose gradient may be skipped (returned as `None`).
pub(crate) type Pullback<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    inputs: Vec<Option<usize>>,
    pullback: Option<Pullback<T>>,
}

pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    bound: RefCell<HashMap<String, (usize, Arc<Tensor<T>>)>>,
    consumed: Cell<bool>,
    inference: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A value flowing through a forward pass. Constants carry no node id.
#[derive(Clone)]
pub struct Var<'t, T: Element> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: Option<usize>,
    pub(crate) value: Arc<Tensor<T>>,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.value.shape())
            .finish()
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            bound: RefCell::new(HashMap::new()),
            consumed: Cell::new(false),
            inference: false,
        }
    }

    /// A tape on which every parameter binds as a constant, so nothing is recorded.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            pullback: None,
        });
        Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value: Arc::new(value),
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.constant_shared(Arc::new(value))
    }

    pub(crate) fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<'_, T> {
        Var {
            tape: self,
            id: None,
            value,
        }
    }

    /// Binds a named parameter. Trainable parameters become leaves (one per
    /// name per tape); frozen ones enter as constants and never receive gradient.
    pub fn param<'t, S: ParamSource<T> + ?Sized>(
        &'t self,
        source: &S,
        name: &str,
    ) -> Result<Var<'t, T>, NumericError> {
        let p = source
            .lookup(name)
            .ok_or_else(|| NumericError::MissingParam(name.to_string()))?;
        if !p.trainable || self.inference {
            return Ok(self.constant_shared(p.value_arc()));
        }
        if let Some((id, value)) = self.bound.borrow().get(name) {
            return Ok(Var {
                tape: self,
                id: Some(*id),
                value: Arc::clone(value),
            });
        }
        let value = p.value_arc();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: Vec::new(),
            pullback: None,
        });
        let id = nodes.len() - 1;
        self.bound
            .borrow_mut()
            .insert(name.to_string(), (id, Arc::clone(&value)));
        Ok(Var {
            tape: self,
            id: Some(id),
            value,
        })
    }

    pub(crate) fn record<'t>(
        &'t self,
        op: &'static str,
        value: Tensor<T>,
        inputs: &[&Var<'t, T>],
        pullback: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Result<Var<'t, T>, NumericError> {
        if !value.all_finite() {
            return Err(NumericError::NonFinite { op });
        }
        let value = Arc::new(value);
        if inputs.iter().all(|v| v.id.is_none()) {
            return Ok(self.constant_shared(value));
        }
        if self.consumed.get() {
            return Err(NumericError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            inputs: inputs.iter().map(|v| v.id).collect(),
            pullback: Some(Box::new(pullback)),
        });
        Ok(Var {
            tape: self,
            id: Some(nodes.len() - 1),
            value,
        })
    }

    /// Runs the reverse sweep from a scalar `loss`. A tape can be swept once.
    pub fn gradients(&self, loss: &Var<'_, T>) -> Result<Gradients<T>, NumericError> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(NumericError::ForeignVar);
        }
        if !loss.value.is_scalar() {
            return Err(NumericError::NotScalar(loss.value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(NumericError::TapeConsumed);
        }
        let names: HashMap<usize, String> = self
            .bound
            .borrow()
            .iter()
            .map(|(name, (id, _))| (*id, name.clone()))
            .collect();
        let Some(root) = loss.id else {
            return Ok(Gradients {
                leaves: HashMap::new(),
                names,
            });
        };

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root + 1);
        grads.resize_with(root + 1, || None);
        grads[root] = Some(Tensor::full(loss.value.shape(), T::one()));
        let mut leaves = HashMap::new();

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.pullback {
                None => {
                    leaves.insert(id, g);
                }
                Some(pullback) => {
                    let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
                    let outs = pullback(&g, &needs);
                    debug_assert_eq!(outs.len(), node.inputs.len());
                    for (input, out) in node.inputs.iter().zip(outs) {
                        if let (Some(i), Some(out)) = (input, out) {
                            match &mut grads[*i] {
                                Some(acc) => acc.add_assign(&out),
                                slot => *slot = Some(out),
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves, names })
    }

    /// Reverse sweep that accumulates into the matching trainable parameters.
    pub fn backward(&self, loss: &Var<'_, T>, params: &mut ParamSet<T>) -> Result<(), NumericError> {
        self.gradients(loss)?.accumulate_into(params);
        Ok(())
    }
}

pub struct Gradients<T: Element> {
    leaves: HashMap<usize, Tensor<T>>,
    names: HashMap<usize, String>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to a leaf; `None` if the loss does not depend on it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.leaves.get(&id))
    }

    pub fn by_name(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.leaves
            .iter()
            .filter_map(|(id, g)| self.names.get(id).map(|n| (n.as_str(), g)))
    }

    pub fn accumulate_into(&self, params: &mut ParamSet<T>) {
        for (name, g) in self.by_name() {
            if let Some(p) = params.get_mut(name) {
                if p.trainable {
                    p.grad.add_assign(g);
                }
            }
        }
    }
}
