use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Element, NumericError, Tensor};

/// A named tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Element> {
    pub name: String,
    value: Arc<Tensor<T>>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value: Arc::new(value),
            grad,
            trainable,
        }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Copy-on-write access; tapes holding the old value keep it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub(crate) fn value_arc(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Anything that resolves parameter paths to parameters.
pub trait ParamSource<T: Element> {
    fn lookup(&self, name: &str) -> Option<&Parameter<T>>;
}

/// Parameters keyed by dotted path, iterated in lexicographic order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Element> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) {
        let name = name.into();
        self.params
            .insert(name.clone(), Parameter::new(name, value, trainable));
    }

    pub fn insert_param(&mut self, p: Parameter<T>) {
        self.params.insert(p.name.clone(), p);
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>, NumericError> {
        self.get(name)
            .map(Parameter::value)
            .ok_or_else(|| NumericError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value().numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value().numel())
            .sum()
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Marks exactly the parameters matched by `pred` trainable.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in self.params.values_mut() {
            p.trainable = pred(&p.name);
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Parameter::zero_grad);
    }

    pub fn extend(&mut self, other: ParamSet<T>) {
        self.params.extend(other.params);
    }

    pub fn retain(&mut self, pred: impl Fn(&str) -> bool) {
        self.params.retain(|k, _| pred(k));
    }

    /// True when both sets hold the same names with bitwise-equal values.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.value().shape() == b.value().shape()
                    && a.value()
                        .data()
                        .iter()
                        .zip(b.value().data())
                        .all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in self.iter() {
            out.insert(p.name.clone(), p.value().cast(), p.trainable);
        }
        out
    }
}

impl<T: Element> ParamSource<T> for ParamSet<T> {
    fn lookup(&self, name: &str) -> Option<&Parameter<T>> {
        self.get(name)
    }
}

/// Layered lookup: the first set containing a name wins. Used to overlay a
/// client's trainable parameters on top of the shared frozen backbone.
pub struct ParamStack<'a, T: Element> {
    layers: Vec<&'a ParamSet<T>>,
}

impl<'a, T: Element> ParamStack<'a, T> {
    pub fn new(layers: Vec<&'a ParamSet<T>>) -> Self {
        Self { layers }
    }
}

impl<T: Element> ParamSource<T> for ParamStack<'_, T> {
    fn lookup(&self, name: &str) -> Option<&Parameter<T>> {
        self.layers.iter().find_map(|s| s.get(name))
    }
}
