use std::collections::HashMap;

use rand::Rng;

use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

/// Stable handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Every trainable tensor of a model, addressable by hierarchical name
/// (`"decoder.layers.0.ffn.w1.weight"`). Insertion order is preserved and
/// is the order used by serialization and the optimizer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    /// Adds a parameter drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Overwrites every gradient; parameters absent from `grads` get zero.
    pub fn set_grads(&mut self, grads: &Gradients<T>) {
        self.zero_grad();
        self.accumulate_grads(grads);
    }

    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.params() {
            let dst = self.params[id.0].grad.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d = *d + *s;
            }
        }
    }

    /// Scales every gradient in place.
    pub fn scale_grads(&mut self, factor: T) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = *g * factor);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| {
                let g = g.as_f64();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Converts every value to another element type (gradients reset to zero).
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast()).expect("unique names");
        }
        out
    }
}
