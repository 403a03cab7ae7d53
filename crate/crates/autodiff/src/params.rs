use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter within its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in insertion order.
///
/// Names are unique and stable; they key the checkpoint manifest.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites `name`'s value; the shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

/// One gradient tensor per parameter of a store, zero where no gradient flowed.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        ParamGrads {
            grads: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in &mut self.grads {
            g.scale_assign(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(T::lit(max_norm / norm));
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// Glorot/Xavier uniform initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<T: Scalar>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, vec![fan_in, fan_out], bound)
}

/// Uniform in `[-bound, bound]`.
pub fn uniform<T: Scalar>(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}
