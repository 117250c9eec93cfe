use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::full(rows, cols, S::one()))
    }

    /// Uniform in `[-limit, limit]` with `limit = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        self.uniform(name, rows, cols, limit, rng)
    }

    pub fn uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, limit: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let t = Tensor::from_fn(rows, cols, |_, _| S::from_f64(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> ParamId {
        let t = Tensor::from_fn(rows, cols, |_, _| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            S::from_f64(z * std)
        });
        self.add(name, t)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect() }
    }

    /// Replaces every tensor with the same-named tensor from `other`.
    pub fn load_from(&mut self, other: &ParamStore<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!("parameter count mismatch: expected {}, found {}", self.len(), other.len())));
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other.find(name).ok_or_else(|| Error::MissingParam(name.clone()))?;
            let src = &other.values[j.0];
            if src.shape() != self.values[i].shape() {
                return Err(Error::Shape(format!("parameter {name} has the wrong shape")));
            }
            self.values[i] = src.clone();
        }
        Ok(())
    }

    pub fn map_in_place(&mut self, mut f: impl FnMut(ParamId, &mut Tensor<S>)) {
        for (i, t) in self.values.iter_mut().enumerate() {
            f(ParamId(i), t);
        }
    }
}
