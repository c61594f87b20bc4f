use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result, Scalar, Shape, Tensor};

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn entry(&self, name: &str) -> Option<(&str, &Tensor<T>)> {
        self.tensors.get_key_value(name).map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Creates parameters in construction order from one seeded stream, so a
/// model's initial values depend only on its config and seed.
pub struct ParamBuilder {
    store: ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f32) -> Result<String> {
        let shape = Shape::new(dims);
        self.store.insert(name, Tensor::full(shape, value))?;
        Ok(name.to_string())
    }

    pub fn values(&mut self, name: &str, dims: &[usize], data: Vec<f32>) -> Result<String> {
        self.store.insert(name, Tensor::new(Shape::new(dims), data)?)?;
        Ok(name.to_string())
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<String> {
        self.constant(name, dims, 0.0)
    }

    /// Uniform on `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f32) -> Result<String> {
        let shape = Shape::new(dims);
        let data = (0..shape.numel())
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.store.insert(name, Tensor::new(shape, data)?)?;
        Ok(name.to_string())
    }

    /// Variance-preserving uniform init, `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`.
    pub fn fan_in(&mut self, name: &str, dims: &[usize], fan_in: usize) -> Result<String> {
        let bound = (3.0 / fan_in.max(1) as f32).sqrt();
        self.uniform(name, dims, bound)
    }

    pub fn finish(self) -> ParamStore<f32> {
        self.store
    }
}
