use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Tensor, TensorError};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named trainable tensors in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    /// Xavier-uniform weight `[fan_in, fan_out]`.
    pub fn xavier(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut impl Rng) -> Result<ParamId, TensorError> {
        let fan_out = *shape.last().unwrap_or(&1);
        let fan_in: usize = shape.iter().rev().skip(1).product::<usize>().max(1);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.random_range(-a..a)));
        self.add(name, t)
    }

    /// Normal(0, std) initialization, used for embedding tables.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<ParamId, TensorError> {
        let dist = Normal::new(0.0, std).map_err(|e| super::invalid("normal", e.to_string()))?;
        let t = Tensor::from_fn(shape, |_| T::of(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId, TensorError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId, TensorError> {
        self.add(name, Tensor::full(shape, T::one()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId, TensorError> {
        self.index.get(name).copied().ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// In-place `self = decay * self + (1 - decay) * other`.
    pub fn blend_from(&mut self, other: &Self, decay: f64) {
        let (d, e) = (T::of(decay), T::of(1.0 - decay));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x = d * *x + e * *y;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Tensor::cast).collect(), index: self.index.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_resolvable() {
        let mut s = ParamStore::<f32>::new();
        let a = s.zeros("a", &[2]).unwrap();
        assert!(matches!(s.zeros("a", &[3]), Err(TensorError::DuplicateParam(_))));
        assert_eq!(s.id("a").unwrap(), a);
        assert!(matches!(s.id("b"), Err(TensorError::UnknownParam(_))));
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        let w = s.xavier("w", &[10, 30], &mut rng).unwrap();
        let bound = (6.0f64 / 40.0).sqrt();
        assert!(s.get(w).data().iter().all(|v| v.abs() <= bound));
    }
}
