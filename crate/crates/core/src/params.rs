//! Named parameter storage, initialisation and gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter name `{0}` registered twice")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Excluded from weight decay when false (biases, norms, embeddings).
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn register<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        decay: bool,
        rng: &mut R,
    ) -> Result<ParamId, ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let data = match init {
            Init::Zeros => vec![T::zero(); rows * cols],
            Init::Ones => vec![T::one(); rows * cols],
            Init::TruncNormal(std) => {
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..rows * cols)
                    .map(|_| loop {
                        let v: f64 = normal.sample(rng);
                        if v.abs() <= 2.0 * std {
                            break T::of(v);
                        }
                    })
                    .collect()
            }
        };
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Tensor::from_vec(rows, cols, data),
            decay,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Copies every parameter into another scalar type (ids are preserved).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites a parameter's values by name.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.to_string()))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(ParamError::Shape {
                name: name.to_string(),
                expected: p.value.shape(),
                found: value.shape(),
            });
        }
        p.value = value;
        Ok(())
    }

    /// Flat coordinate addressing used by the gradient checker.
    pub fn scalar(&self, id: ParamId, i: usize) -> T {
        self.params[id.0].value.data[i]
    }

    pub fn set_scalar(&mut self, id: ParamId, i: usize, v: T) {
        self.params[id.0].value.data[i] = v;
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub grads: Vec<Tensor<T>>,
    /// Whether anything was accumulated into the slot.
    pub touched: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Tensor::zeros(p.value.rows, p.value.cols))
                .collect(),
            touched: vec![false; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        self.grads[id.0].add_assign(g);
        self.touched[id.0] = true;
    }

    pub fn add(&mut self, other: &Gradients<T>) {
        for (i, g) in other.grads.iter().enumerate() {
            if other.touched[i] {
                self.grads[i].add_assign(g);
                self.touched[i] = true;
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|g| g.all_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f32>::new();
        s.register("a", 2, 2, Init::Zeros, true, &mut rng).unwrap();
        assert_eq!(
            s.register("a", 1, 1, Init::Zeros, true, &mut rng),
            Err(ParamError::Duplicate("a".into()))
        );
    }

    #[test]
    fn truncated_normal_bounds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        let id = s
            .register("w", 50, 50, Init::TruncNormal(0.02), true, &mut rng)
            .unwrap();
        let v = &s.value(id).data;
        assert!(v.iter().all(|x| x.abs() <= 0.04));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
        // truncation at 2 std shrinks the std to about 0.88 of nominal
        assert!((var.sqrt() - 0.0176).abs() < 0.002, "{}", var.sqrt());
    }

    #[test]
    fn cast_preserves_ids() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::<f32>::new();
        let a = s.register("a", 1, 3, Init::TruncNormal(1.0), true, &mut rng).unwrap();
        let d = s.cast::<f64>();
        assert_eq!(d.id("a"), Some(a));
        assert_eq!(d.value(a).data[1], s.value(a).data[1] as f64);
    }
}
