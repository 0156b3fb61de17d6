//! Named parameter storage and binding to a tape.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .map(|t| &**t)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), &**v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }

    /// Register every parameter as a trainable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> ParamVars<T> {
        ParamVars {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), tape.param(v.clone())))
                .collect(),
        }
    }
}

/// Parameters bound to one tape.
#[derive(Clone, Debug)]
pub struct ParamVars<T> {
    map: BTreeMap<String, Var<T>>,
}

impl<T: Scalar> ParamVars<T> {
    pub fn get(&self, name: &str) -> Result<&Var<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }
}

impl<T> FromIterator<(String, Var<T>)> for ParamVars<T> {
    fn from_iter<I: IntoIterator<Item = (String, Var<T>)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}

/// Seeded uniform initializer.
#[derive(Debug)]
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| {
            if bound > 0.0 {
                T::from_f64(rng.random_range(-bound..bound))
            } else {
                T::ZERO
            }
        })
    }

    /// `fan_in×fan_out` weight uniform in `±1/√fan_in`.
    pub fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.uniform(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_lookup() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::ones(&[2]));
        store.insert("b", Tensor::zeros(&[3]));
        assert_eq!(store.numel(), 5);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        assert!(vars.get("a").unwrap().requires_grad());
        assert!(vars.get("c").is_err());
    }

    #[test]
    fn initializer_is_seeded_and_bounded() {
        let a: Tensor<f32> = Initializer::new(5).linear(16, 4);
        let b: Tensor<f32> = Initializer::new(5).linear(16, 4);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }
}
