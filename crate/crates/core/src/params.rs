//! Named parameter registry with a stable, deterministic order.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`, over `[fan_in × fan_out]`.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
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

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Builds a [`ParamStore`] in registration order. With an RNG the values are
/// initialised; without one every tensor is zero (used to describe layouts).
pub struct ParamBuilder<'r, T: Scalar> {
    store: ParamStore<T>,
    rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r, T: Scalar> ParamBuilder<'r, T> {
    pub fn new(rng: Option<&'r mut ChaCha8Rng>) -> Self {
        ParamBuilder {
            store: ParamStore::new(),
            rng,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let tensor = match self.rng.as_deref_mut() {
            Some(rng) => init_tensor(shape, init, rng)?,
            None => Tensor::zeros(shape.to_vec()),
        };
        self.store.insert(name, tensor)
    }

    /// Overwrites a slice of an already registered tensor (forget-gate bias, PAD row).
    pub fn set_range(&mut self, id: ParamId, range: std::ops::Range<usize>, value: f64) {
        if self.rng.is_some() {
            let v = T::from_f64_lossy(value);
            for x in &mut self.store.get_mut(id).data_mut()[range] {
                *x = v;
            }
        }
    }

    pub fn finish(self) -> ParamStore<T> {
        self.store
    }
}

pub fn init_tensor<T: Scalar>(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let data = match init {
        Init::Zeros => vec![T::zero(); numel],
        Init::Ones => vec![T::one(); numel],
        Init::Xavier => {
            let (fan_in, fan_out) = match shape {
                [a, b] => (*a, *b),
                [a] => (*a, 1),
                _ => return Err(Error::config(format!("xavier init needs a matrix, got {shape:?}"))),
            };
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..numel)
                .map(|_| T::from_f64_lossy(rng.random_range(-a..=a)))
                .collect()
        }
    };
    Tensor::new(shape.to_vec(), data)
}
