//! Named parameter and gradient stores. Names are sorted (BTreeMap), so
//! every iteration order, checkpoint layout, and optimizer update sequence
//! is deterministic.

use std::collections::BTreeMap;

use super::{NnError, Tensor};

/// All trainable tensors of a model, keyed by a unique name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    version: u32,
    init_seed: u64,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub const FORMAT_VERSION: u32 = 1;

    pub fn new(init_seed: u64) -> Self {
        Self { version: Self::FORMAT_VERSION, init_seed, tensors: BTreeMap::new() }
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn set_init_seed(&mut self, seed: u64) {
        self.init_seed = seed;
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), NnError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NnError::InvalidSpec(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NnError> {
        self.tensors.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, NnError> {
        self.tensors.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Iterates in sorted name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

/// Accumulating gradient store, keyed like [`ModelParams`].
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Tensor>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `grad` into the accumulator for `name`.
    pub fn accumulate(&mut self, name: &str, grad: Tensor) -> Result<(), NnError> {
        match self.grads.get_mut(name) {
            Some(existing) => existing.add_assign(&grad),
            None => {
                self.grads.insert(name.to_string(), grad);
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Multiplies every accumulated gradient by `s` (batch averaging).
    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}
