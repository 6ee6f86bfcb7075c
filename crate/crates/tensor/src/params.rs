use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::{Element, Tensor};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// Named model state: trainable weights plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry { name: name.to_string(), value: Arc::new(value), trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, true)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        let entry = &mut self.entries[id.0];
        assert_eq!(entry.value.shape(), value.shape(), "shape mismatch setting {}", entry.name);
        entry.value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    /// Overwrites entries by name. Every name in `values` must exist with the
    /// same shape; entries not mentioned are left untouched. Returns how many
    /// entries were replaced.
    pub fn load_named(&mut self, values: &[(String, Tensor<T>)]) -> Result<usize, String> {
        for (name, value) in values {
            let Some(&idx) = self.by_name.get(name) else {
                return Err(format!("unknown parameter {name}"));
            };
            let current = &self.entries[idx].value;
            if current.shape() != value.shape() {
                return Err(format!(
                    "parameter {name} has shape {:?}, stored value has {:?}",
                    current.shape(),
                    value.shape()
                ));
            }
        }
        for (name, value) in values {
            let idx = self.by_name[name];
            self.entries[idx].value = Arc::new(value.clone());
        }
        Ok(values.len())
    }
}

/// Weight initialisers.
pub mod init {
    use super::*;

    /// He-uniform for ReLU networks: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
    pub fn kaiming_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
        uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// Fan-in scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, used for biases
    /// and layers not followed by a rectifier.
    pub fn fan_in_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
        uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
    }

    pub fn uniform<T: Element>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::c(rng.random_range(-bound..=bound)))
    }
}
