use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors keyed by dot-separated path, iterated in
/// lexicographic path order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter. Paths must be unique.
    pub fn insert(&mut self, path: impl Into<String>, value: Tensor) -> Result<()> {
        let path = path.into();
        if self.entries.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.entries.insert(path, value);
        Ok(())
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path)
    }

    /// Replaces an existing parameter, keeping its shape.
    pub fn set(&mut self, path: &str, value: Tensor) -> Result<()> {
        let slot = self
            .entries
            .get_mut(path)
            .ok_or_else(|| Error::UnknownParam(path.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "param_set",
                format!("`{path}` has shape {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, path: &str) -> bool {
        self.entries.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Sets every parameter whose path starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}
