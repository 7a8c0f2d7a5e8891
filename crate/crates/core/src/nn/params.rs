//! Named parameter storage shared by the model, the optimizer, and the
//! checkpoint format.

use std::collections::HashMap;

use ndarray::{Array4, ArrayD, Ix4};

use crate::scalar::Scalar;

struct Entry<T: Scalar> {
    name: String,
    value: Array4<T>,
    trainable: bool,
}

/// Flat store of named `(N, C, H, W)` tensors. Trainable entries receive
/// optimizer updates; non-trainable entries hold running statistics.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor under a unique name and returns its index.
    pub fn add(&mut self, name: &str, value: ArrayD<T>, trainable: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let value = value
            .into_dimensionality::<Ix4>()
            .expect("parameters are stored as 4-d tensors");
        let index = self.entries.len();
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), index);
        index
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.entries[index].trainable
    }

    pub fn value(&self, index: usize) -> &Array4<T> {
        &self.entries[index].value
    }

    pub fn value_mut(&mut self, index: usize) -> &mut Array4<T> {
        &mut self.entries[index].value
    }

    pub fn by_name(&self, name: &str) -> &Array4<T> {
        self.value(self.index_of(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    /// Total number of scalar elements across trainable tensors.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn trainable_indices(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].trainable)
            .collect()
    }
}
