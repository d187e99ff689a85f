use std::collections::BTreeMap;
use std::sync::Arc;

use super::Tensor;

/// Named parameters in stable (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(Arc::as_ref)
    }

    pub fn get_arc(&self, name: &str) -> Option<Arc<Tensor>> {
        self.params.get(name).cloned()
    }

    /// Mutable access; copies the buffer first if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params
            .remove(name)
            .map(|a| Arc::try_unwrap(a).unwrap_or_else(|a| (*a).clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Copies every parameter under `prefix` into `self`, prepending `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in &other.params {
            self.params.insert(format!("{prefix}{k}"), Arc::clone(v));
        }
    }

    /// The parameters whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let params = self
            .params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), Arc::clone(v))))
            .collect();
        ParamStore { params }
    }
}

/// Accumulated gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(&mut self, name: &str, len: usize) -> &mut Vec<f64> {
        self.grads.entry(name.to_string()).or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(Vec::as_slice)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Vec<f64>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.grads.retain(|k, _| keep(k));
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
