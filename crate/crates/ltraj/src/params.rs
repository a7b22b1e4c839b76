//! Named parameter storage.
//!
//! Parameters live in a [`ParamSet`]: an ordered name → tensor map. The
//! ordering is deterministic (sorted by name), which keeps optimizer updates,
//! checkpoints and gradient checks reproducible.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Consistency(format!("unknown parameter {name:?}")))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Replaces an existing parameter; the new value must keep its shape.
    pub fn update(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != value.shape() {
            return Err(Error::dim(
                format!("ParamSet::update({name})"),
                format!("{:?}", old.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Merges another set into this one; duplicate names are replaced.
    pub fn extend(&mut self, other: ParamSet) {
        self.map.extend(other.map);
    }

    /// Sub-set of parameters whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamSet { map }
    }

    /// Total number of scalar coefficients.
    pub fn coefficient_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        ParamSet {
            map: iter.into_iter().collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_rejects_shape_change() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(vec![2, 2]));
        assert!(p.update("w", Tensor::zeros(vec![2, 2])).is_ok());
        assert!(p.update("w", Tensor::zeros(vec![3])).is_err());
        assert!(p.update("missing", Tensor::zeros(vec![1])).is_err());
    }

    #[test]
    fn names_are_sorted() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::scalar(0.0));
        p.insert("a", Tensor::scalar(0.0));
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["a", "b"]);
    }
}
