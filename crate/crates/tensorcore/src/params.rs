use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::{Result, TensorError};

/// Named parameter store with deterministic (sorted) iteration order.
///
/// Holds both trainable tensors and auxiliary state such as batch-norm
/// running statistics; the optimizer decides which names it updates.
#[derive(Clone, Default, Debug)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Params {
        Params::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| TensorError::Validation(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| TensorError::Validation(format!("unknown parameter '{}'", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
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

    pub fn clear_grads(&mut self) {
        for tensor in self.map.values_mut() {
            tensor.clear_grad();
        }
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn update(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "parameter '{}' has shape {:?}, update has {:?}",
                name,
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_sorted() {
        let mut p = Params::new();
        p.insert("zeta", Tensor::scalar(1.0));
        p.insert("alpha", Tensor::scalar(2.0));
        let names: Vec<&str> = p.names().collect();
        assert_eq!(names, vec!["alpha", "zeta"]);
    }

    #[test]
    fn update_checks_shape() {
        let mut p = Params::new();
        p.insert("w", Tensor::zeros([2, 2]));
        assert!(p.update("w", Tensor::zeros([4])).is_err());
        assert!(p.update("w", Tensor::full([2, 2], 1.0)).is_ok());
    }
}
