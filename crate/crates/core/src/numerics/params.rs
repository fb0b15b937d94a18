use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A named tensor owned by a model.
///
/// Trainable entries are updated by the optimizer; the rest are buffers such
/// as batch-norm running statistics that ride along in checkpoints.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Name-ordered parameter collection. Iteration order is the lexicographic
/// order of names, which keeps checkpoints and optimizer sweeps deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name.clone(),
            Parameter {
                name,
                value: Arc::new(value),
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{name}: expected {:?}, got {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) -> Vec<String> {
        let names = self.matching(prefix);
        for n in &names {
            self.params.remove(n);
        }
        names
    }

    pub fn matching(&self, prefix: &str) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a set of parameter gradients into the stored `grad` fields.
    pub fn accumulate<'a>(&mut self, grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
        for (name, g) in grads {
            let p = self.get_mut(name)?;
            if p.grad.shape() != g.shape() {
                return Err(Error::shape(format!("gradient for {name} has shape {:?}", g.shape())));
            }
            for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Total number of scalar entries across trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_grad_shapes_follow_values() {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::zeros(&[2, 3]), true).unwrap();
        assert!(s.insert("a.w", Tensor::zeros(&[1]), true).is_err());
        assert_eq!(s.get("a.w").unwrap().grad.shape(), &[2, 3]);
        assert!(s.set_value("a.w", Tensor::zeros(&[3, 2])).is_err());
        s.insert("a.b", Tensor::zeros(&[3]), true).unwrap();
        s.insert("b.w", Tensor::zeros(&[3]), false).unwrap();
        assert_eq!(s.matching("a."), vec!["a.b".to_string(), "a.w".to_string()]);
        assert_eq!(s.remove_prefix("a.").len(), 2);
        assert_eq!(s.len(), 1);
    }
}
