use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensors of one model.
///
/// Values are reference counted so a forward graph can bind them without
/// copying; mutation clones a tensor only while a graph still holds it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(name, Arc::new(tensor));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|t| t.as_ref())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn shared(&self, name: &str) -> Result<Arc<Tensor<T>>> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(TensorError::shape("ParamStore::set", slot.shape(), tensor.shape()));
        }
        *slot = Arc::new(tensor);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, va), (kb, vb))| ka == kb && va == vb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            store.insert("a", Tensor::scalar(2.0)),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn mutation_does_not_leak_into_shared_handles() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a", Tensor::scalar(1.0)).unwrap();
        let held = store.shared("a").unwrap();
        store.get_mut("a").unwrap().data_mut()[0] = 5.0;
        assert_eq!(held.item(), 1.0);
        assert_eq!(store.get("a").unwrap().item(), 5.0);
    }
}
