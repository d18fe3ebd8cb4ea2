use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{FanError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(FanError::invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replace a tensor's values, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.tensors[id.0];
        if slot.shape() != value.shape() {
            return Err(FanError::shape(
                "param set",
                format!(
                    "`{}` has shape {:?}, got {:?}",
                    self.names[id.0],
                    slot.shape(),
                    value.shape()
                ),
            ));
        }
        *slot = value;
        Ok(())
    }
}

/// Per-parameter gradient accumulator, summed over samples of a batch.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradBuffer {
            grads: store.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add(&mut self, other: &GradBuffer) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_shapes_fixed() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(vec![2, 3])).unwrap();
        assert!(s.add("a", Tensor::zeros(vec![1])).is_err());
        assert_eq!(s.id("a"), Some(a));
        assert!(s.set(a, Tensor::zeros(vec![3, 2])).is_err());
        s.set(a, Tensor::full(vec![2, 3], 1.5)).unwrap();
        assert_eq!(s.get(a).data()[5], 1.5);
        assert_eq!(s.numel(), 6);
    }

    #[test]
    fn buffer_arithmetic() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(vec![2])).unwrap();
        let mut g = GradBuffer::zeros_like(&s);
        g.get_mut(a).copy_from_slice(&[3.0, 4.0]);
        let other = g.clone();
        g.add(&other);
        g.scale(0.5);
        assert_eq!(g.get(a), &[3.0, 4.0]);
        assert_eq!(g.norm(), 5.0);
        g.zero();
        assert_eq!(g.norm(), 0.0);
    }
}
