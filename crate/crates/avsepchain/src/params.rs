//! Named parameter storage shared by the models, the optimizer, and the
//! checkpoint container. Parameters keep insertion order so gradient
//! accumulation and serialization are deterministic.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tx};
use ndarray::ArrayD;
use std::collections::HashMap;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; returns its stable index.
    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let idx = self.values.len();
        self.index.insert(name.clone(), idx);
        self.names.push(name);
        self.values.push(value);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.values[idx]
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.values[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn set_by_name(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        match self.index.get(name) {
            Some(&i) => {
                if self.values[i].shape() != value.shape() {
                    return Err(Error::Incompatible(format!(
                        "parameter {name} shape {:?} vs stored {:?}",
                        value.shape(),
                        self.values[i].shape()
                    )));
                }
                self.values[i] = value;
                Ok(())
            }
            None => Err(Error::Incompatible(format!("unknown parameter {name}"))),
        }
    }

    /// Load every parameter onto a tape as a differentiable leaf.
    pub fn bind(&self, t: &mut Tape) -> Binding {
        Binding {
            handles: self.values.iter().map(|v| t.var(v.clone())).collect(),
        }
    }

    /// Gradients for all parameters after a backward pass, zeros where a
    /// parameter did not participate.
    pub fn grads(&self, t: &Tape, b: &Binding) -> Vec<ArrayD<f64>> {
        b.handles
            .iter()
            .enumerate()
            .map(|(i, &h)| match t.grad(h) {
                Some(g) => g.clone(),
                None => ArrayD::zeros(self.values[i].raw_dim()),
            })
            .collect()
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

/// Tape handles parallel to the store's parameter order.
#[derive(Debug, Clone)]
pub struct Binding {
    pub handles: Vec<Tx>,
}

impl Binding {
    pub fn get(&self, idx: usize) -> Tx {
        self.handles[idx]
    }
}
