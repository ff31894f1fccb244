use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{Error, Result};

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor2D>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor2D) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Tensor2D {
        &self.tensors[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor2D {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor2D] {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor2D::len).sum()
    }

    pub fn zeros_like(&self) -> Vec<Tensor2D> {
        self.tensors
            .iter()
            .map(|t| Tensor2D::zeros(t.rows(), t.cols()))
            .collect()
    }

    /// Replaces all tensors, checking that shapes are unchanged.
    pub fn assign(&mut self, tensors: Vec<Tensor2D>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::dim("ParamSet::assign", self.tensors.len(), tensors.len()));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if !old.same_shape(new) {
                return Err(Error::dim(
                    format!("parameter `{}`", self.names[i]),
                    format!("{:?}", old.shape()),
                    format!("{:?}", new.shape()),
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}
