use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(|_| rng.random_range(-limit..limit)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Named parameter (or gradient) tensors. Iteration order is by name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.values)
    }

    pub fn values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        Ok(&mut self.get_mut(name)?.values)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
                .collect(),
        }
    }

    /// Total number of scalars.
    pub fn size(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &Params) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tensors vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for ((a, ta), (b, tb)) in self.tensors.iter().zip(&other.tensors) {
            if a != b || ta.shape != tb.shape {
                return Err(Error::ShapeMismatch(format!(
                    "`{a}` {:?} vs `{b}` {:?}",
                    ta.shape, tb.shape
                )));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other` (same layout assumed).
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (a, b) in self.tensors.values_mut().zip(other.tensors.values()) {
            for (x, y) in a.values.iter_mut().zip(&b.values) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.values.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flattened view in name order; the inverse of [`Params::set_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.values().flat_map(|t| t.values.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.size()
            )));
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.values.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
