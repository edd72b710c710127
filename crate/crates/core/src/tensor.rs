// SPDX-License-Identifier: MIT OR Apache-2.0

//! Named dense tensors.
//!
//! Checkpoints hold `f32` elements. Deltas, gradients and the toy networks use
//! `f64`, so [`TensorMap`] is generic over the element type with `f32` as the
//! default.

use std::collections::BTreeMap;
use std::fmt::Debug;

use crate::{Error, Result};

pub trait Element: Copy + Send + Sync + PartialEq + Debug + 'static {
    const ZERO: Self;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    const ZERO: Self = 0.0;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    const ZERO: Self = 0.0;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> DenseTensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if let Some(pos) = shape.iter().position(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "shape {shape:?} has a zero extent on axis {pos}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![E::ZERO; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn cast<F: Element>(&self) -> DenseTensor<F> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> DenseTensor<F> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        out[i] = out[i + 1] * shape[i + 1];
    }
    out
}

/// Ordered map from tensor name to tensor. Iteration is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorMap<E = f32> {
    entries: BTreeMap<String, DenseTensor<E>>,
}

impl<E: Element> Default for TensorMap<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> TensorMap<E> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a tensor; a name already present is an error.
    pub fn insert(&mut self, name: impl Into<String>, tensor: DenseTensor<E>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate tensor name {name:?}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseTensor<E>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseTensor<E>> {
        self.entries.get_mut(name)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&DenseTensor<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Alignment(format!("tensor {name:?} is missing")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseTensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseTensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of elements across all tensors.
    pub fn total_elements(&self) -> usize {
        self.entries.values().map(DenseTensor::len).sum()
    }

    /// Checks identical name sets and per-name shapes.
    pub fn check_aligned<F: Element>(&self, other: &TensorMap<F>) -> Result<()> {
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => {
                    return Err(Error::Alignment(format!(
                        "tensor {name:?} is missing from the other map"
                    )))
                }
                Some(o) if o.shape != t.shape => {
                    return Err(Error::Alignment(format!(
                        "tensor {name:?} has shape {:?} vs {:?}",
                        t.shape, o.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(Error::Alignment(format!(
                "tensor {extra:?} is missing from the first map"
            )));
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> TensorMap<F> {
        TensorMap {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn map<F: Element>(&self, f: impl Fn(E) -> F) -> TensorMap<F> {
        TensorMap {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.map(&f)))
                .collect(),
        }
    }

    /// Element-wise combination of two aligned maps.
    pub fn zip_map<F: Element, G: Element>(
        &self,
        other: &TensorMap<F>,
        f: impl Fn(E, F) -> G,
    ) -> Result<TensorMap<G>> {
        self.check_aligned(other)?;
        let entries = self
            .entries
            .iter()
            .map(|(name, a)| {
                let b = &other.entries[name];
                let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
                (
                    name.clone(),
                    DenseTensor {
                        shape: a.shape.clone(),
                        data,
                    },
                )
            })
            .collect();
        Ok(TensorMap { entries })
    }

    /// Same names and shapes, all elements zero.
    pub fn zeros_like<F: Element>(&self) -> TensorMap<F> {
        self.map(|_| F::ZERO)
    }
}

impl<E: Element> FromIterator<(String, DenseTensor<E>)> for TensorMap<E> {
    /// Later duplicates overwrite earlier ones; use [`TensorMap::insert`] to reject them.
    fn from_iter<I: IntoIterator<Item = (String, DenseTensor<E>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}
