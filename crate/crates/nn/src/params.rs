// SPDX-License-Identifier: Apache-2.0

//! Flat parameter storage.
//!
//! Tensors are laid out in registration order, row-major within each tensor.
//! A [`ParamSlot`] is a cheap handle (offset + shape) that layers keep to find
//! their tensors again.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::{NnError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub offset: usize,
    pub len: usize,
    /// Rows/cols for matrices; for 1-D tensors `rows == len`, `cols == 1`.
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlot {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Contiguous flat range covered by every tensor whose name starts with `prefix`.
    pub fn prefix_range(&self, prefix: &str) -> Option<Range<usize>> {
        let mut matching = self.entries.iter().filter(|e| e.name.starts_with(prefix));
        let first = matching.next()?;
        let last = matching.next_back().unwrap_or(first);
        Some(first.offset..last.offset + last.len())
    }

    /// Offsets contiguous, non-overlapping, in order.
    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for e in &self.entries {
            if e.offset != expected {
                return Err(NnError::Layout(format!(
                    "tensor `{}` starts at {} but previous tensor ends at {}",
                    e.name, e.offset, expected
                )));
            }
            expected += e.len();
        }
        Ok(())
    }

    /// Human-readable difference between two layouts, empty when equal.
    pub fn diff(&self, other: &Layout) -> Vec<String> {
        let mut out = Vec::new();
        for (i, (a, b)) in self.entries.iter().zip(&other.entries).enumerate() {
            if a != b {
                out.push(format!(
                    "#{i}: `{}` {:?}@{} vs `{}` {:?}@{}",
                    a.name, a.shape, a.offset, b.name, b.shape, b.offset
                ));
            }
        }
        if self.entries.len() != other.entries.len() {
            out.push(format!("tensor count {} vs {}", self.entries.len(), other.entries.len()));
        }
        out
    }
}

/// Registers tensors in order and hands back their slots.
#[derive(Debug, Default)]
pub struct LayoutBuilder {
    layout: Layout,
    prefix: Vec<String>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    pub fn register(&mut self, name: &str, shape: &[usize]) -> ParamSlot {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        };
        let offset = self.layout.total_len();
        let entry = LayoutEntry {
            name: full,
            shape: shape.to_vec(),
            offset,
        };
        let len = entry.len();
        let (rows, cols) = match shape {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        self.layout.entries.push(entry);
        ParamSlot { offset, len, rows, cols }
    }

    pub fn finish(self) -> Layout {
        self.layout
    }
}

/// Flat parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { values, layout }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.total_len() {
            return Err(NnError::Layout(format!(
                "layout describes {} values but {} were supplied",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    /// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`), zero biases.
    ///
    /// Tensors of rank ≥ 2 are treated as weights; rank-1 tensors as biases.
    pub fn init_glorot(layout: Layout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pv = Self::zeros(layout);
        for e in pv.layout.entries.clone() {
            if e.shape.len() < 2 {
                continue;
            }
            let bound = glorot_bound(&e.shape);
            for v in &mut pv.values[e.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        pv
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn slot(&self, name: &str) -> Result<ParamSlot> {
        let e = self.layout.get(name).ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let (rows, cols) = match e.shape.as_slice() {
            [] => (1, 1),
            [n] => (*n, 1),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        Ok(ParamSlot {
            offset: e.offset,
            len: e.len(),
            rows,
            cols,
        })
    }

    pub fn tensor(&self, slot: ParamSlot) -> &[f64] {
        &self.values[slot.range()]
    }

    pub fn tensor_mut(&mut self, slot: ParamSlot) -> &mut [f64] {
        &mut self.values[slot.range()]
    }

    /// Split into per-tensor owned arrays, in layout order.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.layout
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), self.values[e.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        let mut builder = LayoutBuilder::new();
        let mut values = Vec::new();
        for (name, shape, data) in tensors {
            let slot = builder.register(name, shape);
            if slot.len != data.len() {
                return Err(NnError::Layout(format!("tensor `{name}` has shape {shape:?} but {} values", data.len())));
            }
            values.extend_from_slice(data);
        }
        Self::from_values(builder.finish(), values)
    }

    /// Overwrite values with another vector of the identical layout.
    pub fn copy_from(&mut self, other: &ParamVector) -> Result<()> {
        if self.layout != other.layout {
            return Err(NnError::Layout(self.layout.diff(&other.layout).join("; ")));
        }
        self.values.copy_from_slice(&other.values);
        Ok(())
    }
}

fn glorot_bound(shape: &[usize]) -> f64 {
    let receptive: usize = shape[2..].iter().product();
    let fan_out = shape[0] * receptive;
    let fan_in = shape[1] * receptive;
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `∂L/∂θ`, aligned index-for-index with a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!("gradient entry {i} is {}", values[i])));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Rescale so the global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn dot(&self, direction: &[f64]) -> f64 {
        self.values.iter().zip(direction).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_layout() -> Layout {
        let mut b = LayoutBuilder::new();
        b.push_scope("mlp");
        b.register("l1.weight", &[3, 2]);
        b.register("l1.bias", &[3]);
        b.pop_scope();
        b.register("conv.weight", &[2, 1, 2, 2]);
        b.finish()
    }

    #[test]
    fn offsets_are_contiguous() {
        let layout = sample_layout();
        layout.validate().unwrap();
        assert_eq!(layout.total_len(), 6 + 3 + 8);
        assert_eq!(layout.get("mlp.l1.bias").unwrap().offset, 6);
        assert_eq!(layout.prefix_range("mlp.").unwrap(), 0..9);
    }

    #[test]
    fn glorot_biases_zero_weights_bounded() {
        let pv = ParamVector::init_glorot(sample_layout(), 7);
        let bias = pv.slot("mlp.l1.bias").unwrap();
        assert!(pv.tensor(bias).iter().all(|&v| v == 0.0));
        let w = pv.slot("mlp.l1.weight").unwrap();
        let bound = (6.0f64 / 5.0).sqrt();
        assert!(pv.tensor(w).iter().all(|v| v.abs() <= bound));
        assert_eq!(pv, ParamVector::init_glorot(sample_layout(), 7));
    }

    #[test]
    fn clip_caps_norm() {
        let mut g = Gradient::from_values(vec![3.0, 4.0]).unwrap();
        let pre = g.clip_norm(1.0);
        assert_eq!(pre, 5.0);
        assert!(g.norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn gradient_rejects_nan() {
        assert!(Gradient::from_values(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn layout_diff_reports_mismatch() {
        let a = sample_layout();
        let mut b = LayoutBuilder::new();
        b.register("mlp.l1.weight", &[3, 3]);
        let d = a.diff(&b.finish());
        assert!(!d.is_empty());
    }
}
