// SPDX-License-Identifier: Apache-2.0

//! Minimal differentiable numerical backbone.
//!
//! The crate provides the handful of building blocks the locomotion
//! controller needs and nothing more:
//!
//! - [`ParamVector`]: one flat `f64` buffer plus an ordered layout of named
//!   tensors. Every model registers its tensors in a fixed order so that flat
//!   indices are stable across runs (segment selection relies on this).
//! - [`ops`]: plain forward kernels (dense, conv2d, pooling, attention,
//!   bidirectional recurrent cells).
//! - [`Graph`]: a tape for reverse-mode differentiation built on the same
//!   kernels, so the inference and training forward passes are bitwise equal.
//! - [`layers`]: parameter-slot wrappers that run either plainly or on a tape.
//! - [`checkpoint`]: binary persistence of a [`ParamVector`].

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod ops;
pub mod params;

pub use graph::{gradient_of, Graph, Var};
pub use params::{Gradient, Layout, LayoutBuilder, LayoutEntry, ParamSlot, ParamVector};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape { op: &'static str, expected: String, actual: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("unknown parameter tensor `{0}`")]
    UnknownParam(String),
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> NnError {
    NnError::Shape {
        op,
        expected: expected.into(),
        actual: actual.into(),
    }
}
