// SPDX-License-Identifier: Apache-2.0

//! Context-aware base command policy, training objective, segment selection,
//! a reduced-order quadruped simulator and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod controller;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod policy;
pub mod sim;
pub mod trace_io;
pub mod tss;
pub mod types;

pub use error::{CoreError, Result};
