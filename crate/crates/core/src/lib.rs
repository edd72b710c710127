// SPDX-License-Identifier: MIT OR Apache-2.0

//! Importance-guided delta pruning and checkpoint merging.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`checkpoint`]: named dense tensors and their on-disk form.
//! - [`partition`]: model-, layer- and hidden-state-level parameter groupings.
//! - [`delta`]: task vectors, drop masks (random and magnitude) and rescaling.
//! - [`importance`]: per-partition importance by causal substitution or by the
//!   delta/gradient inner product.
//! - [`calibration`]: drop ratios and merge weights derived from importance.
//! - [`merge`]: Task Arithmetic, importance-weighted merging and recipe runs.
//! - [`toy`]: a small tanh MLP laboratory with synthetic tasks, used to check
//!   every formula end to end.
//! - [`bench`]: the pruning comparison sweep over toy tasks.

pub mod bench;
pub mod calibration;
pub mod checkpoint;
pub mod delta;
mod error;
pub mod importance;
pub mod io;
pub mod merge;
pub mod partition;
pub mod rng;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result, Stage};
pub use tensor::{DenseTensor, Element, TensorMap};
