//! Two-scale ensemble classification for imbalanced image datasets.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod model;
pub mod consensus;
pub mod rng;
pub mod selftest;

pub use error::{Error, Result};
