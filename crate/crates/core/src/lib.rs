//! ECG-derived features and gradient-boosted stumps for predicting chest
//! radiograph findings.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boosting;
pub mod error;
pub mod evaluate;
pub mod explain;
pub mod features;
pub mod ingestion;
pub mod selection;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
