//! One-stage small-lesion detection with gravity points: pixel anchors laid
//! on a regular grid whose regressed offsets pull them onto nearby lesions.

// Negated comparisons are how validation rejects NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod plot;
pub mod raster;
pub mod train;

pub use error::{Error, Result};
