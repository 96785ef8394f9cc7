//! Smoothness-regularized layer segmentation.
//!
//! - [`field`]: 2D/3D fields, masks, volume files and graymap export.
//! - [`smooth_loss`]: per-pixel BCE, the row-wise smoothness penalty and
//!   their analytic gradients.
//! - [`metrics`]: overlap scores, surface extraction, roughness `R_a`,
//!   surface-normal histograms and the Wilcoxon signed-rank test.
//! - [`phantom`]: seeded layered phantoms with ground truth.
//! - [`segmenter`]: a free logit field and a small conv model, trained with Adam.
//! - [`experiments`]: the smoothness sweep and the vessel-masking experiment.
//! - [`commands`]: dataset generation, training, evaluation and export.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod field;
pub mod metrics;
pub mod phantom;
pub mod rng;
pub mod segmenter;
pub mod smooth_loss;

pub use error::{Error, Result};
