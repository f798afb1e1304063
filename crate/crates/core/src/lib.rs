//! Core library for `skewgrad`: a desk-scale laboratory for locating and
//! mitigating gradient conflicts in multi-task point-cloud domain adaptation
//! through saliency-map skewness.
//!
//! The pieces, bottom up:
//!
//! - [`autodiff`] — reverse-mode AD over dense tensors, enough to train small
//!   point networks and to pull per-point coordinate gradients.
//! - [`pointcloud`] — synthetic source/target benchmarks with a controllable
//!   domain shift, plus XYZ file persistence.
//! - [`model`] — shared point encoder with a classification head and a
//!   rotation-prediction self-supervision head.
//! - [`saliency`] — per-point saliency scores from radial coordinate
//!   gradients, and the skewness statistic over them.
//! - [`selection`] — the SM-DSB measurer/selector: skewness-scored sample
//!   selection gating which samples join the self-supervision loss.
//! - [`trainer`] — the two-stage training procedure (joint training, pseudo
//!   labels, fine-tuning), SGD, evaluation, checkpointing.
//! - [`diagnostics`] — task-gradient snapshots, cosine similarities against
//!   oracle gradients, skewness/conflict correlation, and an additive-noise
//!   causal-direction test.

pub mod autodiff;
pub mod csvio;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod pointcloud;
pub mod rng;
pub mod saliency;
pub mod selection;
pub mod stats;
pub mod trainer;

pub use error::{Error, Result};
