//! Forecasting future outcomes from dynamic brain-connectivity graphs fused
//! with tabular covariates.
//!
//! The pipeline: ROI time series are cut into sliding windows, each window
//! becomes a Pearson-correlation graph thresholded by BH-FDR, a shared GCN
//! encodes every window snapshot, and a small transformer fuses the ordered
//! window tokens with an embedding of tabular covariates (sex, age) into a
//! binary prediction. Training follows a stratified nested cross-validation
//! protocol with inner-fold ensembling; everything runs on a self-contained
//! f64 reverse-mode autodiff engine so gradients can be verified against
//! finite differences end to end.

pub mod connectivity;
pub mod error;
pub mod fusion;
pub mod graph_encoder;
pub mod metrics;
pub mod numerics;
pub mod rng;

pub use error::{Error, Result};
