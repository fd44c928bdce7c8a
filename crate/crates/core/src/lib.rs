//! Two-stage spatio-temporal downscaling of gridded wind fields.
//!
//! A deterministic attention-based video-prediction network maps a window of
//! coarse frames to the mean high-resolution field; a small EDM-style
//! correction diffusion model then samples the unresolved fine-scale residual.
//! The crate also builds the synthetic training data, bias-corrects coarse
//! inputs by quantile mapping, and scores outputs with spectral and storm
//! diagnostics.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod edm;
pub mod error;
pub mod grid;
pub mod mean_model;
pub mod nn;
pub mod physics;
pub mod pipeline;
pub mod spectral;

pub use error::{Error, Result};
