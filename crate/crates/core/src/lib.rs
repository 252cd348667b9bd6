//! Complex-valued MLP-Mixer (C-Mixer) training toolkit.
//!
//! The network takes a real image, samples a learned Gaussian "incentive"
//! matrix as the imaginary part of its input, mixes patches with complex
//! token/channel MLPs and projects back to bounded real scores with
//! `tanh(re + im)`. Training is a masked self-supervised pre-training stage
//! against an EMA target tower followed by supervised fine-tuning.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with bad values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctensor;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod train;

pub use error::{Error, Result};
