//! Embedding-disruption patch attacks (EDPA) and adversarial fine-tuning of
//! visual encoders, on a toy vision-language-action stack small enough to
//! train on a laptop CPU.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a tape-style
//!   reverse-mode engine.
//! - [`encoders`]: visual encoder, language encoder and action head, plus
//!   joint pretraining.
//! - [`patching`]: patch sampling, placement and pasting.
//! - [`losses`]: patch-contrastive and alignment-shift losses, the joint
//!   attack objective with EMA normalisation, and the fine-tuning loss.
//! - [`attack`] and [`defense`]: universal patch optimisation and
//!   adversarial fine-tuning of the visual encoder.
//! - [`data`]: synthetic scene datasets.
//! - [`eval`]: failure-rate metrics, transfer, ablations and heatmaps.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod defense;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod parallel;
pub mod patching;
pub mod pixmap;
pub mod rng;
pub mod tensor;

pub use error::{EdpaError, ErrorCategory, Result};
pub use tensor::Tensor;
