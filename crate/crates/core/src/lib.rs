//! Incremental few-shot semantic segmentation on a small, deterministic
//! autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and tape-based reverse-mode autodiff
//! - [`nn`]: feature extractor, cosine classifier, batch norm / renorm
//! - [`protolearn`]: masked average pooling, imprinting, teacher snapshots
//!   and the loss family (cross-entropy, prototype distillation, KD, L2)
//! - [`protocol`]: class folds, few-shot sampling, SGD with poly decay and
//!   the base / few-shot learning step state machine
//! - [`data`]: synthetic shapes dataset and PPM/PGM/manifest I/O
//! - [`metrics`]: confusion accumulators, IoU, mIoU and harmonic mean

pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod protolearn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};

/// Label value for unannotated pixels; excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;
