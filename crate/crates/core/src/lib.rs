//! spinemark: joint vertebrae identification and localization in volumetric
//! CT-like images.
//!
//! The pipeline has three stages: a multi-task 3D CNN trained on fixed-size
//! crops, its conversion to a fully convolutional network that scans whole
//! volumes on a stride-16 grid, and a stacked bidirectional LSTM that labels
//! the spatially ordered sample-feature sequence. The crate also ships the
//! data pipeline (volume I/O, resampling, crop labeling, synthetic spine
//! phantoms), the evaluation metrics, and the training loops.

pub mod error;
pub mod tensor;
pub mod ops;
pub mod optim;
pub mod losses;
pub mod net;
pub mod data;
pub mod eval;
pub mod train;
pub mod checkpoint;
pub mod config;
pub mod pipeline;
pub mod selftest;
pub mod sequence;

#[doc(hidden)]
pub mod test_util;

pub use error::{Result, SpineError};
pub use tensor::Tensor;
