//! GroupKAN: a grouped Kolmogorov-Arnold segmentation network.
//!
//! The crate implements, from scratch, everything needed to train and probe
//! a U-shaped segmentation network whose bottleneck blocks replace MLP
//! channel mixing with grouped B-spline operators:
//!
//! - [`tensor`]: a dense f64 tensor type with reverse-mode automatic
//!   differentiation on an explicit tape.
//! - [`spline`]: B-spline basis evaluation and the `KanLinear` layer (a
//!   matrix of learnable univariate splines).
//! - [`layers`]: grouped KAN activation / transform, patch embedding, and
//!   the conv blocks of the encoder/decoder.
//! - [`model`]: the full network, parameter and FLOP accounting, and
//!   checkpoint serialization.
//! - [`train`]: BCE+Dice loss, Adam, cosine learning-rate schedule, data
//!   augmentation, and the training loop.
//! - [`metrics`]: IoU / F1, plausibility IoU over activation maps, and an
//!   exact one-sided Wilcoxon signed-rank test.
//! - [`data`]: synthetic segmentation datasets plus PGM/PPM ingestion.
//! - [`gradcheck`]: finite-difference verification suites used by tests and
//!   the CLI.
//!
//! Hot numeric kernels are data-parallel via rayon when the `parallel`
//! feature (default) is enabled; disabling it yields a dependency-free
//! sequential build with bit-identical results.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod spline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
