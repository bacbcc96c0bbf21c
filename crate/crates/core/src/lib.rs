//! Adversarial intrinsic decomposition for hyperspectral image classification.
//!
//! A shared convolutional backbone feeds two MLP heads whose outputs are fused
//! multiplicatively into the classification feature. A discriminator tries to
//! recover a k-means environment pseudo-class from the second head, and the
//! feature extractor is trained against it with weight `alpha`.
//!
//! Modules:
//! - [`data`]: cube I/O, normalization, patch windows, train/test splits
//! - [`synth`]: synthetic scenes following `I = R * S`
//! - [`pseudo_env`]: k-means environment pseudo-classes
//! - [`nets`]: networks with hand-written reverse-mode gradients
//! - [`train`]: losses and the alternating training loop
//! - [`eval`]: confusion matrix, OA/AA/kappa, classification maps
//! - [`cli`]: command-line front end

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod nets;
pub mod pseudo_env;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
