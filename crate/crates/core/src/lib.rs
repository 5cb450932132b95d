//! Robustness-preserving class-incremental learning with bi-level coreset
//! replay.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` arrays and a reverse-mode tape whose
//!   gradients are themselves differentiable.
//! - [`models`]: linear/MLP classifiers over a flat parameter vector.
//! - [`adversarial`]: ℓ∞ PGD, adversarial training loss, robust accuracy.
//! - [`coreset`]: bi-level coreset selection with straight-through top-n
//!   masks and unrolled hypergradients, plus random and influence baselines.
//! - [`continual`]: memory bank, robust distillation loss and the
//!   class-incremental training loop.
//! - [`data`]: synthetic streams and the CIFAR-10 binary reader.
//! - [`harness`]: run configuration, metrics CSV, sweeps and reports.

pub mod adversarial;
pub mod continual;
pub mod coreset;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
