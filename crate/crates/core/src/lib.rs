//! Tools for studying how the input distribution of an image dataset shapes
//! the adversarial robustness a classifier can reach.
//!
//! The crate covers the whole pipeline at desk scale: loading and
//! generating datasets, semantics-preserving pixel transforms, small
//! classifiers with exact gradients, ℓ∞ PGD attacks and adversarial
//! training, geometric dataset diagnostics, and closed-form
//! concentration-of-measure bounds.

pub mod analysis;
pub mod attack;
pub mod bounds;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod seed;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;
