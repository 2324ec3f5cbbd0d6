//! Prototype-anchored learning at desk scale.
//!
//! This crate is `no_std` (it needs `alloc`) and holds every pure piece of
//! the toolkit:
//!
//! - [`prototypes`]: simplex equiangular prototype sets, both the closed-form
//!   construction and the optimization-based generator.
//! - [`losses`]: softmax, additive-margin, LDAM, NSL, GCE and focal losses with
//!   analytic gradients for features and prototypes.
//! - [`datasets`]: Gaussian blob synthesis plus long-tailed/step imbalance and
//!   symmetric/asymmetric label noise.
//! - [`trainer`]: a small MLP feature extractor with an anchored or learnable
//!   linear classifier trained by SGD with momentum.
//! - [`analysis`]: sample margins, calibration, norm statistics, Lipschitz
//!   constants, noisy-label risk bounds and the LDAM decision threshold.
//! - [`theory`]: the numeric verification suite built from the pieces above.
//!
//! File formats, CSV/IDX loaders and the command line live in the companion
//! `anchorlab` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod matrix;
pub mod prototypes;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use prototypes::PrototypeSet;
