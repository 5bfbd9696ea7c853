//! seqop: a numerical laboratory for the effective interaction operators of
//! sequence models.
//!
//! Every sequence layer studied here is viewed through the n x n grid of
//! p x d operators it applies between token pairs. The crate materializes
//! those operators for factorized (attention-style) and structured-dynamics
//! (state-space) models, measures the dimension of the operator family
//! (interaction rank), synthesizes multi-head models that reproduce a linear
//! SSM exactly, analyzes input-output Jacobians for gradient propagation,
//! and runs deterministic teacher-student experiments over all of it.
//!
//! Module map:
//! - [`linalg`]: dense matrices, SVD, complex spectra.
//! - [`kernel`]: interaction-tensor materialization and application.
//! - [`factorized`]: scalar-weight generators and factorized application.
//! - [`dynamics`]: recurrent scans, convolution unroll, selective systems.
//! - [`rank`]: interaction rank, projection errors, the single-head gap.
//! - [`synthesis`]: multi-head constructions that match an SSM kernel.
//! - [`gradients`]: analytic Jacobians, the adversarial attention input,
//!   finite-difference oracles, decay sweeps.
//! - [`training`]: block-rotation teachers and positional-table students.
//! - [`plot`], [`manifest`], [`verify`], [`cli`]: the experiment harness.

// pub mod cli;
pub mod dynamics;
pub mod error;
pub mod factorized;
// pub mod gradients;
pub mod kernel;
pub mod linalg;
// pub mod manifest;
// pub mod plot;
pub mod rank;
pub mod rng;
pub mod synthesis;
// pub mod training;
// pub mod verify;

pub use error::{Error, Result};
