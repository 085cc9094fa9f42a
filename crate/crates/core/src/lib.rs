//! Short-term enhanced transformer (STET) for multi-channel sEMG.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors and a reverse-mode autodiff tape.
//! * [`gradcheck`]: central finite-difference verification of taped gradients.
//! * [`signal`]: recordings, normalization, windowing, noise and synthetic data.
//! * [`masking`]: sensor-wise geometric segment masks for pretraining.
//! * [`model`]: encoder, long/short-term attention decoders, fusion and heads.
//! * [`losses`], [`metrics`]: objectives and evaluation.
//! * [`harness`]: configuration, optimizer, training loops, benchmarks and CLI.

pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod signal;
pub mod tensor;

pub use error::{Result, StetError};
pub use tensor::{Tape, Tensor, Var};
