//! Layer-wise post-training weight quantization.
//!
//! The engine quantizes the linear layers of a [`graph::LayerGraph`] one at a
//! time, in order, with one of four methods:
//!
//! * `rtn`: symmetric group-wise round-to-nearest;
//! * `gptq`: Hessian-aware column-sequential solver with error compensation;
//! * `qep`: the same solver aimed at a target corrected for the activation
//!   error introduced by earlier quantized layers, with a fixed strength;
//! * `fade`: as `qep`, but the strength is chosen per layer from diagnostics
//!   of the RTN and calibrated solutions.

pub mod correction;
pub mod error;
pub mod graph;
pub mod hessian;
pub mod pipeline;
pub mod quant;
pub mod report;
pub mod solver;
pub mod store;
pub mod synth;

/// Dense `d_out x d_in` weight matrix.
pub type WeightMatrix = nalgebra::DMatrix<f64>;
/// Dense `features x samples` activation matrix.
pub type ActivationMatrix = nalgebra::DMatrix<f64>;

pub use error::{ErrorCategory, QuantError, Result};
