//! Gaussian mixture flow matching on CPU: exact mixture algebra, a linear
//! noise schedule, a small MLP with in-repo reverse-mode gradients, GM-SDE
//! and GM-ODE solvers with probabilistic guidance, spectral sampling at
//! small-grid scale, and the toy datasets plus metrics used to evaluate all
//! of it.
//!
//! Batch-level work (Monte-Carlo sampling, training batches, histogram
//! accumulation) runs data-parallel via rayon when the default `parallel`
//! feature is enabled, with a bit-identical sequential fallback when it is
//! not.

pub mod data_eval;
pub mod error;
pub mod fft;
pub mod gm;
pub mod net;
pub mod oracle;
pub mod par;
pub mod schedule;
pub mod solvers;
pub mod spectral;
pub mod train;

pub use error::{GmError, Result};
