//! Symmetric jump chains on scaled lattices: conductivity builders,
//! assumption checkers, exact path simulation, heat kernels, Dirichlet forms
//! and scaling-limit diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod conductivity;
pub mod convergence;
pub mod error;
pub mod exec;
pub mod forms;
pub mod heatkernel;
pub mod kernel;
pub mod lattice;
pub mod numerics;
pub mod report;
pub mod validators;

pub use error::{Error, Result};

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
