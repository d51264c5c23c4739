//! Fixed-effects estimation of nonlinear panel models with additive
//! individual and time effects, with analytical and split-panel jackknife
//! bias corrections for model parameters and average partial effects.

// `!(x > 0.0)` is used on purpose so that NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the panel's (unit, period) layout.
#![allow(clippy::needless_range_loop)]

pub mod ape;
pub mod cli;
pub mod correction;
pub mod error;
pub mod family;
pub mod hessian;
pub mod jackknife;
pub mod normal;
pub mod panel;
pub mod plugin;
pub mod projection;
pub mod simulation;
pub mod solver;

pub use error::{PanelError, Result};
