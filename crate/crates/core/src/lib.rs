//! Safe target-return optimization for return-conditioned policies.
//!
//! The crate is organized bottom-up:
//!
//! - [`gp`]: exact GP regression over the 2-D target-return space and prior
//!   sample paths for synthetic benchmarks.
//! - [`safe_opt`]: confidence intervals, contained intervals, safe-set
//!   expansion, expander scores, and the full exploration/maximization loop
//!   ([`safe_opt::run_pls`]).
//! - [`cmdp`]: finite-horizon tabular CMDPs, episodes and offline datasets.
//! - [`rcsl`]: tabular return-conditioned behavior policies and rollouts with
//!   the target-return decrement rule.
//! - [`oracle`]: exact enumeration / dynamic-programming ground truth.
//! - [`harness`]: experiment configs, normalized metrics, reports, CSV traces.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmdp;
pub mod error;
pub mod gp;
pub mod harness;
pub mod oracle;
pub mod rcsl;
pub mod safe_opt;
pub mod seed;
pub mod trace;

pub use error::{Error, Result};
pub use gp::{KernelSpec, TargetReturn};
