//! Partition-learned conformal calibration.
//!
//! The toolkit learns a soft partition of covariate space from calibration
//! scores, assigns each group its own score threshold, and evaluates the
//! resulting prediction sets for conditional coverage against baselines and
//! synthetic ground truth.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod partition;
pub mod pinball;
pub mod rng;
pub mod rule;
pub mod score;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
