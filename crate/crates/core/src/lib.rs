//! Conformal prediction under bounded label-conditional covariate shift.
//!
//! * [`scores`]: margins, nonconformity scores, surrogate losses, entropy.
//! * [`conformal`]: split-conformal thresholds, prediction sets, coverage gaps.
//! * [`pseudo`]: hard and randomized pseudo-labels, source-tuned pseudo-calibration.
//! * [`transport`] and [`bounds`]: Wasserstein distances and coverage lower bounds.
//! * [`synthetic`] and [`logit_table`]: data sources.
//! * [`experiment`]: the sweep/τ/bounds protocols behind the `pseudocal` CLI.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod conformal;
pub mod error;
pub mod experiment;
pub mod logit_table;
pub mod oracle;
pub mod pseudo;
pub mod rng;
pub mod scores;
pub mod synthetic;
pub mod transport;

pub use error::{Error, Result};
