//! Evaluation protocol behind the `pseudocal` CLI: configuration, sealed
//! target views, the four calibration arms (plus the τ-adjusted arm), sweeps
//! and their CSV/JSON outputs.

pub mod config;
pub mod data;
pub mod output;
pub mod runner;
pub mod selftest;

pub use config::{ExperimentConfig, Method, TauPolicy};
pub use data::{Reveal, TargetSplit, TrialData, UnlabeledTarget};
pub use output::{aggregate, fmt_sig, read_records, write_aggregate, write_bound_curves, write_records, AggregateRow, TrialRecord};
pub use runner::{
    run_sweep, run_sweep_logits, run_tau_experiment, LogitSetup, Protocol, SigmaSummary, SweepOutput, SyntheticSetup,
    SyntheticTrial,
};
