//! Experiment runner, verification suites and run analysis on top of
//! `ligs_core`.

pub mod analysis;
pub mod error;
pub mod trainer;
pub mod verify;

pub use analysis::{compare_runs, CompareReport};
pub use error::HarnessError;
pub use trainer::{run_experiment, ExperimentSpec, RunSummary};
pub use verify::{run_theory_suite, SuiteOptions, SuiteReport};
