//! Grid-driven simulation runner and single-shot test invocation.

pub mod config;
pub mod experiment;

pub use config::{ExperimentGrid, TestKind, ThresholdMode};
pub use experiment::{
    calibrate, calibrate_cell, run_experiment, run_single_test, simulate_grid, CellStatus,
    CellSummary, ExperimentSummary, ResultRow, SingleTestRequest, ThresholdEntry,
};
