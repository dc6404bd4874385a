//! Differentially private hypothesis tests for right-censored survival data.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cox;
pub mod data;
pub mod error;
pub mod harness;
pub mod hazard;
pub mod hypothesis;
pub mod mechanism;
pub mod oracle;
pub mod rng;
pub mod two_sample;

pub use data::{CensoredObservation, SimulationConfig, SurvivalDataset};
pub use error::{Error, Result};
pub use hazard::{dp_nelson_aalen, DPHazardCurve};
pub use hypothesis::{binary_lrt_test, score_test_plugin, ScoreTestConfig, TestResult};
pub use mechanism::{BudgetLedger, NoiseSource, PrivacyBudget};
