//! Distributed two-sample test of cumulative hazards.
//!
//! A [`Server`] owns its raw data and only ever hands out a [`DPHazardCurve`].
//! The coordinator functions take curves, never datasets.

use rand::Rng;

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::hazard::{dp_nelson_aalen, sup_distance, DPHazardCurve, DyadicStep, GridCurve};
use crate::mechanism::{BudgetLedger, NoiseSource, PrivacyBudget};

/// Default tuning constant of the fixed threshold.
pub const DEFAULT_C: f64 = 2.0;

/// One data holder with its own budget.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    dataset: SurvivalDataset,
    pub budget: PrivacyBudget,
    pub server_id: String,
}

impl ServerConfig {
    pub fn new(
        server_id: impl Into<String>,
        dataset: SurvivalDataset,
        budget: PrivacyBudget,
    ) -> Result<Self> {
        if budget.delta <= 0.0 {
            return Err(Error::InvalidConfig(
                "each server needs delta > 0 for the cumulative hazard estimator".into(),
            ));
        }
        Ok(Self {
            dataset,
            budget,
            server_id: server_id.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.dataset.len()
    }

    /// Runs the private estimator locally. The returned curve is the only
    /// thing that leaves the server.
    pub fn publish<R: Rng>(&self, noise: &mut NoiseSource<R>) -> Result<DPHazardCurve> {
        dp_nelson_aalen(&self.dataset, self.budget, noise).map_err(|e| Error::Server {
            server: self.server_id.clone(),
            source: Box::new(e),
        })
    }
}

/// Outcome of the coordinator's comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSampleResult {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub curves: [DPHazardCurve; 2],
    /// `(server_id, ledger)` for each server, kept separate.
    pub budgets: Vec<(String, BudgetLedger)>,
}

/// `c * sum_k [n_k^{-1/2} + log2(min{sqrt n_k, n_k eps_k})^2 ln(1/delta_k) / (n_k eps_k)]`.
#[allow(clippy::too_many_arguments)]
pub fn two_sample_threshold(
    n1: usize,
    n2: usize,
    eps1: f64,
    eps2: f64,
    delta1: f64,
    delta2: f64,
    c: f64,
) -> Result<f64> {
    let term = |n: usize, eps: f64, delta: f64| -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidConfig("sample sizes must be >= 1".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in (0, 1), got {delta}"
            )));
        }
        let n = n as f64;
        let depth_term = n.sqrt().min(n * eps).log2();
        Ok(1.0 / n.sqrt() + depth_term * depth_term * (1.0 / delta).ln() / (n * eps))
    };
    Ok(c * (term(n1, eps1, delta1)? + term(n2, eps2, delta2)?))
}

/// Coordinator: compares two exchanged curves against `threshold`.
pub fn compare_curves<A, B>(a: &A, b: &B, threshold: f64) -> (f64, bool)
where
    A: DyadicStep + ?Sized,
    B: DyadicStep + ?Sized,
{
    let statistic = sup_distance(a, b);
    (statistic, statistic > threshold)
}

/// Both servers publish with their own streams, then the coordinator joins.
pub fn run_two_sample_test<R1: Rng, R2: Rng>(
    server1: &ServerConfig,
    server2: &ServerConfig,
    c: f64,
    noise1: &mut NoiseSource<R1>,
    noise2: &mut NoiseSource<R2>,
) -> Result<TwoSampleResult> {
    let a = server1.publish(noise1)?;
    let b = server2.publish(noise2)?;
    let threshold = two_sample_threshold(
        server1.n(),
        server2.n(),
        server1.budget.epsilon,
        server2.budget.epsilon,
        server1.budget.delta,
        server2.budget.delta,
        c,
    )?;
    let (statistic, reject) = compare_curves(&a, &b, threshold);
    let budgets = vec![
        (server1.server_id.clone(), a.ledger.clone()),
        (server2.server_id.clone(), b.ledger.clone()),
    ];
    Ok(TwoSampleResult {
        statistic,
        threshold,
        reject,
        curves: [a, b],
        budgets,
    })
}

/// One-sample variant against a closed-form null `Lambda_0`, sampled on the curve's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OneSampleResult {
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub curve: DPHazardCurve,
}

pub fn run_one_sample_test<R: Rng>(
    server: &ServerConfig,
    reference: impl Fn(f64) -> f64,
    threshold: f64,
    noise: &mut NoiseSource<R>,
) -> Result<OneSampleResult> {
    let curve = server.publish(noise)?;
    let null = GridCurve::from_fn(curve.depth, reference)?;
    let (statistic, reject) = compare_curves(&curve, &null, threshold);
    Ok(OneSampleResult {
        statistic,
        threshold,
        reject,
        curve,
    })
}
