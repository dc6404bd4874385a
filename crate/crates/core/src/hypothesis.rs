//! Private tests for Cox regression coefficients and Monte Carlo threshold calibration.

use rand::Rng;
use rayon::prelude::*;

use crate::cox;
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::mechanism::{
    llr_sensitivity, score_sensitivity, trace_sensitivity, BudgetLedger, NoiseSource, PrivacyBudget,
};
use crate::rng::{self, Domain};

/// Direction in which a released statistic is compared against its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    /// Reject iff `statistic + noise < threshold`.
    Below,
    /// Reject iff `statistic + noise > threshold`.
    Above,
}

impl Rejection {
    pub fn decide(self, released: f64, threshold: f64) -> bool {
        match self {
            Rejection::Below => released < threshold,
            Rejection::Above => released > threshold,
        }
    }
}

/// One private test decision together with what it spent.
#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// Pre-noise statistic.
    pub statistic: f64,
    /// Privacy noise added to the statistic, after scaling.
    pub noise: f64,
    pub threshold: f64,
    pub direction: Rejection,
    pub reject: bool,
    pub budget: PrivacyBudget,
    pub ledger: BudgetLedger,
    /// Present for the plug-in score test.
    pub trace: Option<TraceEstimate>,
    /// False when run with noise disabled.
    pub private: bool,
}

impl TestResult {
    /// The value that leaves the mechanism.
    pub fn released(&self) -> f64 {
        self.statistic + self.noise
    }
}

/// Output of the private trace estimator `max{0, tr H + K W' / eps}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEstimate {
    pub value: f64,
    pub raw_trace: f64,
    pub noise: f64,
}

/// Tuning of the plug-in score test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreTestConfig {
    pub c1: f64,
    pub c2: f64,
    /// Level used when the threshold is calibrated by simulation.
    pub alpha: f64,
    pub n_mc: usize,
}

impl Default for ScoreTestConfig {
    fn default() -> Self {
        Self {
            c1: 0.5,
            c2: 2.0,
            alpha: 0.15,
            n_mc: 2000,
        }
    }
}

impl ScoreTestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::InvalidConfig("c1 and c2 must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        if self.n_mc == 0 {
            return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    Ok(())
}

fn check_dim(dataset: &SurvivalDataset, beta: &[f64]) -> Result<()> {
    if beta.len() != dataset.dimension() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dimension(),
            got: beta.len(),
        });
    }
    Ok(())
}

/// Private partial-likelihood-ratio test of `beta0` against `beta1`.
///
/// Releases `l_n(beta0) - l_n(beta1) + (Delta / eps) W` and rejects when it
/// falls strictly below `threshold` (zero in the plain test).
pub fn binary_lrt_test<R: Rng>(
    dataset: &SurvivalDataset,
    beta0: &[f64],
    beta1: &[f64],
    budget: PrivacyBudget,
    noise: &mut NoiseSource<R>,
    threshold: f64,
) -> Result<TestResult> {
    check_epsilon(budget.epsilon)?;
    check_dim(dataset, beta0)?;
    check_dim(dataset, beta1)?;
    let n = dataset.len().max(1);
    let scale = llr_sensitivity(beta0, beta1, n, dataset.covariate_bound())? / budget.epsilon;
    let statistic =
        cox::log_partial_likelihood(dataset, beta0)? - cox::log_partial_likelihood(dataset, beta1)?;
    let w = noise.laplace(scale)?;
    let budget = PrivacyBudget::pure(budget.epsilon)?;
    let mut ledger = BudgetLedger::new();
    ledger.charge("laplace:log-likelihood-ratio", 0..dataset.len(), budget);
    Ok(TestResult {
        statistic,
        noise: w,
        threshold,
        direction: Rejection::Below,
        reject: Rejection::Below.decide(statistic + w, threshold),
        budget,
        ledger,
        trace: None,
        private: noise.is_private(),
    })
}

fn score_norm_statistic(dataset: &SurvivalDataset, beta0: &[f64]) -> Result<f64> {
    let s = cox::score(dataset, beta0)?;
    Ok(if dataset.is_empty() {
        0.0
    } else {
        s.norm() / (dataset.len() as f64).sqrt()
    })
}

/// Private score test with a supplied threshold `tau`; rejects iff the
/// released `|score(beta0)| / sqrt n` exceeds `tau`.
pub fn score_test_oracle<R: Rng>(
    dataset: &SurvivalDataset,
    beta0: &[f64],
    budget: PrivacyBudget,
    tau: f64,
    noise: &mut NoiseSource<R>,
) -> Result<TestResult> {
    check_epsilon(budget.epsilon)?;
    check_dim(dataset, beta0)?;
    if tau.is_nan() {
        return Err(Error::NumericInput("threshold is NaN".into()));
    }
    let n = dataset.len().max(1);
    let scale = score_sensitivity(beta0, n, dataset.covariate_bound())? / budget.epsilon;
    let statistic = score_norm_statistic(dataset, beta0)?;
    let w = noise.laplace(scale)?;
    let budget = PrivacyBudget::pure(budget.epsilon)?;
    let mut ledger = BudgetLedger::new();
    ledger.charge("laplace:score-norm", 0..dataset.len(), budget);
    Ok(TestResult {
        statistic,
        noise: w,
        threshold: tau,
        direction: Rejection::Above,
        reject: Rejection::Above.decide(statistic + w, tau),
        budget,
        ledger,
        trace: None,
        private: noise.is_private(),
    })
}

/// `sqrt(trace) + c1 / sqrt d + c2 C_{beta0} (1 + ln n) / (sqrt n eps)`.
#[allow(clippy::too_many_arguments)]
pub fn score_threshold(
    trace_value: f64,
    c1: f64,
    c2: f64,
    d: usize,
    n: usize,
    epsilon: f64,
    beta0: &[f64],
    covariate_bound: f64,
) -> Result<f64> {
    if !(trace_value >= 0.0 && trace_value.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "trace value must be finite and >= 0, got {trace_value}"
        )));
    }
    if d == 0 || n == 0 {
        return Err(Error::InvalidConfig(
            "score threshold needs d >= 1 and n >= 1".into(),
        ));
    }
    check_epsilon(epsilon)?;
    let privacy = c2 * score_sensitivity(beta0, n, covariate_bound)? / epsilon;
    Ok(trace_value.sqrt() + c1 / (d as f64).sqrt() + privacy)
}

/// Private estimate of `tr H(D1; beta0)` on the calibration half.
pub fn private_trace_estimate<R: Rng>(
    dataset_half: &SurvivalDataset,
    beta0: &[f64],
    epsilon: f64,
    noise: &mut NoiseSource<R>,
) -> Result<TraceEstimate> {
    check_epsilon(epsilon)?;
    check_dim(dataset_half, beta0)?;
    if dataset_half.is_empty() {
        return Err(Error::InvalidConfig(
            "trace estimate needs a nonempty half".into(),
        ));
    }
    // A single observation always has zero trace, so its sensitivity is zero.
    let k = match dataset_half.len() {
        1 => 0.0,
        m => trace_sensitivity(m, beta0, dataset_half.covariate_bound())?,
    };
    let raw_trace = cox::hessian_trace(dataset_half, beta0)?;
    let w = noise.laplace(k / epsilon)?;
    Ok(TraceEstimate {
        value: (raw_trace + w).max(0.0),
        raw_trace,
        noise: w,
    })
}

/// Fully private score test: trace estimated on the first half, score
/// released on the second half. Disjoint halves compose in parallel, so the
/// total charge is `(eps, 0)`.
pub fn score_test_plugin<R: Rng>(
    dataset: &SurvivalDataset,
    beta0: &[f64],
    budget: PrivacyBudget,
    config: &ScoreTestConfig,
    noise: &mut NoiseSource<R>,
) -> Result<TestResult> {
    config.validate()?;
    check_epsilon(budget.epsilon)?;
    check_dim(dataset, beta0)?;
    if dataset.len() < 2 {
        return Err(Error::InvalidConfig(
            "plug-in score test needs at least two observations".into(),
        ));
    }
    let (first, second) = dataset.split_halves();
    let trace = private_trace_estimate(&first, beta0, budget.epsilon, noise)?;
    let tau = score_threshold(
        trace.value,
        config.c1,
        config.c2,
        dataset.dimension(),
        second.len(),
        budget.epsilon,
        beta0,
        dataset.covariate_bound(),
    )?;
    let mut result = score_test_oracle(&second, beta0, budget, tau, noise)?;

    let pure = PrivacyBudget::pure(budget.epsilon)?;
    let mut ledger = BudgetLedger::new();
    ledger.charge("laplace:hessian-trace", 0..first.len(), pure);
    ledger.extend(&result.ledger, first.len());
    result.budget = ledger.total();
    result.ledger = ledger;
    result.trace = Some(trace);
    Ok(result)
}

/// Which tail of the null distribution the rejection region occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    /// Reject small values; threshold is the `level` quantile.
    Lower,
    /// Reject large values; threshold is the `1 - level` quantile.
    Upper,
}

impl Tail {
    pub fn rejection(self) -> Rejection {
        match self {
            Tail::Lower => Rejection::Below,
            Tail::Upper => Rejection::Above,
        }
    }
}

/// Order-statistic quantile: the `ceil(p m)`-th smallest of `m` draws.
pub fn empirical_quantile(samples: &[f64], level: f64, tail: Tail) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no Monte Carlo draws".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "level must lie in (0, 1), got {level}"
        )));
    }
    if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::NumericInput(format!("null sampler returned {bad}")));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let p = match tail {
        Tail::Lower => level,
        Tail::Upper => 1.0 - level,
    };
    // Guard against p*m landing a rounding error above an integer.
    let rank = ((p * m as f64) - 1e-9).ceil().clamp(1.0, m as f64) as usize;
    Ok(sorted[rank - 1])
}

/// Calibrates a rejection threshold from `n_mc` draws of a null sampler.
///
/// Draw `i` gets its own stream derived from a base seed taken from `rng`, so
/// the result is the same whether the draws run sequentially or in parallel.
pub fn calibrate_threshold_mc<F, R>(
    null_sampler: F,
    level: f64,
    n_mc: usize,
    rng: &mut R,
    tail: Tail,
) -> Result<f64>
where
    F: Fn(&mut rng::Stream) -> Result<f64> + Sync,
    R: Rng + ?Sized,
{
    if n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be at least 1".into()));
    }
    let base: u64 = rng.random();
    let draws = (0..n_mc as u64)
        .into_par_iter()
        .map(|i| {
            let mut s = rng::stream(rng::derive_seed(base, Domain::Calibration, &[i]), 0);
            null_sampler(&mut s)
        })
        .collect::<Result<Vec<f64>>>()?;
    empirical_quantile(&draws, level, tail)
}
