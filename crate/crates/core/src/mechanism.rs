//! Noise mechanisms, privacy budgets and the closed-form sensitivity bounds.
//!
//! The sensitivity functions are formula evaluators only; they never look at
//! data, so the noise scale they produce is data independent.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::open_unit;

/// An `(epsilon, delta)` pair charged by one mechanism invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !(0.0..1.0).contains(&delta) {
            return Err(Error::InvalidConfig(format!(
                "delta must lie in [0, 1), got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }

    /// Pure differential privacy, `delta = 0`.
    pub fn pure(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, 0.0)
    }
}

/// How the charges in a ledger combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composition {
    /// Every record is touched by at most one charge.
    Parallel,
    /// Some record is touched by more than one charge; budgets add up.
    Sequential,
}

/// One mechanism invocation on the records `start..end` of its input.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetCharge {
    pub mechanism: String,
    pub records: std::ops::Range<usize>,
    pub budget: PrivacyBudget,
}

/// Record of every charge made while computing one released output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BudgetLedger {
    charges: Vec<BudgetCharge>,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn charge(
        &mut self,
        mechanism: impl Into<String>,
        records: std::ops::Range<usize>,
        budget: PrivacyBudget,
    ) {
        self.charges.push(BudgetCharge {
            mechanism: mechanism.into(),
            records,
            budget,
        });
    }

    pub fn charges(&self) -> &[BudgetCharge] {
        &self.charges
    }

    pub fn composition(&self) -> Composition {
        let mut ranges: Vec<_> = self
            .charges
            .iter()
            .filter(|c| !c.records.is_empty())
            .map(|c| c.records.clone())
            .collect();
        ranges.sort_by_key(|r| r.start);
        if ranges.windows(2).any(|w| w[1].start < w[0].end) {
            Composition::Sequential
        } else {
            Composition::Parallel
        }
    }

    /// Worst-case guarantee: for each record, the basic-composition sum of the
    /// charges touching it, maximized over records.
    pub fn total(&self) -> PrivacyBudget {
        let mut points: Vec<usize> = self
            .charges
            .iter()
            .flat_map(|c| [c.records.start, c.records.end])
            .collect();
        points.sort_unstable();
        points.dedup();
        let mut best = PrivacyBudget {
            epsilon: 0.0,
            delta: 0.0,
        };
        for &p in &points {
            let (eps, delta) = self
                .charges
                .iter()
                .filter(|c| c.records.contains(&p))
                .fold((0.0, 0.0), |(e, d), c| {
                    (e + c.budget.epsilon, d + c.budget.delta)
                });
            best.epsilon = best.epsilon.max(eps);
            best.delta = best.delta.max(delta);
        }
        best
    }

    pub fn extend(&mut self, other: &BudgetLedger, offset: usize) {
        for c in &other.charges {
            self.charges.push(BudgetCharge {
                mechanism: c.mechanism.clone(),
                records: c.records.start + offset..c.records.end + offset,
                budget: c.budget,
            });
        }
    }
}

/// Laplace(0, b) by inverse CDF from `u` on (-1/2, 1/2).
pub fn laplace_from_uniform(u: f64, scale: f64) -> f64 {
    if u == 0.0 || scale == 0.0 {
        return 0.0;
    }
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Draws `Laplace(0, scale)`; scale 0 returns exactly 0.
pub fn laplace_noise<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> Result<f64> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "Laplace scale must be finite and >= 0, got {scale}"
        )));
    }
    let u = open_unit(rng) - 0.5;
    Ok(laplace_from_uniform(u, scale))
}

/// Draws `N(0, std^2)`; std 0 returns exactly 0.
pub fn gaussian_noise<R: Rng + ?Sized>(std: f64, rng: &mut R) -> Result<f64> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "Gaussian std must be finite and >= 0, got {std}"
        )));
    }
    let w: f64 = rng.sample(StandardNormal);
    Ok(if std == 0.0 { 0.0 } else { std * w })
}

/// A random stream plus a switch that zeroes every noise scale.
///
/// Draws are consumed identically in both modes, so switching noise off does
/// not shift the stream for later consumers.
#[derive(Debug, Clone)]
pub struct NoiseSource<R> {
    rng: R,
    enabled: bool,
}

impl<R: Rng> NoiseSource<R> {
    pub fn private(rng: R) -> Self {
        Self { rng, enabled: true }
    }

    /// Verification mode: every mechanism adds exactly zero.
    pub fn noise_off(rng: R) -> Self {
        Self {
            rng,
            enabled: false,
        }
    }

    pub fn is_private(&self) -> bool {
        self.enabled
    }

    pub fn laplace(&mut self, scale: f64) -> Result<f64> {
        let w = laplace_noise(scale, &mut self.rng)?;
        Ok(if self.enabled { w } else { 0.0 })
    }

    pub fn gaussian(&mut self, std: f64) -> Result<f64> {
        let w = gaussian_noise(std, &mut self.rng)?;
        Ok(if self.enabled { w } else { 0.0 })
    }

    pub fn rng(&mut self) -> &mut R {
        &mut self.rng
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(Error::InvalidConfig(format!(
            "sample size must be at least {min}, got {n}"
        )));
    }
    Ok(())
}

fn check_bound(cz: f64) -> Result<()> {
    if !(cz >= 0.0 && cz.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "covariate bound must be finite and >= 0, got {cz}"
        )));
    }
    Ok(())
}

/// `4 C_Z + exp(2 r C_Z) (2 C_Z + C_Z^2)` for a coefficient radius `r`.
fn lipschitz_constant(radius: f64, cz: f64) -> f64 {
    4.0 * cz + (2.0 * radius * cz).exp() * (2.0 * cz + cz * cz)
}

/// The three constants behind the Laplace scales of the Cox tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityConstants {
    /// Constant of the likelihood-ratio bound, radius `max(|beta0|, |beta1|)`.
    pub c_pair: f64,
    /// Constant of the score bound, radius `|beta0|`.
    pub c_single: f64,
    /// Trace sensitivity `K(n, beta0)`.
    pub k_trace: f64,
}

impl SensitivityConstants {
    pub fn compute(beta0: &[f64], beta1: &[f64], n: usize, cz: f64) -> Result<Self> {
        check_bound(cz)?;
        Ok(Self {
            c_pair: lipschitz_constant(norm(beta0).max(norm(beta1)), cz),
            c_single: lipschitz_constant(norm(beta0), cz),
            k_trace: trace_sensitivity(n, beta0, cz)?,
        })
    }
}

/// Sensitivity of `l_n(beta0) - l_n(beta1)`: `c (1 + ln n) |beta0 - beta1|`.
pub fn llr_sensitivity(beta0: &[f64], beta1: &[f64], n: usize, cz: f64) -> Result<f64> {
    check_n(n, 1)?;
    check_bound(cz)?;
    if beta0.len() != beta1.len() {
        return Err(Error::DimensionMismatch {
            expected: beta0.len(),
            got: beta1.len(),
        });
    }
    let gap: Vec<f64> = beta0.iter().zip(beta1).map(|(a, b)| a - b).collect();
    let c = lipschitz_constant(norm(beta0).max(norm(beta1)), cz);
    Ok(c * (1.0 + (n as f64).ln()) * norm(&gap))
}

/// Sensitivity of `|score(beta0)| / sqrt n`: `C (1 + ln n) / sqrt n`.
pub fn score_sensitivity(beta0: &[f64], n: usize, cz: f64) -> Result<f64> {
    check_n(n, 1)?;
    check_bound(cz)?;
    let n = n as f64;
    Ok(lipschitz_constant(norm(beta0), cz) * (1.0 + n.ln()) / n.sqrt())
}

/// Sensitivity `K(n, beta0)` of the trace of the normalized negative Hessian.
pub fn trace_sensitivity(n: usize, beta0: &[f64], cz: f64) -> Result<f64> {
    check_n(n, 2)?;
    check_bound(cz)?;
    let n = n as f64;
    let r = cz * norm(beta0);
    let (e2, e3, e4) = ((2.0 * r).exp(), (3.0 * r).exp(), (4.0 * r).exp());
    let log_n = n.ln();
    let bracket = 2.0
        + e2 * (6.0 + 4.0 * log_n)
        + 2.0 * e4
        + (e3 * (1.0 + log_n) + 6.0 * e2) / n
        + 2.0 * e4 * (1.0 + log_n) / (n * n);
    Ok(cz * cz / n * bracket)
}
