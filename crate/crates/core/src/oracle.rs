//! Brute-force re-derivations used to check the production code paths.
//!
//! Nothing in here shares code with the likelihood engine or the tree
//! estimator: risk sets are recounted with plain double loops.

use rand::Rng;
use rayon::prelude::*;

use crate::data::{neighboring_dataset, CensoredObservation, SurvivalDataset};
use crate::error::{Error, Result};
use crate::hazard::{DPHazardCurve, DyadicStep};
use crate::rng::{self, Domain};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative rounding allowance when an observed change is compared with its bound.
pub const BOUND_SLACK: f64 = 1e-12;

/// `|a - b| / max(1, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("step must be positive".into()));
    }
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + step;
            let up = f(&probe);
            probe[j] = x[j] - step;
            let down = f(&probe);
            probe[j] = x[j];
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NumericInput(format!(
                    "f not finite near coordinate {j}"
                )));
            }
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Central-difference Jacobian of a vector function; row `a` is `d g_a / d x`.
pub fn finite_difference_jacobian<G>(g: G, x: &[f64], step: f64) -> Result<Vec<Vec<f64>>>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("step must be positive".into()));
    }
    let m = g(x).len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        probe[j] = x[j] + step;
        let up = g(&probe);
        probe[j] = x[j] - step;
        let down = g(&probe);
        probe[j] = x[j];
        for a in 0..m {
            if !(up[a].is_finite() && down[a].is_finite()) {
                return Err(Error::NumericInput(format!(
                    "g not finite near coordinate {j}"
                )));
            }
            jac[a][j] = (up[a] - down[a]) / (2.0 * step);
        }
    }
    Ok(jac)
}

fn linear(beta: &[f64], z: &[f64]) -> f64 {
    beta.iter().zip(z).map(|(b, z)| b * z).sum()
}

/// Risk-set moments at time `t` by direct summation: `(S0, S1, S2)`.
fn moments(obs: &[CensoredObservation], beta: &[f64], t: f64) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
    let d = beta.len();
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut s2 = vec![vec![0.0; d]; d];
    for o in obs.iter().filter(|o| o.time >= t) {
        let w = linear(beta, &o.covariates).exp();
        s0 += w;
        for a in 0..d {
            s1[a] += w * o.covariates[a];
            for b in 0..d {
                s2[a][b] += w * o.covariates[a] * o.covariates[b];
            }
        }
    }
    (s0, s1, s2)
}

pub fn brute_log_partial_likelihood(dataset: &SurvivalDataset, beta: &[f64]) -> f64 {
    let obs = dataset.observations();
    obs.iter()
        .filter(|o| o.event)
        .map(|o| {
            let (s0, _, _) = moments(obs, beta, o.time);
            linear(beta, &o.covariates) - s0.ln()
        })
        .sum()
}

pub fn brute_score(dataset: &SurvivalDataset, beta: &[f64]) -> Vec<f64> {
    let obs = dataset.observations();
    let mut out = vec![0.0; beta.len()];
    for o in obs.iter().filter(|o| o.event) {
        let (s0, s1, _) = moments(obs, beta, o.time);
        for a in 0..beta.len() {
            out[a] += o.covariates[a] - s1[a] / s0;
        }
    }
    out
}

/// `-(1/n)` times the Hessian of the log partial likelihood.
pub fn brute_neg_hessian(dataset: &SurvivalDataset, beta: &[f64]) -> Vec<Vec<f64>> {
    let obs = dataset.observations();
    let d = beta.len();
    let mut out = vec![vec![0.0; d]; d];
    for o in obs.iter().filter(|o| o.event) {
        let (s0, s1, s2) = moments(obs, beta, o.time);
        for a in 0..d {
            for b in 0..d {
                out[a][b] += s2[a][b] / s0 - s1[a] * s1[b] / (s0 * s0);
            }
        }
    }
    let n = obs.len().max(1) as f64;
    out.iter_mut().flatten().for_each(|v| *v /= n);
    out
}

/// Kinds of single-record replacement tried by the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proposal {
    /// Covariates moved to a random corner `+-C_Z / sqrt d`.
    ExtremeCovariates,
    /// Time moved next to 0 or next to 1, status redrawn.
    ExtremeTime,
    FlipStatus,
}

/// How random base datasets are drawn for the sensitivity search.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSearchConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub dimension: usize,
    pub covariate_bound: f64,
}

/// The pair that came closest to (or beyond) the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness {
    pub n: usize,
    pub index: usize,
    pub proposal: Proposal,
    pub original: CensoredObservation,
    pub replacement: CensoredObservation,
    pub observed: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivitySearchReport {
    /// Observed change of the worst pair (largest observed / bound).
    pub max_observed: f64,
    /// Bound that applied to that pair.
    pub bound: f64,
    /// Largest observed change over all pairs regardless of bound.
    pub max_change: f64,
    pub trials: usize,
    pub violations: usize,
    pub witness: Option<Witness>,
}

impl SensitivitySearchReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

fn random_covariates<R: Rng>(d: usize, cz: f64, corner: bool, rng: &mut R) -> Vec<f64> {
    if d == 0 {
        return Vec::new();
    }
    let h = cz / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            if corner {
                if rng.random::<bool>() {
                    h
                } else {
                    -h
                }
            } else {
                h * (2.0 * rng::open_unit(rng) - 1.0)
            }
        })
        .collect()
}

fn random_base<R: Rng>(config: &NeighborSearchConfig, rng: &mut R) -> Result<SurvivalDataset> {
    let n = rng.random_range(config.n_min..=config.n_max);
    let event_rate = rng.random_range(0.3..1.0);
    let corners: f64 = rng.random_range(0.0..1.0);
    let obs = (0..n)
        .map(|_| {
            let z = random_covariates(
                config.dimension,
                config.covariate_bound,
                rng.random::<f64>() < corners,
                rng,
            );
            CensoredObservation::new(rng.random(), rng.random::<f64>() < event_rate, z)
        })
        .collect();
    SurvivalDataset::new(obs, config.dimension, config.covariate_bound)
}

fn propose<R: Rng>(
    original: &CensoredObservation,
    config: &NeighborSearchConfig,
    rng: &mut R,
) -> (Proposal, CensoredObservation) {
    let mut next = original.clone();
    let kind = match rng.random_range(0..3) {
        0 if config.dimension > 0 => Proposal::ExtremeCovariates,
        0 | 1 => Proposal::ExtremeTime,
        _ => Proposal::FlipStatus,
    };
    match kind {
        Proposal::ExtremeCovariates => {
            next.covariates =
                random_covariates(config.dimension, config.covariate_bound, true, rng);
        }
        Proposal::ExtremeTime => {
            let jitter = 1e-3 * rng::open_unit(rng);
            next.time = if rng.random::<bool>() {
                jitter
            } else {
                1.0 - jitter
            };
            next.event = rng.random::<bool>();
        }
        Proposal::FlipStatus => next.event = !next.event,
    }
    (kind, next)
}

fn euclidean_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Randomized search over neighbouring pairs for the largest change of a
/// (vector) statistic, compared with a bound that may depend on `n`.
pub fn empirical_sensitivity_search<S, B, R>(
    statistic: S,
    bound: B,
    base_config: &NeighborSearchConfig,
    trials: usize,
    rng: &mut R,
) -> Result<SensitivitySearchReport>
where
    S: Fn(&SurvivalDataset) -> Result<Vec<f64>> + Sync,
    B: Fn(usize) -> f64 + Sync,
    R: Rng + ?Sized,
{
    if trials == 0 {
        return Err(Error::InvalidConfig("trials must be at least 1".into()));
    }
    if base_config.n_min == 0 || base_config.n_min > base_config.n_max {
        return Err(Error::InvalidConfig("need 1 <= n_min <= n_max".into()));
    }
    let base: u64 = rng.random();
    let outcomes = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<Witness> {
            let mut s = rng::stream(rng::derive_seed(base, Domain::Calibration, &[t]), 0);
            let ds = random_base(base_config, &mut s)?;
            let index = s.random_range(0..ds.len());
            let original = ds.observations()[index].clone();
            let (proposal, replacement) = propose(&original, base_config, &mut s);
            let neighbor = neighboring_dataset(&ds, index, replacement.clone())?;
            let (a, b) = (statistic(&ds)?, statistic(&neighbor)?);
            let observed = euclidean_gap(&a, &b);
            Ok(Witness {
                n: ds.len(),
                index,
                proposal,
                original,
                replacement,
                // Non-finite changes count as violations.
                observed: if observed.is_finite() {
                    observed
                } else {
                    f64::INFINITY
                },
                bound: bound(ds.len()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let violations = outcomes
        .iter()
        .filter(|w| !(w.observed <= w.bound * (1.0 + BOUND_SLACK)))
        .count();
    let max_change = outcomes.iter().map(|w| w.observed).fold(0.0, f64::max);
    let ratio = |w: &Witness| {
        if w.bound > 0.0 {
            w.observed / w.bound
        } else if w.observed > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    let worst = outcomes
        .into_iter()
        .max_by(|a, b| ratio(a).total_cmp(&ratio(b)))
        .expect("trials >= 1");
    Ok(SensitivitySearchReport {
        max_observed: worst.observed,
        bound: worst.bound,
        max_change,
        trials,
        violations,
        witness: Some(worst),
    })
}

/// Per-event increments of the retained subsample, recounted by double loop.
fn retained_increments(
    dataset: &SurvivalDataset,
    curve: &DPHazardCurve,
    clamped: bool,
) -> Vec<(f64, f64)> {
    let obs = dataset.observations();
    let head = obs.len() - curve.n_prime;
    let retained = &obs[head..];
    let floor = if clamped {
        curve.clamp * curve.n_prime as f64
    } else {
        0.0
    };
    retained
        .iter()
        .filter(|o| o.event && o.time <= 1.0)
        .map(|o| {
            let at_risk = retained.iter().filter(|j| j.time >= o.time).count() as f64;
            (o.time, 1.0 / at_risk.max(floor))
        })
        .collect()
}

fn grid_discrepancy(dataset: &SurvivalDataset, curve: &DPHazardCurve, clamped: bool) -> f64 {
    let increments = retained_increments(dataset, curve, clamped);
    let cells = curve.cells();
    (0..cells)
        .map(|m| {
            let left = m as f64 / cells as f64;
            let oracle: f64 = increments
                .iter()
                .filter(|(t, _)| *t < left)
                .map(|(_, inc)| inc)
                .sum();
            (curve.cell_value(m) - oracle).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest gap over the grid between a noise-free curve and the
/// floored-denominator Nelson–Aalen of the retained subsample.
pub fn exhaustive_na_check(dataset: &SurvivalDataset, curve: &DPHazardCurve) -> f64 {
    grid_discrepancy(dataset, curve, true)
}

/// Same comparison against the classical estimator with no denominator floor.
pub fn unclamped_na_discrepancy(dataset: &SurvivalDataset, curve: &DPHazardCurve) -> f64 {
    grid_discrepancy(dataset, curve, false)
}

/// True when the denominator floor `c n'` exceeds some retained risk-set size.
pub fn clamp_binds(dataset: &SurvivalDataset, curve: &DPHazardCurve) -> bool {
    let floored = retained_increments(dataset, curve, true);
    let plain = retained_increments(dataset, curve, false);
    floored.iter().zip(&plain).any(|(a, b)| a.1 != b.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn gradient_of_simple_functions() {
        let g = finite_difference_gradient(|_| 3.0, &[1.0, 2.0], FD_STEP).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = finite_difference_gradient(
            |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            &[1.0, 2.0],
            FD_STEP,
        )
        .unwrap();
        assert!((g[0] - 1.0).abs() < 1e-9 && (g[1] - 2.0).abs() < 1e-9);
        assert!(finite_difference_gradient(|_| f64::NAN, &[1.0], FD_STEP).is_err());
        assert!(finite_difference_gradient(|_| 0.0, &[1.0], 0.0).is_err());
    }

    #[test]
    fn gradient_of_small_likelihood() {
        let ds = SurvivalDataset::new(
            vec![
                CensoredObservation::new(0.2, true, vec![1.0]),
                CensoredObservation::new(0.5, true, vec![0.0]),
                CensoredObservation::new(0.8, false, vec![-1.0]),
            ],
            1,
            1.0,
        )
        .unwrap();
        let g =
            finite_difference_gradient(|b| brute_log_partial_likelihood(&ds, b), &[0.0], FD_STEP)
                .unwrap();
        assert!((g[0] - 1.5).abs() < 1e-6);
        assert!((brute_score(&ds, &[0.0])[0] - 1.5).abs() < 1e-12);
        assert!((brute_neg_hessian(&ds, &[0.0])[0][0] - 0.305_555_555_555_555_6).abs() < 1e-12);
    }

    fn config(n: usize, d: usize) -> NeighborSearchConfig {
        NeighborSearchConfig {
            n_min: n,
            n_max: n,
            dimension: d,
            covariate_bound: 1.0,
        }
    }

    #[test]
    fn constant_statistic_has_zero_sensitivity() {
        let r = empirical_sensitivity_search(
            |_| Ok(vec![1.0]),
            |_| 0.0,
            &config(10, 2),
            200,
            &mut stream(1, 0),
        )
        .unwrap();
        assert_eq!(r.max_change, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn event_fraction_sensitivity_is_one_over_n() {
        let frac = |ds: &SurvivalDataset| Ok(vec![ds.event_count() as f64 / ds.len() as f64]);
        let r = empirical_sensitivity_search(
            frac,
            |n| 1.0 / n as f64,
            &config(5, 1),
            500,
            &mut stream(2, 0),
        )
        .unwrap();
        assert!(r.passed());
        assert!((r.max_change - 0.2).abs() < 1e-12, "{}", r.max_change);
    }

    #[test]
    fn violations_are_reported() {
        let frac = |ds: &SurvivalDataset| Ok(vec![ds.event_count() as f64]);
        let r = empirical_sensitivity_search(frac, |_| 0.5, &config(5, 0), 300, &mut stream(3, 0))
            .unwrap();
        assert!(!r.passed());
        let w = r.witness.unwrap();
        assert!(w.observed > w.bound);
    }
}
