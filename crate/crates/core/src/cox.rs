//! Cox partial likelihood, score, normalized negative Hessian and its trace.
//!
//! All four quantities are read off one reverse pass over the observations
//! sorted by time. Weights `exp(beta'Z_j)` are shifted by the running maximum
//! of the linear predictor over the current risk set, and the accumulated sums
//! are rescaled whenever that maximum grows. Nothing overflows or underflows to
//! zero; the shift cancels in every ratio and is added back for the log-sum term.
//!
//! Tied times are handled Breslow style: all observations sharing a time are
//! added to the risk set before any of the tied events is scored.

use nalgebra::{DMatrix, DVector};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

/// Risk-set sums evaluated at every event time for a fixed coefficient vector.
#[derive(Debug, Clone)]
pub struct RiskSetState {
    dimension: usize,
    n: usize,
    beta: Vec<f64>,
    /// Per event, ascending in time (original index breaks ties).
    events: Vec<EventSums>,
}

/// Shifted suffix sums `S0`, `S1`, `S2` and `tr S2` at one event time.
#[derive(Debug, Clone)]
pub struct EventSums {
    pub index: usize,
    pub time: f64,
    /// Stored sums are scaled by `exp(-shift)`.
    pub shift: f64,
    pub s0: f64,
    pub s1: Vec<f64>,
    /// Row-major `d x d`.
    pub s2: Vec<f64>,
    pub s2_trace: f64,
}

fn check_beta(dataset: &SurvivalDataset, beta: &[f64]) -> Result<()> {
    if beta.len() != dataset.dimension() {
        return Err(Error::DimensionMismatch {
            expected: dataset.dimension(),
            got: beta.len(),
        });
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NumericInput("beta has a non-finite entry".into()));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RiskSetState {
    pub fn build(dataset: &SurvivalDataset, beta: &[f64]) -> Result<Self> {
        check_beta(dataset, beta)?;
        let obs = dataset.observations();
        let d = dataset.dimension();
        if obs
            .iter()
            .any(|o| !o.time.is_finite() || o.covariates.iter().any(|z| !z.is_finite()))
        {
            return Err(Error::NumericInput("non-finite time or covariate".into()));
        }

        let eta: Vec<f64> = obs.iter().map(|o| dot(beta, &o.covariates)).collect();
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(Error::NumericInput("non-finite linear predictor".into()));
        }

        let mut order: Vec<usize> = (0..obs.len()).collect();
        order.sort_by(|&a, &b| obs[a].time.total_cmp(&obs[b].time).then(a.cmp(&b)));

        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d * d];
        let mut s2_trace = 0.0;
        let mut shift = f64::NEG_INFINITY;
        let mut events = Vec::with_capacity(dataset.event_count());

        // Walk tie groups from the latest time down.
        let mut end = order.len();
        while end > 0 {
            let t = obs[order[end - 1]].time;
            let mut start = end - 1;
            while start > 0 && obs[order[start - 1]].time == t {
                start -= 1;
            }
            for &i in &order[start..end] {
                if eta[i] > shift {
                    let r = (shift - eta[i]).exp();
                    s0 *= r;
                    s2_trace *= r;
                    s1.iter_mut().chain(s2.iter_mut()).for_each(|v| *v *= r);
                    shift = eta[i];
                }
                let w = (eta[i] - shift).exp();
                let z = &obs[i].covariates;
                s0 += w;
                for a in 0..d {
                    let wz = w * z[a];
                    s1[a] += wz;
                    for b in 0..d {
                        s2[a * d + b] += wz * z[b];
                    }
                }
                s2_trace += w * dot(z, z);
            }
            for &i in order[start..end].iter().rev() {
                if obs[i].event {
                    events.push(EventSums {
                        index: i,
                        time: t,
                        shift,
                        s0,
                        s1: s1.clone(),
                        s2: s2.clone(),
                        s2_trace,
                    });
                }
            }
            end = start;
        }
        events.reverse();

        Ok(Self {
            dimension: d,
            n: obs.len(),
            beta: beta.to_vec(),
            events,
        })
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn events(&self) -> &[EventSums] {
        &self.events
    }

    /// Unshifted `S0 = sum_{j at risk} exp(beta'Z_j)` at the `k`-th event.
    pub fn s0(&self, k: usize) -> f64 {
        self.events[k].s0 * self.events[k].shift.exp()
    }

    /// `log S0` at the `k`-th event, computed without overflow.
    pub fn log_s0(&self, k: usize) -> f64 {
        self.events[k].s0.ln() + self.events[k].shift
    }

    fn guard(&self, e: &EventSums) -> Result<()> {
        if e.s0 > 0.0 && e.s0.is_finite() {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "empty or degenerate risk set at event time {}",
                e.time
            )))
        }
    }
}

/// Sorted risk-set sums for `beta`; shared by the evaluations below.
pub fn risk_set_state(dataset: &SurvivalDataset, beta: &[f64]) -> Result<RiskSetState> {
    RiskSetState::build(dataset, beta)
}

/// Value, gradient, normalized negative Hessian and trace at one `beta`.
#[derive(Debug, Clone)]
pub struct PartialLikelihoodOutput {
    pub loglik: f64,
    pub score: DVector<f64>,
    pub neg_hessian_over_n: DMatrix<f64>,
    pub trace: f64,
}

impl PartialLikelihoodOutput {
    pub fn evaluate(dataset: &SurvivalDataset, beta: &[f64]) -> Result<Self> {
        let state = RiskSetState::build(dataset, beta)?;
        let obs = dataset.observations();
        let d = state.dimension;
        let mut loglik = 0.0;
        let mut score = DVector::zeros(d);
        let mut info = DMatrix::zeros(d, d);
        let mut trace = 0.0;
        for (k, e) in state.events.iter().enumerate() {
            state.guard(e)?;
            let z = &obs[e.index].covariates;
            loglik += dot(beta, z) - state.log_s0(k);
            let mean: Vec<f64> = e.s1.iter().map(|v| v / e.s0).collect();
            for a in 0..d {
                score[a] += z[a] - mean[a];
                for b in 0..d {
                    info[(a, b)] += e.s2[a * d + b] / e.s0 - mean[a] * mean[b];
                }
            }
            trace += e.s2_trace / e.s0 - dot(&mean, &mean);
        }
        let scale = if state.n > 0 {
            1.0 / state.n as f64
        } else {
            0.0
        };
        Ok(Self {
            loglik,
            score,
            neg_hessian_over_n: info * scale,
            trace: trace * scale,
        })
    }
}

/// `sum_{events i} [beta'Z_i - log sum_{j at risk} exp(beta'Z_j)]`.
pub fn log_partial_likelihood(dataset: &SurvivalDataset, beta: &[f64]) -> Result<f64> {
    let state = RiskSetState::build(dataset, beta)?;
    let obs = dataset.observations();
    state
        .events
        .iter()
        .enumerate()
        .try_fold(0.0, |acc, (k, e)| {
            state.guard(e)?;
            Ok(acc + dot(beta, &obs[e.index].covariates) - state.log_s0(k))
        })
}

/// `sum_{events i} (Z_i - Zbar(T_i, beta))`.
pub fn score(dataset: &SurvivalDataset, beta: &[f64]) -> Result<DVector<f64>> {
    let state = RiskSetState::build(dataset, beta)?;
    let obs = dataset.observations();
    let mut out = DVector::zeros(state.dimension);
    for e in &state.events {
        state.guard(e)?;
        for (a, z) in obs[e.index].covariates.iter().enumerate() {
            out[a] += z - e.s1[a] / e.s0;
        }
    }
    Ok(out)
}

/// `H(D; beta) = -(1/n) d^2 l_n / d beta^2`.
pub fn neg_hessian(dataset: &SurvivalDataset, beta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(PartialLikelihoodOutput::evaluate(dataset, beta)?.neg_hessian_over_n)
}

/// `tr H(D; beta)` from squared-norm sums only.
pub fn hessian_trace(dataset: &SurvivalDataset, beta: &[f64]) -> Result<f64> {
    check_beta(dataset, beta)?;
    let obs = dataset.observations();
    if obs.is_empty() {
        return Ok(0.0);
    }
    let d = dataset.dimension();
    let eta: Vec<f64> = obs.iter().map(|o| dot(beta, &o.covariates)).collect();
    if eta.iter().any(|e| !e.is_finite()) {
        return Err(Error::NumericInput("non-finite linear predictor".into()));
    }
    let mut shift = f64::NEG_INFINITY;
    let mut order: Vec<usize> = (0..obs.len()).collect();
    order.sort_by(|&a, &b| obs[a].time.total_cmp(&obs[b].time).then(a.cmp(&b)));

    let (mut s0, mut sq) = (0.0, 0.0);
    let mut s1 = vec![0.0; d];
    let mut total = 0.0;
    let mut end = order.len();
    while end > 0 {
        let t = obs[order[end - 1]].time;
        let mut start = end - 1;
        while start > 0 && obs[order[start - 1]].time == t {
            start -= 1;
        }
        for &i in &order[start..end] {
            if eta[i] > shift {
                let r = (shift - eta[i]).exp();
                s0 *= r;
                sq *= r;
                s1.iter_mut().for_each(|v| *v *= r);
                shift = eta[i];
            }
            let w = (eta[i] - shift).exp();
            let z = &obs[i].covariates;
            s0 += w;
            sq += w * dot(z, z);
            for (acc, zj) in s1.iter_mut().zip(z) {
                *acc += w * zj;
            }
        }
        let events = order[start..end].iter().filter(|&&i| obs[i].event).count();
        if events > 0 {
            if !(s0 > 0.0) {
                return Err(Error::Invariant(format!("empty risk set at time {t}")));
            }
            let mean_sq: f64 = s1.iter().map(|v| (v / s0).powi(2)).sum();
            total += events as f64 * (sq / s0 - mean_sq);
        }
        end = start;
    }
    Ok(total / obs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CensoredObservation;

    fn dataset_a() -> SurvivalDataset {
        SurvivalDataset::new(
            vec![
                CensoredObservation::new(0.2, true, vec![1.0]),
                CensoredObservation::new(0.5, true, vec![0.0]),
                CensoredObservation::new(0.8, false, vec![-1.0]),
            ],
            1,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn risk_set_counts_on_small_example() {
        let state = RiskSetState::build(&dataset_a(), &[0.0]).unwrap();
        assert_eq!(state.events().len(), 2);
        assert_eq!(state.s0(0), 3.0);
        assert_eq!(state.s0(1), 2.0);
    }

    #[test]
    fn single_observation() {
        let ds = SurvivalDataset::new(
            vec![CensoredObservation::new(0.3, true, vec![0.4, -0.2])],
            2,
            1.0,
        )
        .unwrap();
        let state = RiskSetState::build(&ds, &[0.0, 0.0]).unwrap();
        assert_eq!(state.s0(0), 1.0);
        let s = score(&ds, &[3.0, -1.0]).unwrap();
        assert!(s.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn small_example_values() {
        let ds = dataset_a();
        let out = PartialLikelihoodOutput::evaluate(&ds, &[0.0]).unwrap();
        assert!((out.loglik + (3f64.ln() + 2f64.ln())).abs() < 1e-12);
        assert!((out.score[0] - 1.5).abs() < 1e-12);
        assert!((out.neg_hessian_over_n[(0, 0)] - (2.0 / 3.0 + 0.25) / 3.0).abs() < 1e-12);
        assert!((hessian_trace(&ds, &[0.0]).unwrap() - 0.305_555_555_555_555_6).abs() < 1e-12);
        assert!(
            (log_partial_likelihood(&ds, &[0.0]).unwrap() + 1.791_759_469_228_055).abs() < 1e-12
        );
    }

    #[test]
    fn no_events_gives_zero() {
        let ds = SurvivalDataset::new(
            vec![
                CensoredObservation::new(0.2, false, vec![1.0]),
                CensoredObservation::new(0.5, false, vec![0.0]),
            ],
            1,
            1.0,
        )
        .unwrap();
        assert_eq!(log_partial_likelihood(&ds, &[0.7]).unwrap(), 0.0);
        assert_eq!(score(&ds, &[0.7]).unwrap()[0], 0.0);
        assert_eq!(hessian_trace(&ds, &[0.7]).unwrap(), 0.0);
    }

    #[test]
    fn identical_covariates_have_no_curvature() {
        let obs = (0..6)
            .map(|i| CensoredObservation::new(0.1 * (i + 1) as f64, i % 2 == 0, vec![0.3, -0.4]))
            .collect();
        let ds = SurvivalDataset::new(obs, 2, 1.0).unwrap();
        let h = neg_hessian(&ds, &[0.5, 0.5]).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-15));
        assert!(hessian_trace(&ds, &[0.5, 0.5]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn common_shift_of_linear_predictor_cancels() {
        // Adding the same vector to every covariate multiplies all weights by one constant.
        let base = dataset_a();
        let shifted = SurvivalDataset::new(
            base.observations()
                .iter()
                .map(|o| {
                    CensoredObservation::new(o.time, o.event, vec![o.covariates[0] * 0.5 + 0.4])
                })
                .collect(),
            1,
            1.0,
        )
        .unwrap();
        let scaled = SurvivalDataset::new(
            base.observations()
                .iter()
                .map(|o| CensoredObservation::new(o.time, o.event, vec![o.covariates[0] * 0.5]))
                .collect(),
            1,
            1.0,
        )
        .unwrap();
        let a = log_partial_likelihood(&shifted, &[1.3]).unwrap();
        let b = log_partial_likelihood(&scaled, &[1.3]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn large_linear_predictors_stay_finite() {
        let obs = (0..20)
            .map(|i| {
                CensoredObservation::new(i as f64, true, vec![if i % 2 == 0 { 1.0 } else { -1.0 }])
            })
            .collect();
        let ds = SurvivalDataset::new(obs, 1, 1.0).unwrap();
        let out = PartialLikelihoodOutput::evaluate(&ds, &[800.0]).unwrap();
        assert!(out.loglik.is_finite());
        assert!(out.score[0].is_finite());
        assert!(out.trace.is_finite() && out.trace >= 0.0);
    }

    #[test]
    fn ties_share_the_risk_set() {
        let ds = SurvivalDataset::new(
            vec![
                CensoredObservation::new(0.5, true, vec![1.0]),
                CensoredObservation::new(0.5, true, vec![0.0]),
                CensoredObservation::new(0.9, false, vec![0.5]),
            ],
            1,
            1.0,
        )
        .unwrap();
        let state = RiskSetState::build(&ds, &[0.0]).unwrap();
        assert_eq!(state.s0(0), 3.0);
        assert_eq!(state.s0(1), 3.0);
        assert_eq!(state.events()[0].index, 0);
        let ll = log_partial_likelihood(&ds, &[0.0]).unwrap();
        assert!((ll + 2.0 * 3f64.ln()).abs() < 1e-12);
        let tr = hessian_trace(&ds, &[0.3]).unwrap();
        let full = neg_hessian(&ds, &[0.3]).unwrap();
        assert!((tr - full.trace()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_beta() {
        assert!(matches!(
            score(&dataset_a(), &[0.0, 1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            log_partial_likelihood(&dataset_a(), &[f64::NAN]),
            Err(Error::NumericInput(_))
        ));
    }
}
