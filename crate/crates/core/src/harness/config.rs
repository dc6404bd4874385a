use std::fmt;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::hypothesis::ScoreTestConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Binary,
    Score,
    TwoSample,
}

impl fmt::Display for TestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestKind::Binary => "binary",
            TestKind::Score => "score",
            TestKind::TwoSample => "two_sample",
        })
    }
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(TestKind::Binary),
            "score" => Ok(TestKind::Score),
            "two_sample" | "two-sample" => Ok(TestKind::TwoSample),
            other => Err(Error::InvalidConfig(format!("unknown test kind {other:?}"))),
        }
    }
}

/// How each cell's rejection threshold is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Binary: `fixed_threshold` (0 by default). Score: plug-in trace
    /// threshold. Two-sample: closed-form threshold with constant `c`.
    #[default]
    Fixed,
    /// Monte Carlo quantile of the released statistic under the null.
    Calibrated,
}

fn default_delta() -> f64 {
    1e-3
}
fn default_d() -> usize {
    3
}
fn default_one() -> f64 {
    1.0
}
fn default_censor_rate() -> f64 {
    0.3
}
fn default_c() -> f64 {
    crate::two_sample::DEFAULT_C
}
fn default_c1() -> f64 {
    ScoreTestConfig::default().c1
}
fn default_c2() -> f64 {
    ScoreTestConfig::default().c2
}
fn default_alpha() -> f64 {
    ScoreTestConfig::default().alpha
}
fn default_n_mc() -> usize {
    ScoreTestConfig::default().n_mc
}

/// A simulation grid read from a TOML file. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub test_kind: TestKind,
    pub n_values: Vec<usize>,
    pub epsilon_values: Vec<f64>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub reps: usize,
    pub master_seed: u64,
    #[serde(default = "default_d")]
    pub d: usize,
    /// Data-generating coefficients; zeros when omitted.
    #[serde(default)]
    pub beta_star: Option<Vec<f64>>,
    /// Null coefficients; zeros when omitted.
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    /// Alternative of the binary test; required for `binary`.
    #[serde(default)]
    pub beta1: Option<Vec<f64>>,
    #[serde(default = "default_one")]
    pub covariate_bound: f64,
    #[serde(default = "default_one")]
    pub baseline_rate: f64,
    #[serde(default = "default_censor_rate")]
    pub censor_rate: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "default_c1")]
    pub c1: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    /// Level of calibrated thresholds.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default)]
    pub threshold: ThresholdMode,
    /// Threshold of the binary test in fixed mode.
    #[serde(default)]
    pub fixed_threshold: f64,
    #[serde(default)]
    pub noise_off: bool,
}

impl ExperimentGrid {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let grid: Self =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Defaults for everything except the fields that have none.
    pub fn new(
        test_kind: TestKind,
        n_values: Vec<usize>,
        epsilon_values: Vec<f64>,
        reps: usize,
        master_seed: u64,
    ) -> Self {
        Self {
            test_kind,
            n_values,
            epsilon_values,
            delta: default_delta(),
            reps,
            master_seed,
            d: default_d(),
            beta_star: None,
            beta0: None,
            beta1: None,
            covariate_bound: 1.0,
            baseline_rate: 1.0,
            censor_rate: default_censor_rate(),
            gamma: 0.0,
            c1: default_c1(),
            c2: default_c2(),
            c: default_c(),
            alpha: default_alpha(),
            n_mc: default_n_mc(),
            threshold: ThresholdMode::Fixed,
            fixed_threshold: 0.0,
            noise_off: false,
        }
    }

    pub fn beta_star(&self) -> Vec<f64> {
        self.beta_star.clone().unwrap_or_else(|| vec![0.0; self.d])
    }

    pub fn beta0(&self) -> Vec<f64> {
        self.beta0.clone().unwrap_or_else(|| vec![0.0; self.d])
    }

    pub fn beta1(&self) -> Result<Vec<f64>> {
        self.beta1
            .clone()
            .ok_or_else(|| Error::InvalidConfig("binary test needs beta1".into()))
    }

    /// Dimension of the emitted datasets (0 for the covariate-free two-sample design).
    pub fn data_dimension(&self) -> usize {
        match self.test_kind {
            TestKind::TwoSample => 0,
            _ => self.d,
        }
    }

    pub fn score_config(&self) -> ScoreTestConfig {
        ScoreTestConfig {
            c1: self.c1,
            c2: self.c2,
            alpha: self.alpha,
            n_mc: self.n_mc,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.reps == 0 {
            return bad("reps must be at least 1");
        }
        if self.n_values.is_empty() || self.epsilon_values.is_empty() {
            return bad("n_values and epsilon_values must be nonempty");
        }
        if self.n_values.contains(&0) {
            return bad("sample sizes must be at least 1");
        }
        if self
            .epsilon_values
            .iter()
            .any(|e| !(*e > 0.0 && e.is_finite()))
        {
            return bad("epsilon values must be positive and finite");
        }
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1)");
        }
        if self.test_kind == TestKind::TwoSample && self.delta <= 0.0 {
            return bad("the two-sample test needs delta > 0");
        }
        for (name, v) in [
            ("beta_star", &self.beta_star),
            ("beta0", &self.beta0),
            ("beta1", &self.beta1),
        ] {
            if let Some(v) = v {
                if v.len() != self.d {
                    return Err(Error::InvalidConfig(format!(
                        "{name} has {} entries but d = {}",
                        v.len(),
                        self.d
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidConfig(format!("{name} must be finite")));
                }
            }
        }
        if self.test_kind == TestKind::Binary {
            self.beta1()?;
        }
        if !(self.covariate_bound > 0.0 && self.covariate_bound.is_finite()) {
            return bad("covariate_bound must be positive");
        }
        if !(self.baseline_rate > 0.0 && self.censor_rate > 0.0) {
            return bad("rates must be positive");
        }
        if !(self.baseline_rate + self.gamma > 0.0) {
            return bad("baseline_rate + gamma must be positive");
        }
        if !(self.c > 0.0) {
            return bad("c must be positive");
        }
        if !self.fixed_threshold.is_finite() {
            return bad("fixed_threshold must be finite");
        }
        self.score_config().validate()
    }
}
