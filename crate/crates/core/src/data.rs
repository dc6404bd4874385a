//! Right-censored survival data, synthetic generators and neighbouring datasets.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{exponential, open_unit};

/// Relative slack when checking covariate norms against the declared bound.
const NORM_SLACK: f64 = 1e-12;

/// One subject: observed time, event indicator and a time-fixed covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CensoredObservation {
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

impl CensoredObservation {
    pub fn new(time: f64, event: bool, covariates: Vec<f64>) -> Self {
        Self {
            time,
            event,
            covariates,
        }
    }

    /// Covariate-less observation, as used by the cumulative-hazard estimator.
    pub fn bare(time: f64, event: bool) -> Self {
        Self::new(time, event, Vec::new())
    }

    pub fn covariate_norm(&self) -> f64 {
        self.covariates.iter().map(|z| z * z).sum::<f64>().sqrt()
    }

    /// At-risk indicator `Y(t) = 1{T >= t}`.
    pub fn at_risk(&self, t: f64) -> bool {
        self.time >= t
    }
}

/// A dataset of `n` observations sharing dimension `d` and covariate bound `C_Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    observations: Vec<CensoredObservation>,
    dimension: usize,
    covariate_bound: f64,
}

impl SurvivalDataset {
    /// Validates every observation against `dimension` and `covariate_bound`.
    pub fn new(
        observations: Vec<CensoredObservation>,
        dimension: usize,
        covariate_bound: f64,
    ) -> Result<Self> {
        if !(covariate_bound.is_finite() && covariate_bound >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "covariate bound must be finite and non-negative, got {covariate_bound}"
            )));
        }
        let ds = Self {
            observations,
            dimension,
            covariate_bound,
        };
        for (i, obs) in ds.observations.iter().enumerate() {
            ds.check(obs).map_err(|e| match e {
                Error::Validation { message, .. } => {
                    Error::validation(format!("observation {i}: {message}"))
                }
                other => other,
            })?;
        }
        Ok(ds)
    }

    pub fn empty(dimension: usize, covariate_bound: f64) -> Self {
        Self {
            observations: Vec::new(),
            dimension,
            covariate_bound,
        }
    }

    fn check(&self, obs: &CensoredObservation) -> Result<()> {
        if !(obs.time.is_finite() && obs.time >= 0.0) {
            return Err(Error::validation(format!(
                "time must be finite and >= 0, got {}",
                obs.time
            )));
        }
        if obs.covariates.len() != self.dimension {
            return Err(Error::DimensionMismatch {
                expected: self.dimension,
                got: obs.covariates.len(),
            });
        }
        if obs.covariates.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericInput("covariate is not finite".into()));
        }
        let norm = obs.covariate_norm();
        if norm > self.covariate_bound * (1.0 + NORM_SLACK) {
            return Err(Error::validation(format!(
                "covariate norm {norm} exceeds bound {}",
                self.covariate_bound
            )));
        }
        Ok(())
    }

    pub fn observations(&self) -> &[CensoredObservation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn covariate_bound(&self) -> f64 {
        self.covariate_bound
    }

    pub fn event_count(&self) -> usize {
        self.observations.iter().filter(|o| o.event).count()
    }

    /// Contiguous sub-dataset `[start, end)` in stored order.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            observations: self.observations[start..end].to_vec(),
            dimension: self.dimension,
            covariate_bound: self.covariate_bound,
        }
    }

    /// Splits into the first `ceil(n/2)` and the last `floor(n/2)` observations.
    pub fn split_halves(&self) -> (Self, Self) {
        let first = self.len().div_ceil(2);
        (self.slice(0, first), self.slice(first, self.len()))
    }

    /// Number of positions at which two equally sized datasets differ.
    pub fn hamming_distance(&self, other: &Self) -> usize {
        self.observations
            .iter()
            .zip(&other.observations)
            .filter(|(a, b)| a != b)
            .count()
            + self.len().abs_diff(other.len())
    }

    /// Reads `time,status,z1,...,zd`; `d` is inferred from the header.
    pub fn from_csv<R: Read>(reader: R, covariate_bound: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::at_line(1, e.to_string()))?
            .clone();
        if headers.is_empty() {
            return Err(Error::validation("dataset file is empty"));
        }
        if headers.len() < 2 || &headers[0] != "time" || &headers[1] != "status" {
            return Err(Error::at_line(1, "header must start with `time,status`"));
        }
        for (j, h) in headers.iter().skip(2).enumerate() {
            if h != format!("z{}", j + 1) {
                return Err(Error::at_line(
                    1,
                    format!("expected column `z{}`, found `{h}`", j + 1),
                ));
            }
        }
        let d = headers.len() - 2;
        let mut ds = Self::empty(d, covariate_bound);
        for record in rdr.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::at_line(line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::at_line(line, format!("cannot parse {what} `{s}`")))
            };
            let time = parse(&record[0], "time")?;
            let event = match &record[1] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::at_line(
                        line,
                        format!("status must be 0 or 1, got `{other}`"),
                    ))
                }
            };
            let covariates = (0..d)
                .map(|j| parse(&record[j + 2], "covariate"))
                .collect::<Result<Vec<_>>>()?;
            let obs = CensoredObservation::new(time, event, covariates);
            ds.check(&obs).map_err(|e| match e {
                Error::Validation { message, .. } => Error::at_line(line, message),
                other => Error::at_line(line, other.to_string()),
            })?;
            ds.observations.push(obs);
        }
        if ds.is_empty() {
            return Err(Error::validation("dataset file contains no observations"));
        }
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("time,status");
        for j in 1..=self.dimension {
            header.push_str(&format!(",z{j}"));
        }
        writeln!(w, "{header}")?;
        for obs in &self.observations {
            let mut line = format!("{},{}", obs.time, u8::from(obs.event));
            for z in &obs.covariates {
                line.push_str(&format!(",{z}"));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Parameters of the simulation designs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n: usize,
    pub d: usize,
    pub beta_star: Vec<f64>,
    /// Constant baseline hazard.
    pub baseline_rate: f64,
    pub censor_rate: f64,
    pub truncate_at_one: bool,
    /// Rate shift of the second sample in the two-sample design.
    pub gamma: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n: 0,
            d: 3,
            beta_star: vec![0.0; 3],
            baseline_rate: 1.0,
            censor_rate: 0.3,
            truncate_at_one: true,
            gamma: 0.0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta_star.len() != self.d {
            if self.d == 0 {
                return Err(Error::InvalidConfig(
                    "d = 0 requires an empty beta_star".into(),
                ));
            }
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: self.beta_star.len(),
            });
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate.is_finite()) {
            return Err(Error::InvalidConfig("baseline_rate must be > 0".into()));
        }
        if !(self.censor_rate > 0.0 && self.censor_rate.is_finite()) {
            return Err(Error::InvalidConfig("censor_rate must be > 0".into()));
        }
        if self.beta_star.iter().any(|b| !b.is_finite()) || !self.gamma.is_finite() {
            return Err(Error::NumericInput(
                "beta_star and gamma must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Cox model with constant baseline hazard and `Uniform(-1/sqrt d, 1/sqrt d)` covariates.
///
/// Draw order per subject is fixed (covariates, event, censoring) so a seed
/// determines the dataset exactly.
pub fn generate_cox_dataset<R: Rng + ?Sized>(
    config: &SimulationConfig,
    rng: &mut R,
) -> Result<SurvivalDataset> {
    config.validate()?;
    let d = config.d;
    let half_width = if d > 0 { 1.0 / (d as f64).sqrt() } else { 0.0 };
    let mut observations = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let z: Vec<f64> = (0..d)
            .map(|_| half_width * (2.0 * open_unit(rng) - 1.0))
            .collect();
        let eta: f64 = z.iter().zip(&config.beta_star).map(|(a, b)| a * b).sum();
        let latent = exponential(config.baseline_rate, rng) / eta.exp();
        let censor = exponential(config.censor_rate, rng);
        let (time, event) = if config.truncate_at_one {
            let cutoff = censor.min(1.0);
            (latent.min(cutoff), latent <= cutoff)
        } else {
            (latent.min(censor), latent <= censor)
        };
        observations.push(CensoredObservation::new(time, event, z));
    }
    Ok(SurvivalDataset {
        observations,
        dimension: d,
        covariate_bound: 1.0,
    })
}

/// Covariate-less exponential sample; anything surviving past 1 is recorded as censored at 1.
pub fn generate_hazard_sample<R: Rng + ?Sized>(
    rate: f64,
    censor_rate: f64,
    n: usize,
    rng: &mut R,
) -> Result<SurvivalDataset> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "rate must be > 0, got {rate}"
        )));
    }
    if !(censor_rate > 0.0 && censor_rate.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "censor_rate must be > 0, got {censor_rate}"
        )));
    }
    let observations = (0..n)
        .map(|_| {
            let latent = exponential(rate, rng);
            let censor = exponential(censor_rate, rng);
            let (time, event) = (latent.min(censor), latent <= censor);
            if time > 1.0 {
                CensoredObservation::bare(1.0, false)
            } else {
                CensoredObservation::bare(time, event)
            }
        })
        .collect();
    Ok(SurvivalDataset {
        observations,
        dimension: 0,
        covariate_bound: 1.0,
    })
}

/// Copy of `dataset` with observation `index` replaced.
pub fn neighboring_dataset(
    dataset: &SurvivalDataset,
    index: usize,
    replacement: CensoredObservation,
) -> Result<SurvivalDataset> {
    if index >= dataset.len() {
        return Err(Error::IndexOutOfRange {
            index,
            len: dataset.len(),
        });
    }
    dataset.check(&replacement)?;
    let mut out = dataset.clone();
    out.observations[index] = replacement;
    Ok(out)
}
