use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{
    generate_cox_dataset, generate_hazard_sample, SimulationConfig, SurvivalDataset,
};
use crate::error::{Error, Result};
use crate::harness::config::{ExperimentGrid, TestKind, ThresholdMode};
use crate::hypothesis::{
    binary_lrt_test, calibrate_threshold_mc, score_test_oracle, score_test_plugin, ScoreTestConfig,
    Tail,
};
use crate::mechanism::{NoiseSource, PrivacyBudget};
use crate::rng::{self, derive_seed, Domain, Stream};
use crate::two_sample::{compare_curves, run_two_sample_test, two_sample_threshold, ServerConfig};

pub const SCHEMA_VERSION: u32 = 1;
pub const NON_PRIVATE_STAMP: &str = "# NON-PRIVATE: privacy noise disabled";

/// One test decision in the output CSV. Field order is the column order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub test_kind: TestKind,
    pub n: usize,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub rep: usize,
    /// The released (noisy) statistic.
    pub statistic: f64,
    pub threshold: f64,
    pub reject: bool,
    pub seed: u64,
}

pub const RESULT_HEADER: [&str; 10] = [
    "test_kind",
    "n",
    "d",
    "epsilon",
    "delta",
    "rep",
    "statistic",
    "threshold",
    "reject",
    "seed",
];

impl ResultRow {
    fn record(&self) -> [String; 10] {
        [
            self.test_kind.to_string(),
            self.n.to_string(),
            self.d.to_string(),
            self.epsilon.to_string(),
            self.delta.to_string(),
            self.rep.to_string(),
            self.statistic.to_string(),
            self.threshold.to_string(),
            u8::from(self.reject).to_string(),
            self.seed.to_string(),
        ]
    }
}

/// Writes the schema comment, an optional NON-PRIVATE stamp, the header and `rows`.
pub fn write_rows<W: Write>(mut sink: W, rows: &[ResultRow], private: bool) -> Result<()> {
    writeln!(sink, "# schema_version={SCHEMA_VERSION}")?;
    if !private {
        writeln!(sink, "{NON_PRIVATE_STAMP}")?;
    }
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(RESULT_HEADER).map_err(io)?;
    for row in rows {
        w.write_record(row.record()).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub test_kind: TestKind,
    pub n: usize,
    pub epsilon: f64,
    pub reps: usize,
    pub rejections: usize,
    pub proportion: f64,
    /// `sqrt(p (1 - p) / reps)`.
    pub std_error: f64,
    pub threshold_mode: ThresholdMode,
    pub status: CellStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub cells: Vec<CellSummary>,
    pub private: bool,
}

impl ExperimentSummary {
    pub fn cell(&self, n: usize, epsilon: f64) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.n == n && c.epsilon == epsilon)
    }

    pub fn write_table<W: Write>(&self, mut w: W) -> Result<()> {
        if !self.private {
            writeln!(w, "{NON_PRIVATE_STAMP}")?;
        }
        writeln!(
            w,
            "test_kind,n,epsilon,reps,rejections,proportion,std_error,status"
        )?;
        for c in &self.cells {
            let status = match &c.status {
                CellStatus::Ok => "ok".to_string(),
                CellStatus::Failed(m) => format!("failed: {}", m.replace(',', ";")),
            };
            writeln!(
                w,
                "{},{},{},{},{},{:.4},{:.4},{}",
                c.test_kind,
                c.n,
                c.epsilon,
                c.reps,
                c.rejections,
                c.proportion,
                c.std_error,
                status
            )?;
        }
        Ok(())
    }
}

/// Seeds hang off the cell contents, so adding cells leaves existing ones untouched.
fn cell_key(n: usize, epsilon: f64) -> [u64; 2] {
    [n as u64, epsilon.to_bits()]
}

pub fn rep_seed(master_seed: u64, n: usize, epsilon: f64, rep: usize) -> u64 {
    let [a, b] = cell_key(n, epsilon);
    derive_seed(master_seed, Domain::Replication, &[a, b, rep as u64])
}

pub fn calibration_seed(master_seed: u64, n: usize, epsilon: f64) -> u64 {
    let [a, b] = cell_key(n, epsilon);
    derive_seed(master_seed, Domain::Calibration, &[a, b])
}

fn noise_source(grid: &ExperimentGrid, rng: Stream) -> NoiseSource<Stream> {
    if grid.noise_off {
        NoiseSource::noise_off(rng)
    } else {
        NoiseSource::private(rng)
    }
}

fn cox_config(grid: &ExperimentGrid, n: usize, beta: Vec<f64>) -> SimulationConfig {
    SimulationConfig {
        n,
        d: grid.d,
        beta_star: beta,
        baseline_rate: grid.baseline_rate,
        censor_rate: grid.censor_rate,
        truncate_at_one: true,
        gamma: grid.gamma,
    }
}

fn servers(
    grid: &ExperimentGrid,
    n: usize,
    budget: PrivacyBudget,
    gamma: f64,
    rng1: &mut Stream,
    rng2: &mut Stream,
) -> Result<(ServerConfig, ServerConfig)> {
    let a = generate_hazard_sample(grid.baseline_rate, grid.censor_rate, n, rng1)?;
    let b = generate_hazard_sample(grid.baseline_rate + gamma, grid.censor_rate, n, rng2)?;
    Ok((
        ServerConfig::new("server1", a, budget)?,
        ServerConfig::new("server2", b, budget)?,
    ))
}

/// Released statistic of one simulated dataset (under `beta`, or the grid's
/// `gamma` for two-sample). `tau` overrides the fixed threshold.
fn simulate_decision(
    grid: &ExperimentGrid,
    n: usize,
    epsilon: f64,
    seed: u64,
    beta: Vec<f64>,
    gamma: f64,
    tau: Option<f64>,
) -> Result<(f64, f64, bool)> {
    let budget = PrivacyBudget::new(epsilon, grid.delta)?;
    match grid.test_kind {
        TestKind::Binary => {
            let mut s = rng::stream(seed, 0);
            let ds = generate_cox_dataset(&cox_config(grid, n, beta), &mut s)?;
            let threshold = tau.unwrap_or(grid.fixed_threshold);
            let pure = PrivacyBudget::pure(epsilon)?;
            let r = binary_lrt_test(
                &ds,
                &grid.beta0(),
                &grid.beta1()?,
                pure,
                &mut noise_source(grid, s),
                threshold,
            )?;
            Ok((r.released(), r.threshold, r.reject))
        }
        TestKind::Score => {
            let mut s = rng::stream(seed, 0);
            let ds = generate_cox_dataset(&cox_config(grid, n, beta), &mut s)?;
            let pure = PrivacyBudget::pure(epsilon)?;
            let mut noise = noise_source(grid, s);
            let r = match tau {
                Some(t) => score_test_oracle(&ds, &grid.beta0(), pure, t, &mut noise)?,
                None => {
                    score_test_plugin(&ds, &grid.beta0(), pure, &grid.score_config(), &mut noise)?
                }
            };
            Ok((r.released(), r.threshold, r.reject))
        }
        TestKind::TwoSample => {
            let (mut r1, mut r2) = (rng::stream(seed, 1), rng::stream(seed, 2));
            let (s1, s2) = servers(grid, n, budget, gamma, &mut r1, &mut r2)?;
            let (mut n1, mut n2) = (noise_source(grid, r1), noise_source(grid, r2));
            let r = run_two_sample_test(&s1, &s2, grid.c, &mut n1, &mut n2)?;
            match tau {
                None => Ok((r.statistic, r.threshold, r.reject)),
                Some(t) => {
                    let (stat, reject) = compare_curves(&r.curves[0], &r.curves[1], t);
                    Ok((stat, t, reject))
                }
            }
        }
    }
}

fn null_tail(kind: TestKind) -> Tail {
    match kind {
        TestKind::Binary => Tail::Lower,
        TestKind::Score | TestKind::TwoSample => Tail::Upper,
    }
}

/// Monte Carlo threshold for one cell: quantile of the released statistic
/// when data come from the null (`beta0`, or `gamma = 0`).
pub fn calibrate_cell(
    grid: &ExperimentGrid,
    n: usize,
    epsilon: f64,
    level: f64,
    n_mc: usize,
    seed: u64,
) -> Result<f64> {
    let sampler = |s: &mut Stream| -> Result<f64> {
        let draw_seed = rand::Rng::random::<u64>(s);
        simulate_decision(grid, n, epsilon, draw_seed, grid.beta0(), 0.0, Some(0.0)).map(|r| r.0)
    };
    calibrate_threshold_mc(
        sampler,
        level,
        n_mc,
        &mut rng::stream(seed, 0),
        null_tail(grid.test_kind),
    )
}

/// One line of a threshold file.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdEntry {
    pub test_kind: TestKind,
    pub n: usize,
    pub d: usize,
    pub epsilon: f64,
    pub delta: f64,
    pub level: f64,
    pub threshold: f64,
}

pub fn write_thresholds<W: Write>(mut w: W, entries: &[ThresholdEntry]) -> Result<()> {
    writeln!(w, "# schema_version={SCHEMA_VERSION}")?;
    writeln!(w, "test_kind,n,d,epsilon,delta,level,threshold")?;
    for e in entries {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            e.test_kind, e.n, e.d, e.epsilon, e.delta, e.level, e.threshold
        )?;
    }
    Ok(())
}

/// Calibrated thresholds for every cell of the grid at `level`.
pub fn calibrate(grid: &ExperimentGrid, level: f64, n_mc: usize) -> Result<Vec<ThresholdEntry>> {
    grid.validate()?;
    cells(grid)
        .into_iter()
        .map(|(n, epsilon)| {
            let threshold = calibrate_cell(
                grid,
                n,
                epsilon,
                level,
                n_mc,
                calibration_seed(grid.master_seed, n, epsilon),
            )?;
            Ok(ThresholdEntry {
                test_kind: grid.test_kind,
                n,
                d: grid.data_dimension(),
                epsilon,
                delta: grid.delta,
                level,
                threshold,
            })
        })
        .collect()
}

/// Cell-major order: `n` outer, `epsilon` inner.
pub fn cells(grid: &ExperimentGrid) -> Vec<(usize, f64)> {
    grid.n_values
        .iter()
        .flat_map(|&n| grid.epsilon_values.iter().map(move |&e| (n, e)))
        .collect()
}

fn is_cell_failure(e: &Error) -> bool {
    matches!(e, Error::Infeasible(_) | Error::Server { .. })
}

/// Runs every cell and rep, writes the rows to `sink` in canonical order and
/// returns the per-cell summary.
pub fn run_experiment<W: Write>(grid: &ExperimentGrid, sink: W) -> Result<ExperimentSummary> {
    let (rows, summary) = simulate_grid(grid)?;
    write_rows(sink, &rows, summary.private)?;
    Ok(summary)
}

/// Same as [`run_experiment`] without writing.
pub fn simulate_grid(grid: &ExperimentGrid) -> Result<(Vec<ResultRow>, ExperimentSummary)> {
    grid.validate()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (n, epsilon) in cells(grid) {
        let outcome = run_cell(grid, n, epsilon);
        let (cell_rows, status) = match outcome {
            Ok(r) => (r, CellStatus::Ok),
            Err(e) if is_cell_failure(&e) => (Vec::new(), CellStatus::Failed(e.to_string())),
            Err(e) => return Err(e),
        };
        let rejections = cell_rows.iter().filter(|r| r.reject).count();
        let (proportion, std_error) = if cell_rows.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let p = rejections as f64 / cell_rows.len() as f64;
            (p, (p * (1.0 - p) / cell_rows.len() as f64).sqrt())
        };
        summaries.push(CellSummary {
            test_kind: grid.test_kind,
            n,
            epsilon,
            reps: cell_rows.len(),
            rejections,
            proportion,
            std_error,
            threshold_mode: grid.threshold,
            status,
        });
        rows.extend(cell_rows);
    }
    Ok((
        rows,
        ExperimentSummary {
            cells: summaries,
            private: !grid.noise_off,
        },
    ))
}

fn run_cell(grid: &ExperimentGrid, n: usize, epsilon: f64) -> Result<Vec<ResultRow>> {
    let tau = match grid.threshold {
        ThresholdMode::Fixed => None,
        ThresholdMode::Calibrated => Some(calibrate_cell(
            grid,
            n,
            epsilon,
            grid.alpha,
            grid.n_mc,
            calibration_seed(grid.master_seed, n, epsilon),
        )?),
    };
    (0..grid.reps)
        .into_par_iter()
        .map(|rep| {
            let seed = rep_seed(grid.master_seed, n, epsilon, rep);
            let (statistic, threshold, reject) =
                simulate_decision(grid, n, epsilon, seed, grid.beta_star(), grid.gamma, tau)?;
            Ok(ResultRow {
                test_kind: grid.test_kind,
                n,
                d: grid.data_dimension(),
                epsilon,
                delta: grid.delta,
                rep,
                statistic,
                threshold,
                reject,
                seed,
            })
        })
        .collect()
}

/// What to run on a dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleTestRequest {
    pub kind: TestKind,
    pub beta0: Vec<f64>,
    /// Used by the binary test only.
    pub beta1: Vec<f64>,
    pub score: ScoreTestConfig,
    /// Binary: defaults to 0. Score: replaces the plug-in threshold when set.
    pub threshold: Option<f64>,
    pub covariate_bound: f64,
    pub noise_off: bool,
}

/// Loads a dataset CSV and runs one test on it with stream `seed`.
pub fn run_single_test(
    path: &Path,
    request: &SingleTestRequest,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<ResultRow> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let ds = SurvivalDataset::from_csv(file, request.covariate_bound)?;
    run_single_test_on(&ds, request, budget, seed)
}

pub fn run_single_test_on(
    ds: &SurvivalDataset,
    request: &SingleTestRequest,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<ResultRow> {
    let rng = rng::stream(seed, 0);
    let mut noise = if request.noise_off {
        NoiseSource::noise_off(rng)
    } else {
        NoiseSource::private(rng)
    };
    let pure = PrivacyBudget::pure(budget.epsilon)?;
    let r = match request.kind {
        TestKind::Binary => binary_lrt_test(
            ds,
            &request.beta0,
            &request.beta1,
            pure,
            &mut noise,
            request.threshold.unwrap_or(0.0),
        )?,
        TestKind::Score => match request.threshold {
            Some(t) => score_test_oracle(ds, &request.beta0, pure, t, &mut noise)?,
            None => score_test_plugin(ds, &request.beta0, pure, &request.score, &mut noise)?,
        },
        TestKind::TwoSample => return Err(Error::InvalidConfig(
            "the two-sample test runs on two servers; publish a curve per server and compare them"
                .into(),
        )),
    };
    Ok(ResultRow {
        test_kind: request.kind,
        n: ds.len(),
        d: ds.dimension(),
        epsilon: budget.epsilon,
        delta: r.budget.delta,
        rep: 0,
        statistic: r.released(),
        threshold: r.threshold,
        reject: r.reject,
        seed,
    })
}

/// Fixed threshold for two exchanged curves of sizes `n1`, `n2`.
pub fn offline_two_sample_threshold(
    n1: usize,
    n2: usize,
    budget: PrivacyBudget,
    c: f64,
) -> Result<f64> {
    two_sample_threshold(
        n1,
        n2,
        budget.epsilon,
        budget.epsilon,
        budget.delta,
        budget.delta,
        c,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_grid(reps: usize) -> ExperimentGrid {
        let mut g = ExperimentGrid::new(TestKind::Binary, vec![200], vec![1.0], reps, 11);
        g.beta_star = Some(vec![0.2; 3]);
        g.beta1 = Some(vec![0.2; 3]);
        g
    }

    #[test]
    fn one_rep_one_row() {
        let mut out = Vec::new();
        let summary = run_experiment(&binary_grid(1), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("# schema_version=1\n"));
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 2);
        assert_eq!(data[0], RESULT_HEADER.join(","));
        assert_eq!(summary.cells.len(), 1);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let mut g = binary_grid(8);
        g.n_values = vec![150, 250];
        let (mut a, mut b) = (Vec::new(), Vec::new());
        run_experiment(&g, &mut a).unwrap();
        run_experiment(&g, &mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adding_cells_keeps_existing_rows() {
        let g = binary_grid(4);
        let mut wider = g.clone();
        wider.n_values = vec![100, 200];
        let (a, _) = simulate_grid(&g).unwrap();
        let (b, _) = simulate_grid(&wider).unwrap();
        assert_eq!(a[..], b[4..]);
    }

    #[test]
    fn summary_matches_row_means() {
        let (rows, summary) = simulate_grid(&binary_grid(20)).unwrap();
        let mean = rows
            .iter()
            .map(|r| f64::from(u8::from(r.reject)))
            .sum::<f64>()
            / rows.len() as f64;
        assert_eq!(summary.cells[0].proportion, mean);
    }

    #[test]
    fn noise_off_is_stamped() {
        let mut g = binary_grid(1);
        g.noise_off = true;
        let mut out = Vec::new();
        let s = run_experiment(&g, &mut out).unwrap();
        assert!(!s.private);
        assert!(String::from_utf8(out).unwrap().contains(NON_PRIVATE_STAMP));
    }

    #[test]
    fn infeasible_two_sample_cell_is_marked_failed() {
        let mut g = ExperimentGrid::new(TestKind::TwoSample, vec![5, 400], vec![1.0], 2, 3);
        g.gamma = 1.0;
        let (rows, summary) = simulate_grid(&g).unwrap();
        assert!(matches!(summary.cells[0].status, CellStatus::Failed(_)));
        assert_eq!(summary.cells[1].status, CellStatus::Ok);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn constant_statistic_calibrates_to_itself() {
        // With noise off and beta0 = beta1 the released binary statistic is exactly 0.
        let mut g = binary_grid(1);
        g.beta1 = Some(vec![0.0; 3]);
        g.noise_off = true;
        let t = calibrate_cell(&g, 100, 1.0, 0.15, 50, 1).unwrap();
        assert_eq!(t, 0.0);
    }
}
