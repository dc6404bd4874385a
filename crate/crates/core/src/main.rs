use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dpsurv::data::{
    generate_cox_dataset, generate_hazard_sample, SimulationConfig, SurvivalDataset,
};
use dpsurv::harness::experiment::{
    self, offline_two_sample_threshold, write_rows, write_thresholds,
};
use dpsurv::harness::{ExperimentGrid, SingleTestRequest, TestKind, ThresholdMode};
use dpsurv::hazard::{dp_nelson_aalen, GridCurve};
use dpsurv::hypothesis::ScoreTestConfig;
use dpsurv::mechanism::{NoiseSource, PrivacyBudget};
use dpsurv::rng;
use dpsurv::two_sample::compare_curves;
use dpsurv::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dpsurv",
    version,
    about = "Differentially private tests for censored survival data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run one test on a dataset file.
    Test(TestArgs),
    /// Monte Carlo thresholds for every cell of a grid.
    Calibrate(CalibrateArgs),
    /// Run a simulation grid and report rejection proportions.
    PowerCurve(PowerCurveArgs),
    /// Privatize a dataset into a cumulative hazard curve (server side).
    Publish(PublishArgs),
    /// Compare two published curves (coordinator side).
    Compare(CompareArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Design {
    /// Cox model with uniform covariates.
    Cox,
    /// Covariate-free exponential sample with rate `baseline_rate + gamma`.
    Hazard,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "cox")]
    design: Design,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta_star: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    baseline_rate: f64,
    #[arg(long, default_value_t = 0.3)]
    censor_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "binary")]
    kind: String,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta0: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta1: Option<Vec<f64>>,
    /// Declared bound on covariate norms.
    #[arg(long, default_value_t = 1.0)]
    cz: f64,
    /// Binary: rejection threshold (default 0). Score: replaces the plug-in threshold.
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = ScoreTestConfig::default().c1)]
    c1: f64,
    #[arg(long, default_value_t = ScoreTestConfig::default().c2)]
    c2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_off: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// TOML grid file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',')]
    n_values: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    epsilon_values: Option<Vec<f64>>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    master_seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long)]
    calibrated: bool,
    #[arg(long)]
    noise_off: bool,
}

impl GridArgs {
    fn load(&self) -> Result<ExperimentGrid> {
        let mut g = ExperimentGrid::from_path(&self.config)?;
        if let Some(v) = &self.n_values {
            g.n_values = v.clone();
        }
        if let Some(v) = &self.epsilon_values {
            g.epsilon_values = v.clone();
        }
        if let Some(v) = self.delta {
            g.delta = v;
        }
        if let Some(v) = self.reps {
            g.reps = v;
        }
        if let Some(v) = self.master_seed {
            g.master_seed = v;
        }
        if let Some(v) = self.gamma {
            g.gamma = v;
        }
        if self.calibrated {
            g.threshold = ThresholdMode::Calibrated;
        }
        g.noise_off |= self.noise_off;
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Defaults to the grid's alpha.
    #[arg(long)]
    level: Option<f64>,
    /// Defaults to the grid's n_mc.
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct PowerCurveArgs {
    #[command(flatten)]
    grid: GridArgs,
    /// Per-rep rows; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-cell summary; stderr when omitted.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args)]
struct PublishArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    noise_off: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    curve1: PathBuf,
    #[arg(long)]
    curve2: PathBuf,
    #[arg(long)]
    n1: usize,
    #[arg(long)]
    n2: usize,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = dpsurv::two_sample::DEFAULT_C)]
    c: f64,
    /// Replaces the closed-form threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut rng = rng::stream(a.seed, 0);
    let ds = match a.design {
        Design::Cox => {
            let cfg = SimulationConfig {
                n: a.n,
                d: a.d,
                beta_star: a.beta_star.unwrap_or_else(|| vec![0.0; a.d]),
                baseline_rate: a.baseline_rate,
                censor_rate: a.censor_rate,
                truncate_at_one: true,
                gamma: a.gamma,
            };
            generate_cox_dataset(&cfg, &mut rng)?
        }
        Design::Hazard => {
            generate_hazard_sample(a.baseline_rate + a.gamma, a.censor_rate, a.n, &mut rng)?
        }
    };
    let mut out = sink(a.output.as_deref())?;
    ds.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn test(a: TestArgs) -> Result<()> {
    let kind: TestKind = a.kind.parse()?;
    let ds = SurvivalDataset::from_csv(open(&a.data)?, a.cz)?;
    let d = ds.dimension();
    let beta0 = a.beta0.unwrap_or_else(|| vec![0.0; d]);
    let beta1 = match (kind, a.beta1) {
        (_, Some(b)) => b,
        (TestKind::Binary, None) => {
            return Err(Error::InvalidConfig("binary test needs --beta1".into()))
        }
        (_, None) => vec![0.0; d],
    };
    let request = SingleTestRequest {
        kind,
        beta0,
        beta1,
        score: ScoreTestConfig {
            c1: a.c1,
            c2: a.c2,
            ..ScoreTestConfig::default()
        },
        threshold: a.threshold,
        covariate_bound: a.cz,
        noise_off: a.noise_off,
    };
    let row =
        experiment::run_single_test_on(&ds, &request, PrivacyBudget::pure(a.epsilon)?, a.seed)?;
    let mut out = sink(a.output.as_deref())?;
    write_rows(&mut out, &[row], !a.noise_off)?;
    out.flush()?;
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let grid = a.grid.load()?;
    let level = a.level.unwrap_or(grid.alpha);
    let entries = experiment::calibrate(&grid, level, a.n_mc.unwrap_or(grid.n_mc))?;
    let mut out = sink(a.output.as_deref())?;
    write_thresholds(&mut out, &entries)?;
    out.flush()?;
    Ok(())
}

fn power_curve(a: PowerCurveArgs) -> Result<()> {
    let grid = a.grid.load()?;
    let mut out = sink(a.output.as_deref())?;
    let summary = experiment::run_experiment(&grid, &mut out)?;
    out.flush()?;
    match a.summary {
        Some(p) => {
            let mut s = sink(Some(&p))?;
            summary.write_table(&mut s)?;
            s.flush()?;
        }
        None => summary.write_table(io::stderr().lock())?,
    }
    Ok(())
}

fn publish(a: PublishArgs) -> Result<()> {
    let ds = SurvivalDataset::from_csv(open(&a.data)?, 1.0)?;
    let budget = PrivacyBudget::new(a.epsilon, a.delta)?;
    let rng = rng::stream(a.seed, 0);
    let mut noise = if a.noise_off {
        NoiseSource::noise_off(rng)
    } else {
        NoiseSource::private(rng)
    };
    let curve = dp_nelson_aalen(&ds, budget, &mut noise)?;
    let mut out = sink(a.output.as_deref())?;
    curve.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let c1 = GridCurve::read_csv(BufReader::new(open(&a.curve1)?))?;
    let c2 = GridCurve::read_csv(BufReader::new(open(&a.curve2)?))?;
    let threshold = match a.threshold {
        Some(t) => t,
        None => {
            offline_two_sample_threshold(a.n1, a.n2, PrivacyBudget::new(a.epsilon, a.delta)?, a.c)?
        }
    };
    let (statistic, reject) = compare_curves(&c1, &c2, threshold);
    println!("statistic,threshold,reject");
    println!("{statistic},{threshold},{}", u8::from(reject));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Test(a) => test(a),
        Command::Calibrate(a) => calibrate(a),
        Command::PowerCurve(a) => power_curve(a),
        Command::Publish(a) => publish(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
