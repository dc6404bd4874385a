//! Private Nelson–Aalen cumulative hazard on a dyadic tree, and the classical estimator.
//!
//! The first `floor(0.05 n)` observations privately estimate the probability of
//! still being at risk at time 1; that estimate floors every risk-set
//! denominator. The remaining `n'` observations fill `2^h` leaf increments over
//! `[0, 1]`, partial sums are formed bottom-up, and every node gets
//! independent Gaussian noise. A prefix `[0, m / 2^h)` is the sum of at most
//! `h` nodes, one per set bit of `m`.

use std::io::{BufRead, Write};

use rand::Rng;

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::mechanism::{BudgetLedger, NoiseSource, PrivacyBudget};

/// Fraction of the sample spent on the at-risk estimate.
pub const AT_RISK_FRACTION: f64 = 0.05;
/// Ratio between the denominator floor and the at-risk estimate.
pub const CLAMP_RATIO: f64 = 0.9;

/// A curve that is constant on each cell `[m / 2^h, (m + 1) / 2^h)`.
pub trait DyadicStep {
    fn depth(&self) -> u32;

    /// Value on cell `m`, `0 <= m < 2^depth`.
    fn cell_value(&self, m: usize) -> f64;

    fn cells(&self) -> usize {
        1usize << self.depth()
    }
}

/// Index of the cell containing `t`, with `t = 1` mapped to the last cell.
pub fn cell_index(depth: u32, t: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidConfig(format!(
            "t must lie in [0, 1], got {t}"
        )));
    }
    let cells = 1usize << depth;
    Ok(((t * cells as f64).floor() as usize).min(cells - 1))
}

/// Private cumulative hazard released by one server.
#[derive(Debug, Clone, PartialEq)]
pub struct DPHazardCurve {
    pub p_hat: f64,
    pub n_prime: usize,
    /// Denominator floor fraction `c`, so the floor is `c n'`.
    pub clamp: f64,
    /// True when `0.9 p_hat` fell below `1 / n'` and was raised to it.
    pub clamp_floored: bool,
    pub depth: u32,
    /// `tree[l - 1][m - 1]` holds node `x_{l,m}` after noise.
    tree: Vec<Vec<f64>>,
    pub budget: PrivacyBudget,
    pub ledger: BudgetLedger,
    pub private: bool,
}

/// Tree depth `floor(0.5 log2(min{n', (n' eps)^2}))`.
pub fn tree_depth(n_prime: usize, epsilon: f64) -> i64 {
    let np = n_prime as f64;
    let arg = np.min(np * np * epsilon * epsilon);
    if arg <= 0.0 {
        return i64::MIN;
    }
    (0.5 * arg.log2()).floor() as i64
}

/// Per-node Gaussian variance of the tree.
pub fn tree_noise_variance(clamp: f64, n_prime: usize, depth: u32, budget: PrivacyBudget) -> f64 {
    let eps = budget.epsilon;
    let np = n_prime as f64;
    (1.0 / clamp.powi(4) + 3.0 / clamp.powi(2)) * (2.0 * (1.0 / budget.delta).ln() / eps + 1.0)
        / (np * np * eps / depth as f64)
}

/// Builds the private curve from a covariate-less dataset.
pub fn dp_nelson_aalen<R: Rng>(
    dataset: &SurvivalDataset,
    budget: PrivacyBudget,
    noise: &mut NoiseSource<R>,
) -> Result<DPHazardCurve> {
    if dataset.dimension() != 0 {
        return Err(Error::InvalidConfig(
            "the cumulative hazard estimator takes covariate-less data".into(),
        ));
    }
    if budget.delta <= 0.0 {
        return Err(Error::InvalidConfig("delta must be positive".into()));
    }
    if !(budget.epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let obs = dataset.observations();
    let n = obs.len();
    let n_head = (AT_RISK_FRACTION * n as f64).floor() as usize;
    let n_prime = n - n_head;
    if n_head == 0 {
        return Err(Error::Infeasible(format!(
            "n = {n} leaves no observations for the at-risk estimate"
        )));
    }
    let depth = tree_depth(n_prime, budget.epsilon);
    if depth < 1 {
        return Err(Error::Infeasible(format!(
            "tree depth {depth} < 1 for n' = {n_prime}, epsilon = {}",
            budget.epsilon
        )));
    }
    let depth = depth as u32;

    // Step 1: private at-risk proportion at t = 1 from the head.
    let at_risk = obs[..n_head].iter().filter(|o| o.at_risk(1.0)).count();
    let p_std = (2.0 * (1.25 / budget.delta).ln()).sqrt() / (n as f64 * budget.epsilon);
    let p_hat = at_risk as f64 / n_head as f64 + noise.gaussian(p_std)?;

    let floor = 1.0 / n_prime as f64;
    let raw_clamp = CLAMP_RATIO * p_hat;
    let clamp_floored = !(raw_clamp >= floor);
    let clamp = if clamp_floored { floor } else { raw_clamp };

    // Step 4: leaf increments from the tail.
    let tail = &obs[n_head..];
    let mut times: Vec<f64> = tail.iter().map(|o| o.time).collect();
    times.sort_by(f64::total_cmp);
    let cells = 1usize << depth;
    let denominator_floor = clamp * n_prime as f64;
    let mut leaves = vec![0.0; cells];
    for o in tail.iter().filter(|o| o.event && o.time <= 1.0) {
        let at_risk = n_prime - times.partition_point(|&t| t < o.time);
        let m = ((o.time * cells as f64).floor() as usize).min(cells - 1);
        leaves[m] += 1.0 / denominator_floor.max(at_risk as f64);
    }

    // Steps 5-8: partial sums, level h is the leaves.
    let mut tree = vec![Vec::new(); depth as usize];
    tree[depth as usize - 1] = leaves;
    for l in (1..depth as usize).rev() {
        let child = &tree[l];
        let parent: Vec<f64> = child.chunks_exact(2).map(|p| p[0] + p[1]).collect();
        tree[l - 1] = parent;
    }

    // Steps 10-12.
    let node_std = tree_noise_variance(clamp, n_prime, depth, budget).sqrt();
    for level in tree.iter_mut() {
        for x in level.iter_mut() {
            *x += noise.gaussian(node_std)?;
        }
    }

    let mut ledger = BudgetLedger::new();
    ledger.charge("gaussian:at-risk-proportion", 0..n_head, budget);
    ledger.charge("gaussian:dyadic-tree", n_head..n, budget);
    Ok(DPHazardCurve {
        p_hat,
        n_prime,
        clamp,
        clamp_floored,
        depth,
        tree,
        budget: ledger.total(),
        ledger,
        private: noise.is_private(),
    })
}

impl DPHazardCurve {
    /// Node `x_{l,m}`, 1-based as in the tree layout.
    pub fn node(&self, level: u32, m: usize) -> f64 {
        self.tree[level as usize - 1][m - 1]
    }

    pub fn node_count(&self) -> usize {
        self.tree.iter().map(Vec::len).sum()
    }

    /// Sum of the first `m` leaves assembled from the nodes picked by the bits of `m`.
    fn prefix(&self, m: usize) -> f64 {
        let h = self.depth;
        (1..=h)
            .filter(|l| (m >> (h - l)) & 1 == 1)
            .map(|l| self.node(l, m >> (h - l)))
            .sum()
    }

    /// `max{0, sum of selected nodes}` at `t`.
    pub fn evaluate(&self, t: f64) -> Result<f64> {
        let m = cell_index(self.depth, t)?;
        Ok(self.prefix(m).max(0.0))
    }

    /// `grid_index,t_left,value` for every cell.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        GridCurve::from_step(self).write_csv(w)
    }
}

impl DyadicStep for DPHazardCurve {
    fn depth(&self) -> u32 {
        self.depth
    }

    fn cell_value(&self, m: usize) -> f64 {
        self.prefix(m).max(0.0)
    }
}

/// Cell values of an exchanged or reference curve.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCurve {
    depth: u32,
    values: Vec<f64>,
}

impl GridCurve {
    pub fn new(depth: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != 1usize << depth {
            return Err(Error::validation(format!(
                "depth {depth} needs {} cells, got {}",
                1usize << depth,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericInput("curve value is not finite".into()));
        }
        Ok(Self { depth, values })
    }

    pub fn from_step<C: DyadicStep + ?Sized>(curve: &C) -> Self {
        Self {
            depth: curve.depth(),
            values: (0..curve.cells()).map(|m| curve.cell_value(m)).collect(),
        }
    }

    /// Samples `f` at the left end of every cell.
    pub fn from_fn(depth: u32, f: impl Fn(f64) -> f64) -> Result<Self> {
        let cells = 1usize << depth;
        Self::new(
            depth,
            (0..cells).map(|m| f(m as f64 / cells as f64)).collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "grid_index,t_left,value")?;
        let cells = self.values.len() as f64;
        for (m, v) in self.values.iter().enumerate() {
            writeln!(w, "{m},{},{v}", m as f64 / cells)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::at_line(1, e.to_string()))?;
        if headers.iter().collect::<Vec<_>>() != ["grid_index", "t_left", "value"] {
            return Err(Error::at_line(
                1,
                "header must be `grid_index,t_left,value`",
            ));
        }
        let mut values = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| {
                Error::at_line(e.position().map(|p| p.line()).unwrap_or(0), e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let idx: usize = record[0]
                .parse()
                .map_err(|_| Error::at_line(line, "bad grid_index"))?;
            if idx != values.len() {
                return Err(Error::at_line(
                    line,
                    format!("expected grid_index {}", values.len()),
                ));
            }
            let v: f64 = record[2]
                .parse()
                .map_err(|_| Error::at_line(line, "bad value"))?;
            values.push(v);
        }
        let cells = values.len();
        if cells < 2 || !cells.is_power_of_two() {
            return Err(Error::validation(format!(
                "curve must have 2^h cells with h >= 1, got {cells}"
            )));
        }
        Self::new(cells.trailing_zeros(), values)
    }
}

impl DyadicStep for GridCurve {
    fn depth(&self) -> u32 {
        self.depth
    }

    fn cell_value(&self, m: usize) -> f64 {
        self.values[m]
    }
}

/// `sup_t |a(t) - b(t)|`, exact on the finer of the two grids.
pub fn sup_distance<A, B>(a: &A, b: &B) -> f64
where
    A: DyadicStep + ?Sized,
    B: DyadicStep + ?Sized,
{
    let depth = a.depth().max(b.depth());
    let (sa, sb) = (depth - a.depth(), depth - b.depth());
    (0..1usize << depth)
        .map(|m| (a.cell_value(m >> sa) - b.cell_value(m >> sb)).abs())
        .fold(0.0, f64::max)
}

/// Right-continuous step function on `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl StepFunction {
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Level at `t`: the last value whose breakpoint is `<= t`, or 0.
    pub fn evaluate(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b <= t) {
            0 => 0.0,
            k => self.values[k - 1],
        }
    }

    /// Level just before `t`.
    pub fn evaluate_left(&self, t: f64) -> f64 {
        match self.breakpoints.partition_point(|&b| b < t) {
            0 => 0.0,
            k => self.values[k - 1],
        }
    }
}

/// Classical Nelson–Aalen `sum_{events <= t} 1 / #{j : T_j >= T_i}` on `[0, 1]`.
pub fn nelson_aalen(dataset: &SurvivalDataset) -> StepFunction {
    let obs = dataset.observations();
    let mut times: Vec<f64> = obs.iter().map(|o| o.time).collect();
    times.sort_by(f64::total_cmp);
    let mut events: Vec<f64> = obs
        .iter()
        .filter(|o| o.event && o.time <= 1.0)
        .map(|o| o.time)
        .collect();
    events.sort_by(f64::total_cmp);

    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    let mut cumulative = 0.0;
    for t in events {
        let at_risk = times.len() - times.partition_point(|&s| s < t);
        cumulative += 1.0 / at_risk as f64;
        if breakpoints.last() == Some(&t) {
            *values.last_mut().unwrap() = cumulative;
        } else {
            breakpoints.push(t);
            values.push(cumulative);
        }
    }
    StepFunction {
        breakpoints,
        values,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_hazard_sample, CensoredObservation};
    use crate::rng::stream;

    fn budget(eps: f64, delta: f64) -> PrivacyBudget {
        PrivacyBudget::new(eps, delta).unwrap()
    }

    #[test]
    fn depth_examples() {
        assert_eq!(tree_depth(4750, 1.0), 6);
        assert_eq!(tree_depth(4750, 0.01), 5);
        assert!(tree_depth(1, 1.0) < 1);
    }

    #[test]
    fn infeasible_and_invalid_inputs() {
        let ds = generate_hazard_sample(1.0, 0.3, 10, &mut stream(1, 0)).unwrap();
        let mut off = NoiseSource::noise_off(stream(0, 0));
        assert!(matches!(
            dp_nelson_aalen(&ds, budget(1.0, 1e-3), &mut off),
            Err(Error::Infeasible(_))
        ));
        let ds = generate_hazard_sample(1.0, 0.3, 100, &mut stream(1, 0)).unwrap();
        assert!(dp_nelson_aalen(&ds, budget(1.0, 0.0), &mut off).is_err());
        assert!(matches!(
            dp_nelson_aalen(&ds, budget(1e-4, 1e-3), &mut off),
            Err(Error::Infeasible(_))
        ));
        let cov =
            SurvivalDataset::new(vec![CensoredObservation::new(0.1, true, vec![0.0])], 1, 1.0)
                .unwrap();
        assert!(dp_nelson_aalen(&cov, budget(1.0, 1e-3), &mut off).is_err());
    }

    #[test]
    fn no_events_gives_zero_curve() {
        let obs = (0..400)
            .map(|i| CensoredObservation::bare(i as f64 / 400.0, false))
            .collect();
        let ds = SurvivalDataset::new(obs, 0, 1.0).unwrap();
        let mut off = NoiseSource::noise_off(stream(0, 0));
        let c = dp_nelson_aalen(&ds, budget(1.0, 1e-3), &mut off).unwrap();
        assert!((0..=100).all(|k| c.evaluate(k as f64 / 100.0).unwrap() == 0.0));
    }

    fn noise_off_curve(n: usize, seed: u64) -> (SurvivalDataset, DPHazardCurve) {
        let ds = generate_hazard_sample(1.0, 0.3, n, &mut stream(seed, 0)).unwrap();
        let mut off = NoiseSource::noise_off(stream(0, 0));
        let c = dp_nelson_aalen(&ds, budget(1.0, 1e-3), &mut off).unwrap();
        (ds, c)
    }

    #[test]
    fn tree_shape_and_consistency() {
        let (_, c) = noise_off_curve(5000, 3);
        assert_eq!(c.depth, 6);
        assert_eq!(c.n_prime, 4750);
        assert_eq!(c.node_count(), (1 << (c.depth + 1)) - 2);
        for l in 1..c.depth {
            for m in 1..=(1usize << l) {
                let sum = c.node(l + 1, 2 * m - 1) + c.node(l + 1, 2 * m);
                assert!((c.node(l, m) - sum).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grid_values_telescope_to_leaf_sums() {
        let (_, c) = noise_off_curve(3000, 4);
        let leaves: Vec<f64> = (1..=c.cells()).map(|m| c.node(c.depth, m)).collect();
        let cells = c.cells();
        let mut running = 0.0;
        for m in 0..cells {
            let t = m as f64 / cells as f64;
            assert!((c.evaluate(t).unwrap() - running).abs() < 1e-12);
            running += leaves[m];
        }
        assert_eq!(c.evaluate(0.0).unwrap(), 0.0);
        assert_eq!(c.evaluate(1.0).unwrap(), c.cell_value(cells - 1));
        assert!(c.evaluate(1.5).is_err());
        assert!(c.evaluate(-0.1).is_err());
    }

    #[test]
    fn constant_within_cells() {
        let ds = generate_hazard_sample(1.0, 0.3, 3000, &mut stream(5, 0)).unwrap();
        let mut noise = NoiseSource::private(stream(6, 0));
        let c = dp_nelson_aalen(&ds, budget(2.0, 1e-3), &mut noise).unwrap();
        let cells = c.cells() as f64;
        for m in 0..c.cells() {
            let left = m as f64 / cells;
            let v = c.evaluate(left).unwrap();
            assert!(v >= 0.0);
            for frac in [0.25, 0.5, 0.999] {
                assert_eq!(c.evaluate(left + frac / cells).unwrap(), v);
            }
        }
    }

    #[test]
    fn ledger_has_two_disjoint_charges() {
        let (_, c) = noise_off_curve(2000, 7);
        assert_eq!(c.ledger.charges().len(), 2);
        assert_eq!(c.budget, budget(1.0, 1e-3));
        assert!(!c.private);
    }

    #[test]
    fn classical_estimator_examples() {
        let ds = SurvivalDataset::new(
            vec![
                CensoredObservation::bare(0.2, true),
                CensoredObservation::bare(0.5, true),
                CensoredObservation::bare(0.8, false),
            ],
            0,
            1.0,
        )
        .unwrap();
        let na = nelson_aalen(&ds);
        assert!((na.evaluate(1.0) - 0.833_333_333_333_333_4).abs() < 1e-12);
        assert_eq!(na.evaluate(0.1), 0.0);
        assert_eq!(na.evaluate_left(0.2), 0.0);

        let one = SurvivalDataset::new(vec![CensoredObservation::bare(0.4, true)], 0, 1.0).unwrap();
        let na = nelson_aalen(&one);
        assert_eq!(na.breakpoints(), &[0.4]);
        assert_eq!(na.values(), &[1.0]);

        let none =
            SurvivalDataset::new(vec![CensoredObservation::bare(0.4, false)], 0, 1.0).unwrap();
        assert_eq!(nelson_aalen(&none).evaluate(1.0), 0.0);
    }

    #[test]
    fn sup_distance_examples() {
        let zero = GridCurve::new(2, vec![0.0; 4]).unwrap();
        let bumped = GridCurve::new(3, vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(sup_distance(&zero, &zero), 0.0);
        assert_eq!(sup_distance(&zero, &bumped), 0.5);
        assert_eq!(sup_distance(&bumped, &zero), 0.5);
        let coarse = GridCurve::new(1, vec![0.1, 0.2]).unwrap();
        assert!((sup_distance(&coarse, &bumped) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn csv_exchange_round_trip() {
        let (_, c) = noise_off_curve(2000, 8);
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let back = GridCurve::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, GridCurve::from_step(&c));
        assert_eq!(sup_distance(&back, &c), 0.0);
        assert!(GridCurve::read_csv("grid_index,t_left,value\n0,0,1\n".as_bytes()).is_err());
        assert!(GridCurve::read_csv("a,b,c\n".as_bytes()).is_err());
    }

    #[test]
    fn error_shrinks_with_sample_size() {
        let truth = |t: f64| t;
        let median_error = |n: usize| {
            let mut errs: Vec<f64> = (0..50)
                .map(|r| {
                    let ds = generate_hazard_sample(1.0, 0.3, n, &mut stream(100 + r, 0)).unwrap();
                    let mut noise = NoiseSource::private(stream(100 + r, 1));
                    let c = dp_nelson_aalen(&ds, budget(4.0, 1e-3), &mut noise).unwrap();
                    let reference = GridCurve::from_fn(c.depth, truth).unwrap();
                    sup_distance(&c, &reference)
                })
                .collect();
            errs.sort_by(f64::total_cmp);
            errs[25]
        };
        assert!(median_error(8000) < median_error(1000));
    }
}
