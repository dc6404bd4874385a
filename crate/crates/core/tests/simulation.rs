use dpsurv::data::{generate_cox_dataset, generate_hazard_sample, SimulationConfig};
use dpsurv::harness::{simulate_grid, ExperimentGrid, TestKind};
use dpsurv::hypothesis::{binary_lrt_test, calibrate_threshold_mc, Tail};
use dpsurv::mechanism::{NoiseSource, PrivacyBudget};
use dpsurv::rng::{derive_seed, stream, Domain};
use dpsurv::two_sample::{run_one_sample_test, ServerConfig};

#[test]
fn noise_free_binary_test_is_consistent() {
    let cfg = SimulationConfig {
        n: 5000,
        beta_star: vec![0.2; 3],
        ..Default::default()
    };
    let budget = PrivacyBudget::pure(1.0).unwrap();
    let rejections = (0..200u64)
        .filter(|&rep| {
            let mut rng = stream(derive_seed(17, Domain::Replication, &[rep]), 0);
            let ds = generate_cox_dataset(&cfg, &mut rng).unwrap();
            binary_lrt_test(
                &ds,
                &[0.0; 3],
                &[0.2; 3],
                budget,
                &mut NoiseSource::noise_off(rng),
                0.0,
            )
            .unwrap()
            .reject
        })
        .count();
    assert!(rejections >= 190, "{rejections} of 200");
}

#[test]
fn plugin_score_test_type_one_error() {
    let mut g = ExperimentGrid::new(TestKind::Score, vec![5000], vec![2.0], 200, 31);
    g.beta_star = Some(vec![0.0; 3]);
    let (_, summary) = simulate_grid(&g).unwrap();
    let p = summary.cells[0].proportion;
    assert!(p <= 0.25, "type-I {p}");
}

#[test]
fn one_sample_test_holds_calibrated_level() {
    let (n, rate, budget) = (5000, 1.0, PrivacyBudget::new(4.0, 1e-3).unwrap());
    // Truth of the design: hazard `rate` on [0, 1].
    let truth = move |t: f64| rate * t;
    let statistic = |seed: u64| -> dpsurv::Result<f64> {
        let ds = generate_hazard_sample(rate, 0.3, n, &mut stream(seed, 0))?;
        let server = ServerConfig::new("one", ds, budget)?;
        Ok(run_one_sample_test(
            &server,
            truth,
            0.0,
            &mut NoiseSource::private(stream(seed, 1)),
        )?
        .statistic)
    };
    let level = 0.15;
    let tau = calibrate_threshold_mc(
        |s| statistic(rand::Rng::random(s)),
        level,
        400,
        &mut stream(77, 0),
        Tail::Upper,
    )
    .unwrap();
    let reps = 200u64;
    let rejections = (0..reps)
        .filter(|&r| statistic(derive_seed(78, Domain::Replication, &[r])).unwrap() > tau)
        .count();
    let p = rejections as f64 / reps as f64;
    let se = (level * (1.0 - level) / reps as f64).sqrt();
    assert!(
        p <= level + 2.0 * se,
        "rejection rate {p} at calibrated threshold {tau}"
    );
}

/// The coordinator side of the two-sample module must only see curves.
#[test]
fn coordinator_never_touches_observations() {
    let source = include_str!("../src/two_sample.rs");
    let body = |name: &str| {
        let start = source.find(&format!("pub fn {name}")).unwrap();
        let rest = &source[start..];
        let end = rest.find("\n}\n").unwrap();
        rest[..end].to_string()
    };
    for name in ["compare_curves", "two_sample_threshold"] {
        let b = body(name);
        for forbidden in [
            "dataset",
            "observations",
            "SurvivalDataset",
            "CensoredObservation",
        ] {
            assert!(!b.contains(forbidden), "{name} mentions {forbidden}");
        }
    }
    // Server state holding raw data stays private to the module.
    assert!(source.contains("    dataset: SurvivalDataset,"));
    assert!(!source.contains("pub dataset"));
}
