use dyngpi::data_model::Dataset;
use dyngpi::dgp::desk::{DeskConfig, DeskInstance, DESK_CONFOUNDER_COORD};
use dyngpi::dgp::{build_structure, simulate_dataset, DgpConfig};
use dyngpi::estimator::{
    estimate, estimate_grid, Backend, EstimatorConfig, MissingStratumPolicy, NeuralConfig, SaturatedConfig,
};
use dyngpi::harness::{run_delta_sweep, SweepTarget};
use dyngpi::intervention::InterventionSpec;
use dyngpi::neural::TrainConfig;
use dyngpi::numerics::Rng;

fn saturated(k: usize) -> EstimatorConfig {
    EstimatorConfig {
        k_folds: k,
        missing_strata: MissingStratumPolicy::Drop,
        backend: Backend::Saturated(SaturatedConfig { coords: vec![DESK_CONFOUNDER_COORD] }),
        ..EstimatorConfig::default()
    }
}

fn small_neural() -> EstimatorConfig {
    let fast = TrainConfig {
        epochs: 4,
        batch_size: 64,
        learning_rate: 1e-3,
        patience: 0,
        dropout_rate: 0.0,
        validation_fraction: 0.0,
    };
    let mut nc = NeuralConfig::default();
    nc.arch.encoder_hidden = vec![8];
    nc.arch.d_f = 4;
    nc.arch.head_hidden = vec![8];
    nc.nuisance_hidden = vec![8];
    nc.deconf_train = fast.clone();
    nc.nuisance_train = fast;
    EstimatorConfig {
        k_folds: 2,
        missing_strata: MissingStratumPolicy::Drop,
        backend: Backend::Neural(nc),
        ..EstimatorConfig::default()
    }
}

fn with_outcome(ds: &Dataset, y: f64) -> Dataset {
    let units = ds
        .units()
        .iter()
        .map(|u| {
            let mut u = u.clone();
            u.y = y;
            u
        })
        .collect();
    Dataset::new(units, ds.d_r(), ds.s_max()).unwrap()
}

#[test]
fn constant_outcome_gives_that_constant() {
    let desk = DeskInstance::new(DeskConfig::default()).unwrap();
    let ds = with_outcome(&desk.simulate(3000, &mut Rng::new(1)).unwrap(), 5.0);
    for cfg in [saturated(2), small_neural()] {
        for d in [0.5, 1.0, 2.0] {
            let spec = InterventionSpec::uniform(d, 3).unwrap();
            let r = estimate(&ds, &spec, &cfg, &mut Rng::new(2)).unwrap();
            assert!((r.psi_hat - 5.0).abs() < 1e-9, "δ={d}: {}", r.psi_hat);
            assert!(r.sigma_hat < 1e-6);
        }
    }

    let dgp = DgpConfig { d_r: 16, d_w: 8, d_u: 8, p_u: 4, s_max: 3, ..DgpConfig::default() };
    let st = build_structure(&dgp).unwrap();
    let sim = with_outcome(&simulate_dataset(&dgp, &st, 400, &mut Rng::new(3)).unwrap().0, 5.0);
    let spec = InterventionSpec::uniform(1.5, 3).unwrap();
    let r = estimate(&sim, &spec, &small_neural(), &mut Rng::new(4)).unwrap();
    assert!((r.psi_hat - 5.0).abs() < 1e-9, "{}", r.psi_hat);
}

/// Quadrupling N halves the interval. The standard deviation of the
/// half-width estimate at these sizes is a few percent.
#[test]
fn interval_shrinks_like_root_n() {
    let desk = DeskInstance::new(DeskConfig::default()).unwrap();
    let spec = InterventionSpec::uniform(2.0, 3).unwrap();
    let width = |n: usize, seed: u64| {
        let ds = desk.simulate(n, &mut Rng::new(seed)).unwrap();
        let r = estimate(&ds, &spec, &saturated(2), &mut Rng::new(seed + 1)).unwrap();
        r.ci_high - r.ci_low
    };
    let ratio = width(24_000, 30) / width(6_000, 20);
    assert!((ratio - 0.5).abs() < 0.06, "ratio {ratio}");
}

fn two_segment_desk() -> DeskInstance {
    DeskInstance::new(DeskConfig {
        length_pmf: vec![0.3, 0.7],
        tau: vec![1.0, 0.6],
        gamma: vec![1.0, 0.8],
        interaction: vec![0.5, 0.5],
        ..DeskConfig::default()
    })
    .unwrap()
}

#[test]
fn position_sweeps_meet_at_the_observed_regime() {
    let desk = two_segment_desk();
    let ds = desk.simulate(6000, &mut Rng::new(8)).unwrap();
    let grid = [0.25, 1.0, 4.0];
    let cfg = saturated(5);
    let first = run_delta_sweep(&ds, SweepTarget::Position(1), &grid, &cfg, &mut Rng::new(3)).unwrap();
    let second = run_delta_sweep(&ds, SweepTarget::Position(2), &grid, &cfg, &mut Rng::new(3)).unwrap();
    let uniform = run_delta_sweep(&ds, SweepTarget::Uniform, &[1.0], &cfg, &mut Rng::new(3)).unwrap();
    let at_one = uniform[0].result.psi_hat;
    for rows in [&first, &second] {
        let row = rows.iter().find(|r| r.delta == 1.0).unwrap();
        assert!((row.result.psi_hat - at_one).abs() < 1e-12);
    }
    for (rows, pos) in [(&first, 1), (&second, 2)] {
        for row in rows.iter() {
            let mut v = vec![1.0; 2];
            v[pos - 1] = row.delta;
            assert_eq!(row.result.delta, v);
            let truth = desk.psi(&InterventionSpec::new(v).unwrap()).unwrap();
            let se = row.result.std_error();
            assert!((row.result.psi_hat - truth).abs() <= 4.0 * se, "{pos}/{}: {} vs {truth}", row.delta, row.result.psi_hat);
        }
    }
}

#[test]
fn per_position_estimates_match_the_grid_call() {
    let desk = DeskInstance::new(DeskConfig::default()).unwrap();
    let ds = desk.simulate(4000, &mut Rng::new(14)).unwrap();
    let specs: Vec<InterventionSpec> = [vec![0.5, 1.0, 2.0], vec![1.0, 1.0, 1.0], vec![3.0, 0.2, 1.0]]
        .into_iter()
        .map(|v| InterventionSpec::new(v).unwrap())
        .collect();
    let grid = estimate_grid(&ds, &specs, &saturated(3), &mut Rng::new(6)).unwrap();
    for (spec, r) in specs.iter().zip(grid) {
        let alone = estimate(&ds, spec, &saturated(3), &mut Rng::new(6)).unwrap();
        assert_eq!(r.unwrap(), alone);
    }
}
