use space_fda::matern::MaternParams;
use space_fda::model_selection::{blocked_folds, buffered_training};
use space_fda::pipeline::{fit, FitOptions, Grouping};
use space_fda::sim_engine::{
    improvement, pace_baseline, simulate, simulate_replicate, space_reconstruction, table1_scenarios, Scenario,
    SimLayout, STUDY_LAMBDAS,
};
use space_fda::tests_bootstrap::{separability_test, Partition, SeparabilityStatistic, TestOptions};

fn scenario(name: &str, seed: u64) -> Scenario {
    table1_scenarios(100, seed).into_iter().find(|s| s.name == name).unwrap()
}

#[test]
fn fit_recovers_the_generating_model_roughly() {
    let s = scenario("separable 1", 5);
    let sim = simulate(&s).unwrap();
    let report = fit(&sim.data, &FitOptions::default()).unwrap();
    let m = &report.model;
    assert_eq!(m.k(), 2);
    assert!((m.eigen.eigenvalues[0] / STUDY_LAMBDAS[0] - 1.0).abs() < 0.5);
    // curvature of the surface at the diagonal inflates σ̂² at LOBO bandwidths
    assert!(m.eigen.sigma2 > 0.0 && m.eigen.sigma2 < 0.6, "{}", m.eigen.sigma2);
    for p in &m.matern {
        assert!(p.zeta > 0.5 && p.zeta < 30.0, "{p:?}");
    }
    let align = m.eigen.grid.inner_product(&m.eigen.eigenfunctions[0], &s.eigenfunctions[0]).abs();
    assert!(align > 0.95, "{align}");
}

#[test]
fn spatial_reconstruction_beats_independent_curves_at_high_noise() {
    let s = scenario("separable 2", 7);
    let mut wins = 0;
    for r in 0..3 {
        let sim = simulate_replicate(&s, r).unwrap();
        let model = fit(&sim.data, &FitOptions::default()).unwrap().model;
        let space = space_reconstruction(&model, &sim.data).unwrap();
        let pace = pace_baseline(&model, &sim.data).unwrap();
        wins += usize::from(improvement(&sim.truth, &space, &pace).unwrap() > 0.0);
    }
    assert!(wins >= 2, "{wins}");
}

#[test]
fn separable_grouping_shares_parameters() {
    let sim = simulate(&scenario("separable 3", 9)).unwrap();
    let opts = FitOptions { grouping: Grouping::Separable, ..FitOptions::default() };
    let report = fit(&sim.data, &opts).unwrap();
    assert!(report.model.separable);
    assert_eq!(report.model.matern[0], report.model.matern[1]);
}

#[test]
fn replicates_are_reproducible_and_distinct() {
    let s = scenario("separable 1", 11);
    let a = simulate_replicate(&s, 3).unwrap();
    let b = simulate_replicate(&s, 3).unwrap();
    let c = simulate_replicate(&s, 4).unwrap();
    assert_eq!(a.data.observations, b.data.observations);
    assert_eq!(a.truth, b.truth);
    assert_ne!(a.truth, c.truth);
}

#[test]
fn bootstrap_test_is_deterministic_and_well_formed() {
    let p = MaternParams::isotropic(4.0, 0.5);
    let [l1, l2] = STUDY_LAMBDAS;
    let s = Scenario::study("null", SimLayout::Line(60), 0.5, vec![(l1, p), (l2, p)], 21);
    let data = simulate(&s).unwrap().data;
    let opts = TestOptions { replicates: 99, seed: 4, calibration_draws: 2, ..TestOptions::default() };
    let run = || separability_test(&data, &Partition::single(2), SeparabilityStatistic::CorrelationDispersion, &opts).unwrap();
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.null_stats.len() + a.dropped, 99);
    assert!(a.p_value > 0.0 && a.p_value <= 1.0);
    let exceed = a.null_stats.iter().filter(|&&v| v >= a.observed_stat).count();
    assert!((a.p_value - (1 + exceed) as f64 / (a.null_stats.len() + 1) as f64).abs() < 1e-12);
}

#[test]
fn folds_partition_and_buffer_excludes_neighbours() {
    let locs = SimLayout::Line(30).locations();
    let folds = blocked_folds(&locs, 5);
    let mut all: Vec<usize> = folds.concat();
    all.sort_unstable();
    assert_eq!(all, (0..30).collect::<Vec<_>>());
    let train = buffered_training(&locs, &folds[2], 2.0);
    for &i in &train {
        assert!(folds[2].iter().all(|&t| locs[i].distance(&locs[t]) > 2.0));
    }
    assert_eq!(train.len(), 30 - 6 - 4);
}
