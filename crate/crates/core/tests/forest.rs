use cast_core::cohort::SurvivalCohort;
use cast_core::forest::{
    aipw_pseudo_outcomes, estimate_ate, estimate_horizon, fit_forest, horizon_pseudo_outcomes, AipwInputs,
    EstimationConfig, FloorPolicy, ForestConfig, NuisanceConfig,
};
use cast_core::pipeline::{run_estimation, PipelineConfig, PipelineRun};
use cast_core::stats::{self, Matrix};
use cast_core::survival::{censoring_survival_from, Conditioning};
use cast_core::synth::{generate, EffectShape, Generated, LinearModel, ScenarioConfig};
use cast_core::{rng, Estimand};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn uniform_design(n: usize, p: usize, seed: u64) -> Matrix {
    let mut g = rng::stream(seed, &[]);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| g.random_range(-1.0..1.0)).collect()).collect();
    Matrix::from_rows(&rows, p)
}

fn small_forest(trees: usize, min_node_size: usize, seed: u64) -> ForestConfig {
    ForestConfig { trees, min_node_size, tune: false, ci_group_size: 2, seed, ..ForestConfig::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forests_respect_their_invariants(
        n in 60usize..200, p in 1usize..4, min_node in 1usize..8, seed in 0u64..1000,
    ) {
        let x = uniform_design(n, p, seed);
        let mut g = rng::stream(seed, &[1]);
        let y: Vec<f64> = (0..n).map(|i| x.get(i, 0) + g.sample::<f64, _>(StandardNormal)).collect();
        let cfg = small_forest(20, min_node, seed);
        let model = fit_forest(&x, &y, None, &cfg).unwrap();
        prop_assert_eq!(&model, &fit_forest(&x, &y, None, &cfg).unwrap());
        for tree in model.trees() {
            prop_assert!(tree.leaf_counts().iter().all(|&c| c >= min_node));
        }
        let (lo, hi) = (y.iter().copied().fold(f64::INFINITY, f64::min), y.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        let probe = uniform_design(25, p, seed + 1);
        for i in 0..probe.rows() {
            let pred = model.predict_with_variance(probe.row(i));
            prop_assert!(pred.estimate >= lo - 1e-12 && pred.estimate <= hi + 1e-12);
            prop_assert!(pred.variance >= 0.0);
            prop_assert!((pred.estimate - model.predict_one(probe.row(i))).abs() < 1e-12);
        }
    }
}

#[test]
fn step_function_is_recovered_out_of_sample() {
    let x = uniform_design(2000, 5, 1);
    let mut g = rng::stream(1, &[2]);
    let sign = |v: f64| if v > 0.0 { 1.0 } else { -1.0 };
    let y: Vec<f64> = (0..x.rows()).map(|i| sign(x.get(i, 0)) + 0.5 * g.sample::<f64, _>(StandardNormal)).collect();
    let model = fit_forest(&x, &y, None, &ForestConfig { trees: 500, tune: false, ..ForestConfig::default() }).unwrap();
    let test = uniform_design(500, 5, 2);
    let mae = (0..test.rows()).map(|i| (model.predict_one(test.row(i)) - sign(test.get(i, 0))).abs()).sum::<f64>()
        / test.rows() as f64;
    println!("out-of-sample MAE {mae:.4}");
    assert!(mae < 0.15, "MAE {mae}");
}

#[test]
fn more_trees_reduce_monte_carlo_spread() {
    let x = uniform_design(400, 3, 3);
    let mut g = rng::stream(3, &[2]);
    let y: Vec<f64> = (0..x.rows()).map(|i| x.get(i, 0) + g.sample::<f64, _>(StandardNormal)).collect();
    let point = [0.2, -0.1, 0.4];
    let spread = |trees: usize| {
        let preds: Vec<f64> = (0..8)
            .map(|s| fit_forest(&x, &y, None, &small_forest(trees, 5, 100 + s)).unwrap().predict_one(&point))
            .collect();
        stats::sd(&preds)
    };
    let (few, many) = (spread(500), spread(5000));
    println!("seed-to-seed sd: 500 trees {few:.5}, 5000 trees {many:.5}");
    assert!(many < few);
}

// ---------------------------------------------------------------------------
// AIPW

fn logistic(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Confounded binary outcomes without censoring: treatment and both potential
/// outcomes depend on `x`. Returns `(x, w, y, e, p0, p1)`.
#[allow(clippy::type_complexity)]
fn confounded(n: usize, seed: u64) -> (Vec<f64>, Vec<bool>, Vec<bool>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut g = rng::stream(seed, &[]);
    let (mut xs, mut ws, mut ys, mut es, mut p0s, mut p1s) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for _ in 0..n {
        let x: f64 = g.sample(StandardNormal);
        let e = logistic(1.2 * x);
        let (p0, p1) = (logistic(x - 0.3), logistic(x + 0.4));
        let w = g.random::<f64>() < e;
        let y = g.random::<f64>() < if w { p1 } else { p0 };
        xs.push(x);
        ws.push(w);
        ys.push(y);
        es.push(e);
        p0s.push(p0);
        p1s.push(p1);
    }
    (xs, ws, ys, es, p0s, p1s)
}

#[test]
fn aipw_is_doubly_robust() {
    let horizon = 12.0;
    let n = 20_000;
    let (_, w, y, e, p0, p1) = confounded(n, 5);
    // survivors are followed past the horizon, everyone else dies before it
    let times: Vec<f64> = y.iter().map(|&s| if s { 20.0 } else { 6.0 }).collect();
    let events: Vec<bool> = y.iter().map(|&s| !s).collect();
    let censor = censoring_survival_from(&times, &events, &w, Conditioning::None).unwrap();
    let truth = p1.iter().zip(&p0).map(|(a, b)| a - b).sum::<f64>() / n as f64;
    let mean_and_se = |scores: &[f64], m0: &[f64], m1: &[f64]| {
        let set = aipw_pseudo_outcomes(
            AipwInputs { times: &times, events: &events, treatments: &w, scores, m0, m1 },
            &censor,
            horizon,
            Estimand::Sp,
            0.05,
            FloorPolicy::Exclude,
        )
        .unwrap();
        assert_eq!(set.n_valid(), n);
        let g = set.valid_gamma();
        (stats::mean(&g), stats::sd(&g) / (n as f64).sqrt())
    };
    let flat_e = vec![0.5; n];
    let flat_m = vec![0.5; n];

    let (good_e, se) = mean_and_se(&e, &flat_m, &flat_m);
    assert!((good_e - truth).abs() < 3.0 * se, "right scores, wrong outcomes: {good_e} vs {truth} (se {se})");
    let (good_m, se) = mean_and_se(&flat_e, &p0, &p1);
    assert!((good_m - truth).abs() < 3.0 * se, "right outcomes, wrong scores: {good_m} vs {truth} (se {se})");
    let (naive, se) = mean_and_se(&flat_e, &flat_m, &flat_m);
    assert!((naive - truth).abs() > 5.0 * se, "both wrong should be confounded: {naive} vs {truth}");
}

fn randomized_constant_effect(n: usize, seed: u64) -> ScenarioConfig {
    let base = ScenarioConfig::radcure_like();
    let mut cfg = ScenarioConfig { n, seed, treatment: LinearModel::default(), ..base.clone() };
    cfg.effect.shape = EffectShape::Piecewise { times: vec![36.0, 120.0], values: vec![0.1, 0.1] };
    cfg.effect.amplitude = 1.0;
    cfg.effect.modifiers = LinearModel { intercept: 1.0, ..LinearModel::default() };
    cfg
}

fn sp_config(seed: u64, horizons: Vec<f64>, nuisance_trees: usize) -> PipelineConfig {
    PipelineConfig {
        horizons,
        estimands: vec![Estimand::Sp],
        fit_cate: false,
        nuisance: NuisanceConfig { trees: nuisance_trees, ..NuisanceConfig::default() },
        ..PipelineConfig::quick(seed)
    }
}

fn run(cfg: &ScenarioConfig, pipeline: &PipelineConfig) -> (Generated, PipelineRun) {
    let g = generate(cfg).unwrap();
    let r = run_estimation(&g.cohort, pipeline).unwrap();
    (g, r)
}

#[test]
fn randomized_constant_effect_is_recovered() {
    let (g, r) = run(&randomized_constant_effect(4000, 21), &sp_config(21, vec![36.0], 200));
    let est = &r.estimates[0];
    let truth = g.truth.ate_over(r.kept_rows(), false)[2];
    assert!((truth - 0.10).abs() < 1e-12, "truth {truth}");
    println!("ate {:.4} (se {:.4})", est.ate, est.ate_se);
    assert!((est.ate - truth).abs() < 2.0 * est.ate_se);
}

#[test]
fn null_effect_intervals_are_calibrated() {
    let base = ScenarioConfig { n: 1000, ..ScenarioConfig::radcure_like() }.null_effect();
    let covered = (0..20u64)
        .filter(|&s| {
            let (_, r) = run(&ScenarioConfig { seed: 500 + s, ..base.clone() }, &sp_config(s, vec![36.0], 100));
            let e = &r.estimates[0];
            e.ate.abs() <= 1.96 * e.ate_se
        })
        .count();
    println!("null covered in {covered}/20 seeds");
    assert!(covered >= 18);
}

#[test]
fn late_horizons_are_noisier_than_early_ones() {
    let cfg = ScenarioConfig { n: 2000, seed: 4, ..ScenarioConfig::radcure_like() };
    let (_, r) = run(&cfg, &sp_config(4, vec![12.0, 120.0], 100));
    let (early, late) = (&r.estimates[0], &r.estimates[1]);
    assert!(late.ate_se >= early.ate_se, "se(12) {} > se(120) {}", early.ate_se, late.ate_se);
    assert!(late.n_valid <= early.n_valid);
}

#[test]
fn errors_shrink_with_sample_size() {
    let median_error = |n: usize| {
        let mut errs: Vec<f64> = (0..10u64)
            .map(|s| {
                let cfg = ScenarioConfig { n, seed: 900 + s, ..ScenarioConfig::radcure_like() };
                let (g, r) = run(&cfg, &sp_config(s, vec![36.0], 100));
                (r.estimates[0].ate - g.truth.ate_over(r.kept_rows(), false)[2]).abs()
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        0.5 * (errs[4] + errs[5])
    };
    let (small, large) = (median_error(500), median_error(8000));
    println!("median |error|: n=500 {small:.4}, n=8000 {large:.4}");
    assert!(large < small);
}

// ---------------------------------------------------------------------------
// Horizon estimates

fn small_cohort() -> (SurvivalCohort, Vec<f64>) {
    let g = generate(&ScenarioConfig { n: 600, seed: 8, ..ScenarioConfig::radcure_like() }).unwrap();
    let scores = g.truth.propensity.clone();
    (cast_core::cohort::standardize(&g.cohort).unwrap().cohort, scores)
}

fn small_estimation(seed: u64) -> EstimationConfig {
    EstimationConfig {
        forest: ForestConfig { trees: 100, tune: false, ..ForestConfig::default() },
        nuisance: NuisanceConfig { trees: 50, ..NuisanceConfig::default() },
        seed,
    }
}

#[test]
fn ate_and_se_are_pseudo_outcome_moments() {
    let (c, scores) = small_cohort();
    let cfg = small_estimation(3);
    for estimand in [Estimand::Sp, Estimand::Rmst] {
        let set = horizon_pseudo_outcomes(&c, &scores, 36.0, estimand, &cfg).unwrap();
        let est = estimate_ate(&c, &scores, 36.0, estimand, &cfg).unwrap();
        let g = set.valid_gamma();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let sd = (g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (g.len() as f64 - 1.0)).sqrt();
        assert!((est.ate - mean).abs() < 1e-12);
        assert!((est.ate_se - sd / (g.len() as f64).sqrt()).abs() < 1e-12);
        assert_eq!(est.n_valid + est.n_excluded, g.len() + set.n_excluded);
    }
}

#[test]
fn pseudo_outcomes_are_bounded_by_their_weights() {
    let (c, scores) = small_cohort();
    let cfg = small_estimation(4);
    let set = horizon_pseudo_outcomes(&c, &scores, 60.0, Estimand::Sp, &cfg).unwrap();
    let treated = c.treatments();
    for i in 0..c.len() {
        if !set.valid[i] {
            assert!(set.censoring_survival[i] < cfg.nuisance.censoring_floor);
            continue;
        }
        let reg = set.m1[i] - set.m0[i];
        if !set.observable[i] {
            assert_eq!(set.gamma[i], reg);
            continue;
        }
        let e = set.scores[i];
        let arm = if treated[i] { e } else { 1.0 - e };
        let bound = 1.0 / (arm * set.censoring_survival[i]);
        assert!((set.gamma[i] - reg).abs() <= bound + 1e-12, "subject {i}");
    }
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let (c, scores) = small_cohort();
    let cfg = small_estimation(5);
    let on = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| estimate_horizon(&c, &scores, 36.0, Estimand::Sp, &cfg).unwrap())
    };
    assert_eq!(on(1), on(3));
}
