use cast_core::cohort::SurvivalCohort;
use cast_core::forest::{ForestConfig, NuisanceConfig};
use cast_core::pipeline::{run_estimation, PipelineConfig};
use cast_core::refutation::{
    confounder_column, dummy_outcome_test, negative_control_test, noise_feature_test, RefutationConfig,
};
use cast_core::synth::{generate, ScenarioConfig};
use cast_core::{rng, stats, Estimand};
use proptest::prelude::*;

fn cohort(n: usize, seed: u64) -> SurvivalCohort {
    generate(&ScenarioConfig { n, seed, ..ScenarioConfig::radcure_like() }).unwrap().cohort
}

fn small(horizons: Vec<f64>) -> RefutationConfig {
    RefutationConfig {
        pipeline: PipelineConfig {
            horizons,
            estimands: vec![Estimand::Sp],
            forest: ForestConfig { trees: 50, tune: false, ..ForestConfig::default() },
            nuisance: NuisanceConfig { trees: 50, ..NuisanceConfig::default() },
            ..PipelineConfig::quick(1)
        },
        reps: 4,
        ..RefutationConfig::default()
    }
}

#[test]
fn reports_are_reproducible_and_leave_the_input_alone() {
    let c = cohort(500, 1);
    let before = c.clone();
    let cfg = small(vec![24.0, 48.0]);
    assert_eq!(negative_control_test(&c, &cfg, 3).unwrap(), negative_control_test(&c, &cfg, 3).unwrap());
    assert_eq!(dummy_outcome_test(&c, &cfg, 3).unwrap(), dummy_outcome_test(&c, &cfg, 3).unwrap());
    assert_ne!(negative_control_test(&c, &cfg, 3).unwrap(), negative_control_test(&c, &cfg, 4).unwrap());
    assert_eq!(c, before);
}

#[test]
fn zero_noise_columns_reproduce_the_baseline() {
    let c = cohort(500, 2);
    let cfg = RefutationConfig { noise_features: 0, ..small(vec![36.0]) };
    let report = noise_feature_test(&c, &cfg, 1).unwrap();
    assert!(report.estimates.iter().all(|e| e.delta == Some(0.0)));
    assert_eq!(
        report.estimates.iter().map(|e| e.ate).collect::<Vec<_>>(),
        report.baseline.iter().map(|e| e.ate).collect::<Vec<_>>()
    );
}

#[test]
fn fake_treatments_look_null() {
    let cfg = small(vec![36.0]);
    let passed = (0..20u64)
        .filter(|&s| {
            let report = negative_control_test(&cohort(800, 100 + s), &cfg, s).unwrap();
            report.verdicts.iter().filter(|v| v.check.ends_with("_null")).all(|v| v.pass)
        })
        .count();
    println!("negative control held in {passed}/20 seeds");
    assert!(passed >= 18);
}

#[test]
fn real_treatment_fails_the_null_check() {
    let c = cohort(2000, 6);
    let cfg = small(vec![48.0]);
    let real = run_estimation(&c, &cfg.pipeline).unwrap();
    let e = &real.estimates[0];
    assert!(e.ate.abs() >= cfg.se_multiplier * e.ate_se, "real effect {} (se {})", e.ate, e.ate_se);
    let fake = negative_control_test(&c, &cfg, 6).unwrap();
    let null = fake.verdicts.iter().find(|v| v.check.ends_with("_null")).unwrap();
    assert!(null.pass, "{null:?}");
}

#[test]
fn shuffled_outcomes_centre_on_zero() {
    let cfg = RefutationConfig { reps: 100, ..small(vec![36.0]) };
    let report = dummy_outcome_test(&cohort(400, 7), &cfg, 7).unwrap();
    let ates: Vec<f64> = report.estimates.iter().map(|e| e.ate).collect();
    assert_eq!(ates.len(), 100);
    let (mean, sd) = (stats::mean(&ates), stats::sd(&ates));
    println!("dummy outcome mean {mean:.4}, sd {sd:.4}");
    assert!(mean.abs() < 3.0 * sd / 10.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn confounder_hits_its_target_correlation(
        w in proptest::collection::vec(any::<bool>(), 20..300), r in -0.95f64..0.95, seed in 0u64..1000,
    ) {
        prop_assume!(w.iter().any(|&b| b) && w.iter().any(|&b| !b));
        let z = confounder_column(&w, r, &mut rng::stream(seed, &[])).unwrap();
        let wf: Vec<f64> = w.iter().map(|&b| f64::from(u8::from(b))).collect();
        prop_assert!((stats::pearson(&z, &wf).unwrap() - r).abs() < 1e-9);
    }
}
