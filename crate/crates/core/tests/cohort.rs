use cast_core::cohort::{
    self, ingest_reader, standardize, stratified_split, write_csv, ColumnKind, ColumnSchema, SchemaConfig,
    SubjectRecord, SurvivalCohort,
};
use cast_core::synth::{generate, ScenarioConfig};
use proptest::prelude::*;

fn event_rate(c: &SurvivalCohort, idx: &[usize]) -> f64 {
    idx.iter().filter(|&&i| c.subjects[i].event).count() as f64 / idx.len() as f64
}

#[test]
fn generated_file_ingests_without_loss() {
    let g = generate(&ScenarioConfig { n: 2651, seed: 3, ..ScenarioConfig::radcure_like() }).unwrap();
    let ing = ingest_reader(g.csv.as_bytes(), &g.schema).unwrap();
    assert_eq!(ing.report.rows_read, 2651);
    assert_eq!(ing.cohort.len(), 2651);
    assert_eq!(ing.cohort.event_rate(), g.cohort.event_rate());
    assert_eq!(ing.cohort.treatment_rate(), g.cohort.treatment_rate());
}

#[test]
fn both_partitions_keep_the_event_rate() {
    let g = generate(&ScenarioConfig { n: 2651, seed: 4, ..ScenarioConfig::radcure_like() }).unwrap();
    let s = stratified_split(&g.cohort, 0.75, 11).unwrap();
    let (train, test) = (event_rate(&g.cohort, &s.train_index), event_rate(&g.cohort, &s.test_index));
    assert!((train - 0.798).abs() <= 0.02, "train {train}");
    assert!((test - 0.798).abs() <= 0.02, "test {test}");
}

#[test]
fn preparation_is_bit_identical_across_runs() {
    let g = generate(&ScenarioConfig { n: 500, seed: 5, ..ScenarioConfig::radcure_like() }).unwrap();
    let prepare = || {
        let c = ingest_reader(g.csv.as_bytes(), &g.schema).unwrap().cohort;
        let c = standardize(&c).unwrap().cohort;
        let s = stratified_split(&c, 0.75, 2).unwrap();
        (c, s)
    };
    assert_eq!(prepare(), prepare());
}

fn cohort_strategy() -> impl Strategy<Value = SurvivalCohort> {
    (20usize..300).prop_flat_map(|n| {
        (
            proptest::collection::vec((-1e3f64..1e3, any::<bool>(), any::<bool>(), 1e-3f64..200.0, any::<bool>()), n),
            proptest::collection::vec(0usize..3, n),
        )
            .prop_map(|(rows, sites)| {
                let subjects = rows
                    .into_iter()
                    .zip(sites)
                    .enumerate()
                    .map(|(i, ((x, b, w, t, d), site))| SubjectRecord {
                        id: format!("p{i}"),
                        covariates: vec![
                            x,
                            f64::from(u8::from(b)),
                            f64::from(u8::from(site == 1)),
                            f64::from(u8::from(site == 2)),
                        ],
                        treatment: w,
                        time_months: t,
                        event: d,
                    })
                    .collect();
                let one_hot = |level: &str| ColumnKind::OneHot { group: "site".into(), level: level.into() };
                let schema = ColumnSchema::new(
                    vec!["x".into(), "flag".into(), "site_b".into(), "site_c".into()],
                    vec![ColumnKind::Continuous, ColumnKind::Binary, one_hot("b"), one_hot("c")],
                );
                SurvivalCohort::new(subjects, schema).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn csv_round_trips(c in cohort_strategy()) {
        let mut buf = Vec::new();
        write_csv(&c, &mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), &SchemaConfig::for_schema(&c.schema)).unwrap().cohort;
        prop_assert_eq!(back.subjects, c.subjects);
    }

    #[test]
    fn standardized_columns_have_unit_scale(c in cohort_strategy()) {
        let std = standardize(&c).unwrap();
        prop_assume!(std.flagged.is_empty());
        let x = std.cohort.column(0);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((sd - 1.0).abs() < 1e-9);
        prop_assert_eq!(std.cohort.column(1), c.column(1));
        prop_assert_eq!(std.cohort.column(2), c.column(2));
    }

    #[test]
    fn splits_balance_events(c in cohort_strategy(), seed in any::<u64>(), frac in 0.5f64..0.9) {
        let events = c.subjects.iter().filter(|s| s.event).count();
        prop_assume!(c.len() >= 100 && events >= 20 && c.len() - events >= 20);
        let s = stratified_split(&c, frac, seed).unwrap();
        prop_assert_eq!(&s, &stratified_split(&c, frac, seed).unwrap());
        let mut all: Vec<usize> = s.train_index.iter().chain(&s.test_index).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..c.len()).collect::<Vec<_>>());
        let gap = (event_rate(&c, &s.train_index) - event_rate(&c, &s.test_index)).abs();
        prop_assert!(gap <= 0.02, "event-rate gap {}", gap);
    }
}

#[test]
fn reference_statistics_carry_over() {
    let g = generate(&ScenarioConfig { n: 400, seed: 6, ..ScenarioConfig::radcure_like() }).unwrap();
    let s = stratified_split(&g.cohort, 0.75, 1).unwrap();
    let train = standardize(&g.cohort.select(&s.train_index)).unwrap().cohort;
    let test = cohort::standardize_with(&g.cohort.select(&s.test_index), &train.schema).unwrap().cohort;
    let j = test.schema.index_of("age").unwrap();
    let col = test.column(j);
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    assert!(mean.abs() > 1e-9);
    assert_eq!(test.schema.stats[j], train.schema.stats[j]);
}
