use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TABLE_2: &str = "\
months,ate_sp,se_sp,ate_rmst,se_rmst
12,0.099,0.049,0.44,0.26
24,0.141,0.053,1.88,0.80
36,0.152,0.058,3.58,1.46
48,0.178,0.072,5.80,2.31
60,0.168,0.071,7.39,2.73
72,0.148,0.075,8.38,3.52
84,0.156,0.077,11.08,4.76
96,0.143,0.071,13.89,5.90
108,0.129,0.068,14.76,6.16
120,0.100,0.063,16.11,6.92
";

fn cast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cast")).args(args).output().expect("cast runs")
}

fn ok(args: &[&str]) {
    let out = cast(args);
    assert!(out.status.success(), "cast {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const FAST: [&str; 8] = ["--trees", "50", "--nuisance-trees", "30", "--no-tune", "--horizons", "12:60:12", "--threads"];

#[test]
fn simulate_writes_cohort_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&["simulate", "--n", "250", "--seed", "4", "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("cohort.csv")).unwrap();
    assert_eq!(csv.lines().count(), 251);
    assert!(out.join("schema.cfg").exists());
    let truth = json(&out.join("truth.json"));
    assert_eq!(truth["ate_sp"].as_array().unwrap().len(), 10);
}

#[test]
fn null_scenario_has_zero_truth() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["simulate", "--null", "--n", "100", "--out", p(dir.path())]);
    let truth = json(&dir.path().join("truth.json"));
    for key in ["ate_sp", "ate_rmst"] {
        assert!(truth[key].as_array().unwrap().iter().all(|v| v.as_f64() == Some(0.0)));
    }
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cast(&["simulate", "--scenario", "/definitely/not/here.toml", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read"));
    assert_eq!(cast(&["fit", "--bogus"]).status.code(), Some(2));
}

#[test]
fn trajectory_on_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("table2.csv");
    fs::write(&input, TABLE_2).unwrap();
    let out = dir.path().join("traj");
    ok(&["trajectory", "--estimates", p(&input), "--out", p(&out)]);
    let curves = fs::read_to_string(out.join("curves_sp.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 109);
    let summary = json(&out.join("summary.json"));
    let sp = summary.as_array().unwrap().iter().find(|s| s["estimand"] == "sp").unwrap();
    let peak = sp["t_peak"].as_f64().unwrap();
    assert!((50.0..=65.0).contains(&peak), "peak {peak}");
}

#[test]
fn trajectory_rejects_two_rows() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("two.csv");
    fs::write(&input, "horizon,ate,se\n12,0.1,0.05\n24,0.12,0.05\n").unwrap();
    let out = cast(&["trajectory", "--estimates", p(&input), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 3"));
}

#[test]
fn fit_is_reproducible_and_explainable() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--n", "400", "--seed", "2", "--out", p(&sim)]);
    let cohort = sim.join("cohort.csv");
    let fit = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["fit", "--cohort", p(&cohort), "--seed", "5", "--out", p(&out)];
        args.extend(FAST);
        args.push(threads);
        ok(&args);
        out
    };
    let (a, b) = (fit("a", "1"), fit("b", "2"));
    for name in ["horizons.csv", "table2.csv", "cate_sp_36.csv", "scores.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name} differs");
    }
    let header = fs::read_to_string(a.join("table2.csv")).unwrap();
    assert!(header.starts_with("months,ate_sp,se_sp,ate_rmst,se_rmst"));
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["trim_low"].as_f64(), Some(0.1));
    assert_eq!(manifest["config"]["trim_high"].as_f64(), Some(0.9));

    let ex = dir.path().join("explain");
    ok(&["explain", "--run", p(&a), "--horizon", "36", "--subjects", "10", "--iterations", "200", "--out", p(&ex)]);
    let shap = fs::read_to_string(ex.join("shap_sp_36.csv")).unwrap();
    assert_eq!(shap.lines().count(), 11);
    assert!(ex.join("shap_correlation_spearman_sp_36.csv").exists());
    let bad = cast(&["explain", "--run", p(&a), "--horizon", "100", "--out", p(&ex)]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn refute_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--n", "300", "--seed", "9", "--out", p(&sim)]);
    let out = dir.path().join("refute");
    let cohort = sim.join("cohort.csv");
    let mut args = vec!["refute", "--cohort", p(&cohort), "--tests", "negative,confounder", "--out", p(&out)];
    args.extend(FAST);
    args.push("1");
    ok(&args);
    let summary = json(&out.join("refute_summary.json"));
    assert!(summary.get("negative_control").is_some());
    assert!(summary.get("synthetic_confounder").is_some());
    assert!(out.join("refute_synthetic_confounder.csv").exists());
}
