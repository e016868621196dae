use std::path::Path;

use anyhow::Result;
use cast_core::cohort::SurvivalCohort;
use cast_core::pipeline::{PipelineConfig, PipelineError};
use cast_core::refutation::{self, RefutationConfig, RefutationError, RefutationKind};

use crate::args::{RefuteArgs, TestArg};
use crate::util::{self, usage, InputFile};

pub fn kinds(tests: &[TestArg]) -> Vec<RefutationKind> {
    let mut out = Vec::new();
    for t in tests {
        let ks: &[RefutationKind] = match t {
            TestArg::Dummy => &[RefutationKind::DummyOutcome],
            TestArg::Negative => &[RefutationKind::NegativeControl],
            TestArg::Confounder => &[RefutationKind::SyntheticConfounder],
            TestArg::Noise => &[RefutationKind::NoiseFeatures],
            TestArg::All => &RefutationKind::ALL,
        };
        for k in ks {
            if !out.contains(k) {
                out.push(*k);
            }
        }
    }
    out
}

fn classify(e: RefutationError) -> anyhow::Error {
    match e {
        RefutationError::Config(_) => usage(e),
        RefutationError::Pipeline(p @ PipelineError::Config(_)) => usage(p),
        other => other.into(),
    }
}

/// Runs each test and writes `refute_<name>.{json,csv}` plus a pass/fail
/// summary; returns the file names.
pub fn refute_into(
    dir: &Path,
    cohort: &SurvivalCohort,
    cfg: &RefutationConfig,
    kinds: &[RefutationKind],
    threads: Option<usize>,
) -> Result<Vec<String>> {
    let mut outputs = vec!["refute_summary.json".to_string()];
    let mut summary = serde_json::Map::new();
    for &k in kinds {
        let report =
            util::with_threads(threads, || refutation::refute(k, cohort, cfg, cfg.pipeline.seed))?.map_err(classify)?;
        let json = format!("refute_{}.json", k.name());
        let csv = format!("refute_{}.csv", k.name());
        util::write_json(dir, &json, &report)?;
        util::write_csv_with(dir, &csv, |buf| Ok(report.write_csv(buf)?))?;
        outputs.push(json);
        outputs.push(csv);
        let failed: Vec<&str> = report.verdicts.iter().filter(|v| !v.pass).map(|v| v.check.as_str()).collect();
        eprintln!(
            "{}: {} ({} of {} checks failed)",
            k.name(),
            if report.pass { "PASS" } else { "FAIL" },
            failed.len(),
            report.verdicts.len()
        );
        summary.insert(k.name().into(), serde_json::json!({ "pass": report.pass, "failed_checks": failed }));
    }
    util::write_json(dir, "refute_summary.json", &summary)?;
    Ok(outputs)
}

pub fn run(args: &RefuteArgs) -> Result<()> {
    let pipeline = util::resolve_pipeline(PipelineConfig::default(), &args.estimation, args.common.seed)?;
    let mut cfg = RefutationConfig { pipeline, ..RefutationConfig::default() };
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    let input = util::load_cohort(&args.input)?;
    let dir = util::out_dir(&args.common)?;
    let outputs = refute_into(dir, &input.cohort, &cfg, &kinds(&args.tests), args.common.threads)?;
    util::write_manifest(
        dir,
        "refute",
        &cfg,
        vec![
            InputFile::new("cohort", &util::file_name(&args.input.cohort), input.csv.as_bytes()),
            InputFile::new("schema", &util::file_name(&util::schema_path(&args.input)), input.schema_text.as_bytes()),
        ],
        outputs,
    )
}
