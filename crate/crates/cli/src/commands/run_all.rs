use std::fs;

use anyhow::{Context, Result};
use cast_core::cohort::{self, SchemaConfig};
use cast_core::heterogeneity::ShapConfig;
use cast_core::pipeline::PipelineConfig;
use cast_core::refutation::{RefutationConfig, RefutationKind};
use cast_core::synth::{self, ScenarioConfig};
use cast_core::trajectory::EffectSeries;

use crate::args::RunAllArgs;
use crate::commands::{explain, fit, refute, trajectory};
use crate::util::{self, usage, LoadedCohort};

/// Smoke-test chain with small forests by default; every stage writes into
/// its own subdirectory of `--out`.
pub fn run(args: &RunAllArgs) -> Result<()> {
    let seed = args.common.seed.unwrap_or(1);
    let mut scenario = match &args.scenario {
        Some(p) => ScenarioConfig::parse(&util::read_text(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
        None => ScenarioConfig::radcure_like(),
    };
    scenario.seed = seed;
    scenario.n = args.n;
    let cfg = util::resolve_pipeline(PipelineConfig::quick(seed), &args.estimation, Some(seed))?;
    let root = util::out_dir(&args.common)?;
    let sub = |name: &str| -> Result<std::path::PathBuf> {
        let d = root.join(name);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    };

    let g = util::with_threads(args.common.threads, || synth::generate(&scenario))?.map_err(usage)?;
    let sim = sub("simulate")?;
    util::write(&sim, "cohort.csv", &g.csv)?;
    util::write(&sim, "schema.cfg", g.schema.to_text())?;
    util::write_json(&sim, "truth.json", &g.truth)?;
    eprintln!("simulate: {} subjects", g.cohort.len());

    let schema_text = g.schema.to_text();
    let ing = cohort::ingest_reader(g.csv.as_bytes(), &SchemaConfig::parse(&schema_text)?)?;
    let input = LoadedCohort { cohort: ing.cohort, csv: g.csv.clone(), schema_text, report: ing.report };
    let fit_dir = sub("fit")?;
    let run = fit::fit_into(&fit_dir, &input, &cfg, args.common.threads, args.common.gnuplot)?;

    let series = cfg
        .estimands
        .iter()
        .map(|&e| run.series(e))
        .collect::<std::result::Result<Vec<EffectSeries>, _>>()
        .map_err(util::pipeline_error)?;
    let traj = sub("trajectory")?;
    trajectory::write_report(&traj, &series, args.common.gnuplot)?;

    let rcfg = RefutationConfig { pipeline: cfg.clone(), reps: args.reps, ..RefutationConfig::default() };
    refute::refute_into(&sub("refute")?, &input.cohort, &rcfg, &RefutationKind::ALL, args.common.threads)?;

    let horizon = if cfg.horizons.contains(&60.0) { 60.0 } else { cfg.horizons[cfg.horizons.len() / 2] };
    let opts = explain::ExplainOptions {
        horizon,
        estimand: cfg.estimands[0],
        subjects: args.subjects,
        shap: ShapConfig { iterations: args.shap_iterations, seed, ..ShapConfig::default() },
    };
    explain::explain_into(&fit_dir, &sub("explain")?, &opts, args.common.threads)?;
    Ok(())
}
