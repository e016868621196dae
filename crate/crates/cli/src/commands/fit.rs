use std::path::Path;

use anyhow::Result;
use cast_core::forest::Estimand;
use cast_core::pipeline::{self, PipelineConfig, PipelineRun};
use cast_core::propensity::{self, CorrelationMethod};

use crate::args::FitArgs;
use crate::util::{self, f, InputFile, LoadedCohort};

pub const TRIM_THRESHOLDS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];
const DENSITY_POINTS: usize = 200;

pub fn cate_file(estimand: Estimand, horizon: f64) -> String {
    format!("cate_{}_{}.csv", estimand.name(), horizon)
}

pub fn run(args: &FitArgs) -> Result<()> {
    let cfg = util::resolve_pipeline(PipelineConfig::default(), &args.estimation, args.common.seed)?;
    let input = util::load_cohort(&args.input)?;
    let dir = util::out_dir(&args.common)?;
    fit_into(dir, &input, &cfg, args.common.threads, args.common.gnuplot)?;
    Ok(())
}

/// Runs the pipeline and writes every fit artifact into `dir`, including
/// copies of the inputs so the directory is self-contained for `explain`.
pub fn fit_into(
    dir: &Path,
    input: &LoadedCohort,
    cfg: &PipelineConfig,
    threads: Option<usize>,
    gnuplot: bool,
) -> Result<PipelineRun> {
    let run =
        util::with_threads(threads, || pipeline::run_estimation(&input.cohort, cfg))?.map_err(util::pipeline_error)?;
    let mut outputs = Vec::new();
    let mut out = |name: String| outputs.push(name);

    util::write(dir, "cohort.csv", &input.csv)?;
    util::write(dir, "schema.cfg", &input.schema_text)?;
    write_estimates(dir, &run)?;
    out("horizons.csv".into());
    out("table2.csv".into());
    out("importance.csv".into());
    if cfg.fit_cate {
        for e in &run.estimates {
            let name = cate_file(e.estimand, e.horizon);
            util::write_csv_with(dir, &name, |buf| {
                let mut w = csv::Writer::from_writer(buf);
                w.write_record(["id", "split", "cate", "cate_var"])?;
                for (k, s) in run.kept.subjects.iter().enumerate() {
                    let split = if run.kept_train[k] { "train" } else { "test" };
                    w.write_record([s.id.as_str(), split, &f(e.cate[k]), &f(e.cate_var[k])])?;
                }
                w.flush()?;
                Ok(())
            })?;
            out(name);
        }
    }
    write_propensity(dir, &run, gnuplot)?;
    for name in ["scores.csv", "propensity.json", "propensity_density.csv", "trim_sensitivity.csv"] {
        out(name.into());
    }
    if gnuplot {
        out("propensity_density.gp".into());
    }
    for name in write_correlations(dir, &run)? {
        out(name);
    }
    util::write_manifest(
        dir,
        "fit",
        cfg,
        vec![
            InputFile::new("cohort", "cohort.csv", input.csv.as_bytes()),
            InputFile::new("schema", "schema.cfg", input.schema_text.as_bytes()),
        ],
        outputs,
    )?;
    eprintln!(
        "fit {} horizons on {} of {} subjects ({} trimmed, {} dropped at ingestion)",
        run.estimates.len(),
        run.kept.len(),
        run.cohort.len(),
        run.trim.trimmed_index.len(),
        input.report.dropped_count()
    );
    Ok(run)
}

fn write_estimates(dir: &Path, run: &PipelineRun) -> Result<()> {
    util::write_csv_with(dir, "horizons.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record([
            "horizon",
            "estimand",
            "ate",
            "se",
            "se_forest",
            "n_valid",
            "n_excluded",
            "min_node_size",
            "subsample",
        ])?;
        for e in &run.estimates {
            w.write_record([
                f(e.horizon),
                e.estimand.name().into(),
                f(e.ate),
                f(e.ate_se),
                f(e.ate_se_forest),
                e.n_valid.to_string(),
                e.n_excluded.to_string(),
                e.min_node_size.to_string(),
                f(e.subsample),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    util::write_csv_with(dir, "table2.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["months", "ate_sp", "se_sp", "ate_rmst", "se_rmst"])?;
        let cell = |v: Option<(f64, f64)>, k: usize| v.map_or(String::new(), |p| f(if k == 0 { p.0 } else { p.1 }));
        for (h, sp, rmst) in pipeline::table_rows(&run.estimates) {
            w.write_record([f(h), cell(sp, 0), cell(sp, 1), cell(rmst, 0), cell(rmst, 1)])?;
        }
        w.flush()?;
        Ok(())
    })?;
    util::write_csv_with(dir, "importance.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["horizon", "estimand", "feature", "importance"])?;
        for e in &run.estimates {
            for (name, v) in run.kept.schema.names.iter().zip(&e.importance) {
                w.write_record([f(e.horizon), e.estimand.name().into(), name.clone(), f(*v)])?;
            }
        }
        w.flush()?;
        Ok(())
    })
}

fn write_propensity(dir: &Path, run: &PipelineRun, gnuplot: bool) -> Result<()> {
    let train = run.split.train_mask(run.cohort.len());
    let mut kept = vec![false; run.cohort.len()];
    for &i in &run.trim.kept_index {
        kept[i] = true;
    }
    util::write_csv_with(dir, "scores.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["id", "treatment", "score", "split", "kept"])?;
        for (i, s) in run.cohort.subjects.iter().enumerate() {
            w.write_record([
                s.id.clone(),
                u8::from(s.treatment).to_string(),
                f(run.scores[i]),
                (if train[i] { "train" } else { "test" }).into(),
                u8::from(kept[i]).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let coefficients: Vec<(&String, f64)> =
        run.cohort.schema.names.iter().zip(run.propensity.coefficients.iter().copied()).collect();
    util::write_json(
        dir,
        "propensity.json",
        &serde_json::json!({
            "intercept": run.propensity.intercept,
            "coefficients": coefficients,
            "alpha": run.propensity.alpha,
            "lambda": run.propensity.lambda,
            "cv_folds": run.propensity.cv_folds,
            "cv_loss": run.propensity.cv_loss,
            "flagged_zero_variance": run.flagged,
        }),
    )?;
    util::write_csv_with(dir, "propensity_density.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["stage", "arm", "score", "density"])?;
        for (stage, rows) in
            [("before_trim", (0..run.cohort.len()).collect::<Vec<_>>()), ("after_trim", run.trim.kept_index.clone())]
        {
            for (arm, treated) in [("treated", true), ("control", false)] {
                let vals: Vec<f64> = rows
                    .iter()
                    .filter(|&&i| run.cohort.subjects[i].treatment == treated)
                    .map(|&i| run.scores[i])
                    .collect();
                for (x, d) in propensity::kde(&vals, DENSITY_POINTS) {
                    w.write_record([stage, arm, &f(x), &f(d)])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })?;
    if gnuplot {
        let s = "set datafile separator ','\nset terminal pngcairo size 900,600\n\
                 set output 'propensity_density.png'\nset xlabel 'propensity score'\n\
                 plot for [arm in 'treated control'] 'propensity_density.csv' \
                 using ((strcol(1) eq 'before_trim' && strcol(2) eq arm) ? $3 : 1/0):4 with lines title arm\n";
        util::write(dir, "propensity_density.gp", s)?;
    }
    let sens = propensity::trim_sensitivity(&run.cohort, &run.scores, &TRIM_THRESHOLDS)?;
    util::write_csv_with(dir, "trim_sensitivity.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["lower", "upper", "kept", "trimmed", "kept_treated_rate"])?;
        for t in &sens {
            let treated = t.kept_index.iter().filter(|&&i| run.cohort.subjects[i].treatment).count();
            w.write_record([
                f(t.lower),
                f(t.upper),
                t.kept_index.len().to_string(),
                t.trimmed_index.len().to_string(),
                f(treated as f64 / t.kept_index.len() as f64),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

/// Covariates, treatment and propensity score, both methods.
fn write_correlations(dir: &Path, run: &PipelineRun) -> Result<Vec<String>> {
    let mut cols: Vec<(String, Vec<f64>)> =
        run.cohort.schema.names.iter().enumerate().map(|(j, n)| (n.clone(), run.cohort.column(j))).collect();
    cols.push(("treatment".into(), run.cohort.treatments().iter().map(|&t| f64::from(u8::from(t))).collect()));
    cols.push(("propensity".into(), run.scores.clone()));
    let mut names = Vec::new();
    for method in [CorrelationMethod::Pearson, CorrelationMethod::Spearman] {
        let rep = propensity::correlation_diagnostics(&cols, method, 0.05)?;
        let name = format!("correlation_{}.csv", method.name());
        util::write_csv_with(dir, &name, |buf| Ok(rep.write_csv(buf)?))?;
        names.push(name);
    }
    Ok(names)
}
