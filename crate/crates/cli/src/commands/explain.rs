use std::path::Path;

use anyhow::{Context, Result};
use cast_core::cohort::{self, SchemaConfig};
use cast_core::heterogeneity::{self, ShapConfig};
use cast_core::pipeline::{self, PipelineConfig};

use crate::args::ExplainArgs;
use crate::util::{self, usage, InputFile};

pub struct ExplainOptions {
    pub horizon: f64,
    pub estimand: cast_core::forest::Estimand,
    pub subjects: usize,
    pub shap: ShapConfig,
}

#[derive(serde::Deserialize)]
struct FitManifest {
    command: String,
    config: PipelineConfig,
    inputs: Vec<InputFile>,
}

/// Refits the requested horizon from a `fit` directory and writes SHAP and
/// correlation files into `out`; returns the file names.
pub fn explain_into(run_dir: &Path, out: &Path, opts: &ExplainOptions, threads: Option<usize>) -> Result<Vec<String>> {
    let text = util::read_text(&run_dir.join("manifest.json"))?;
    let m: FitManifest = serde_json::from_str(&text).map_err(|e| usage(format!("fit manifest: {e}")))?;
    if m.command != "fit" {
        return Err(usage(format!("{} was written by `{}`, not `fit`", run_dir.display(), m.command)));
    }
    let file = |role: &str| -> Result<String> {
        let f = m.inputs.iter().find(|i| i.role == role).ok_or_else(|| usage(format!("manifest lacks {role}")))?;
        let text = util::read_text(&run_dir.join(&f.file))?;
        if util::fingerprint(text.as_bytes()) != f.fnv64 {
            return Err(usage(format!("{} changed since the fit", f.file)));
        }
        Ok(text)
    };
    let (csv_text, schema_text) = (file("cohort")?, file("schema")?);
    let schema = SchemaConfig::parse(&schema_text).map_err(usage)?;
    let raw = cohort::ingest_reader(csv_text.as_bytes(), &schema).map_err(usage)?.cohort;
    let cfg = PipelineConfig { fit_cate: true, ..m.config };
    if !cfg.horizons.contains(&opts.horizon) || !cfg.estimands.contains(&opts.estimand) {
        return Err(usage(format!("the fit did not include {} at {} months", opts.estimand.name(), opts.horizon)));
    }

    util::with_threads(threads, || -> Result<Vec<String>> {
        let model =
            pipeline::fit_horizon_model(&raw, &cfg, opts.horizon, opts.estimand).map_err(util::pipeline_error)?;
        let x = model.kept.covariates();
        let train: Vec<usize> = (0..x.rows()).filter(|&i| model.kept_train[i]).collect();
        let test: Vec<usize> = (0..x.rows()).filter(|&i| !model.kept_train[i]).collect();
        let pick = evenly_spaced(&test, opts.subjects);
        let background =
            heterogeneity::background_sample(&x.select_rows(&train), opts.shap.background_size, opts.shap.seed);
        let xs = x.select_rows(&pick);
        let shap = heterogeneity::shap_monte_carlo(|z| model.forest.predict_one(z), &xs, &background, &opts.shap)
            .context("computing attributions")?;
        let ids: Vec<String> = pick.iter().map(|&i| model.kept.subjects[i].id.clone()).collect();
        let names = &model.kept.schema.names;
        let tag = format!("{}_{}", opts.estimand.name(), opts.horizon);
        let mut outputs = Vec::new();
        let name = format!("shap_{tag}.csv");
        util::write_csv_with(out, &name, |b| Ok(shap.write_csv(&ids, names, b)?))?;
        outputs.push(name);
        let name = format!("shap_scatter_{tag}.csv");
        util::write_csv_with(out, &name, |b| Ok(shap.write_scatter_csv(&ids, names, &xs, b)?))?;
        outputs.push(name);
        let cate: Vec<f64> = pick.iter().map(|&i| model.estimate.cate[i]).collect();
        let (pearson, spearman) = heterogeneity::effect_correlations(names, &xs, &shap, &cate)?;
        for rep in [pearson, spearman] {
            let name = format!("shap_correlation_{}_{tag}.csv", rep.method.name());
            util::write_csv_with(out, &name, |b| Ok(rep.write_csv(b)?))?;
            outputs.push(name);
        }
        let name = format!("shap_summary_{tag}.json");
        let ranking: Vec<(&String, f64)> = names.iter().zip(shap.mean_abs()).collect();
        util::write_json(
            out,
            &name,
            &serde_json::json!({
                "horizon": opts.horizon,
                "estimand": opts.estimand.name(),
                "subjects": ids.len(),
                "baseline": shap.baseline,
                "converged": shap.converged,
                "max_iterations": shap.iterations.iter().max(),
                "mean_abs_shap": ranking,
            }),
        )?;
        outputs.push(name);
        eprintln!("explained {} held-out subjects at {} months ({})", ids.len(), opts.horizon, opts.estimand.name());
        Ok(outputs)
    })?
}

/// At most `k` entries of `rows`, evenly spaced and in order.
fn evenly_spaced(rows: &[usize], k: usize) -> Vec<usize> {
    if rows.len() <= k {
        return rows.to_vec();
    }
    (0..k).map(|j| rows[j * rows.len() / k]).collect()
}

pub fn run(args: &ExplainArgs) -> Result<()> {
    let opts = ExplainOptions {
        horizon: args.horizon,
        estimand: args.estimand.estimands()[0],
        subjects: args.subjects,
        shap: ShapConfig {
            iterations: args.iterations,
            epsilon: args.epsilon,
            seed: args.common.seed.unwrap_or(0),
            ..ShapConfig::default()
        },
    };
    let dir = util::out_dir(&args.common)?;
    let outputs = explain_into(&args.run, dir, &opts, args.common.threads)?;
    util::write_manifest(
        dir,
        "explain",
        &serde_json::json!({
            "horizon": opts.horizon,
            "estimand": opts.estimand.name(),
            "subjects": opts.subjects,
            "shap": opts.shap,
        }),
        vec![],
        outputs,
    )
}
