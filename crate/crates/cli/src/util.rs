use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cast_core::cohort::{self, SchemaConfig, SurvivalCohort};
use cast_core::pipeline::{PipelineConfig, PipelineError};
use serde::Serialize;

use crate::args::{CohortArgs, Common, EstimationArgs};

/// Marks an error as caused by the invocation or its inputs (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl fmt::Display) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

/// Configuration problems are usage errors; everything else is a runtime
/// failure.
pub fn pipeline_error(e: PipelineError) -> anyhow::Error {
    match e {
        PipelineError::Config(_) => usage(e),
        other => other.into(),
    }
}

/// Runs `f` on a pool of `threads` workers (default: available parallelism).
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == Some(0) {
        return Err(usage("--threads must be at least 1"));
    }
    let pool =
        rayon::ThreadPoolBuilder::new().num_threads(threads.unwrap_or(0)).build().context("starting thread pool")?;
    Ok(pool.install(f))
}

/// `start:stop:step` or `a,b,c`.
pub fn parse_horizons(spec: &str) -> Result<Vec<f64>> {
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| usage(format!("bad horizon `{s}`")));
    let parts: Vec<&str> = spec.split(':').collect();
    let hs = match parts.as_slice() {
        [a, b, c] => {
            let (start, stop, step) = (num(a)?, num(b)?, num(c)?);
            if !(step > 0.0 && start > 0.0 && stop >= start) {
                return Err(usage(format!("bad horizon range `{spec}`")));
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            (0..=n).map(|k| start + step * k as f64).collect()
        }
        [_] => spec.split(',').map(num).collect::<Result<Vec<_>>>()?,
        _ => return Err(usage(format!("bad horizon spec `{spec}`; use start:stop:step or a,b,c"))),
    };
    Ok(hs)
}

/// Library defaults, then `--config`, then individual flags.
pub fn resolve_pipeline(base: PipelineConfig, est: &EstimationArgs, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match &est.config {
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => base,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(h) = &est.horizons {
        cfg.horizons = parse_horizons(h)?;
    }
    if let Some(e) = est.estimand {
        cfg.estimands = e.estimands();
    }
    if let Some(t) = est.trees {
        cfg.forest.trees = t;
    }
    if let Some(t) = est.nuisance_trees {
        cfg.nuisance.trees = t;
    }
    if let Some(v) = est.trim_low {
        cfg.trim_low = v;
    }
    if let Some(v) = est.trim_high {
        cfg.trim_high = v;
    }
    if est.no_tune {
        cfg.forest.tune = false;
    }
    Ok(cfg)
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))
}

pub struct LoadedCohort {
    pub cohort: SurvivalCohort,
    pub csv: String,
    pub schema_text: String,
    pub report: cohort::IngestReport,
}

/// Final path component, as recorded in manifests.
pub fn file_name(path: &Path) -> String {
    path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

pub fn schema_path(args: &CohortArgs) -> PathBuf {
    args.schema.clone().unwrap_or_else(|| args.cohort.with_file_name("schema.cfg"))
}

pub fn load_cohort(args: &CohortArgs) -> Result<LoadedCohort> {
    let csv = read_text(&args.cohort)?;
    let schema_text = read_text(&schema_path(args))?;
    let schema = SchemaConfig::parse(&schema_text).map_err(usage)?;
    let ing =
        cohort::ingest_reader(csv.as_bytes(), &schema).map_err(|e| usage(format!("{}: {e}", args.cohort.display())))?;
    Ok(LoadedCohort { cohort: ing.cohort, csv, schema_text, report: ing.report })
}

pub fn out_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

pub fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
}

pub fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(dir, name, s)
}

/// Serializes rows through a CSV writer into a file.
pub fn write_csv_with(dir: &Path, name: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write(dir, name, buf)
}

/// FNV-1a, used to fingerprint inputs in manifests.
pub fn fingerprint(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a, C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub config: &'a C,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct InputFile {
    pub role: String,
    /// File name inside the run directory.
    pub file: String,
    pub fnv64: String,
}

impl InputFile {
    pub fn new(role: &str, file: &str, bytes: &[u8]) -> Self {
        InputFile { role: role.into(), file: file.into(), fnv64: fingerprint(bytes) }
    }
}

pub fn write_manifest<C: Serialize>(
    dir: &Path,
    command: &str,
    config: &C,
    inputs: Vec<InputFile>,
    mut outputs: Vec<String>,
) -> Result<()> {
    outputs.sort();
    let m = Manifest { tool: "cast", version: env!("CARGO_PKG_VERSION"), command, config, inputs, outputs };
    write_json(dir, "manifest.json", &m)
}

/// Minimal gnuplot script plotting `columns` of a CSV against its first column.
pub fn gnuplot_stub(dir: &Path, csv_name: &str, title: &str, columns: &[(usize, &str)]) -> Result<()> {
    let stem = csv_name.trim_end_matches(".csv");
    let mut s = format!(
        "set datafile separator ','\nset key autotitle columnhead\nset title '{title}'\n\
         set terminal pngcairo size 900,600\nset output '{stem}.png'\nplot "
    );
    let series: Vec<String> =
        columns.iter().map(|(c, style)| format!("'{csv_name}' using 1:{c} with {style}")).collect();
    s.push_str(&series.join(", \\\n     "));
    s.push('\n');
    write(dir, &format!("{stem}.gp"), s)
}

pub fn f(v: f64) -> String {
    v.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizon_specs() {
        assert_eq!(parse_horizons("12:120:12").unwrap().len(), 10);
        assert_eq!(parse_horizons("12:120:12").unwrap()[9], 120.0);
        assert_eq!(parse_horizons("6, 18,30").unwrap(), vec![6.0, 18.0, 30.0]);
        assert!(parse_horizons("12:6:1").is_err());
        assert!(parse_horizons("a:b").is_err());
    }
}
