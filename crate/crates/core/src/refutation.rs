//! Refutation harness: re-runs the estimation pipeline on deliberately
//! broken copies of a cohort and checks that the estimates react (or fail to
//! react) as they should.
//!
//! * dummy outcome — treatment and outcomes shuffled independently; effects
//!   should centre on zero;
//! * negative control — treatment replaced by coin flips;
//! * synthetic confounder — a covariate correlated with treatment but not
//!   with outcome is added at several strengths;
//! * noise features — standard-normal columns are added; estimates and
//!   importance rankings should barely move.
//!
//! Every test is a pure function of `(cohort, config, seed)` and never
//! mutates its input.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{SubjectRecord, SurvivalCohort};
use crate::forest::Estimand;
use crate::pipeline::{self, PipelineConfig, PipelineError};
use crate::rng;
use crate::stats;

#[derive(Debug, Error)]
pub enum RefutationError {
    #[error("treatment is constant; no covariate can be correlated with it")]
    CorrelationUnachievable,
    #[error("invalid refutation configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, RefutationError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefutationKind {
    DummyOutcome,
    NegativeControl,
    SyntheticConfounder,
    NoiseFeatures,
}

impl RefutationKind {
    pub const ALL: [RefutationKind; 4] = [
        RefutationKind::DummyOutcome,
        RefutationKind::NegativeControl,
        RefutationKind::SyntheticConfounder,
        RefutationKind::NoiseFeatures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefutationKind::DummyOutcome => "dummy_outcome",
            RefutationKind::NegativeControl => "negative_control",
            RefutationKind::SyntheticConfounder => "synthetic_confounder",
            RefutationKind::NoiseFeatures => "noise_features",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for RefutationKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|r| r.name() == k || r.name().split('_').next() == Some(k.as_str()))
            .ok_or_else(|| format!("unknown refutation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefutationConfig {
    pub pipeline: PipelineConfig,
    pub reps: usize,
    pub strengths: Vec<f64>,
    pub noise_features: usize,
    /// Null tests pass when estimates lie within this many standard errors.
    pub se_multiplier: f64,
    /// Noise-feature test tolerance on `|delta ate|`, in baseline SEs.
    pub noise_se_fraction: f64,
    /// Dummy-outcome centring is only required up to this horizon.
    pub reliable_horizon: f64,
    pub top_k: usize,
}

impl Default for RefutationConfig {
    fn default() -> Self {
        RefutationConfig {
            pipeline: PipelineConfig::default(),
            reps: 20,
            strengths: vec![0.1, 0.3, 0.5],
            noise_features: 5,
            se_multiplier: 2.0,
            noise_se_fraction: 0.5,
            reliable_horizon: 60.0,
            top_k: 5,
        }
    }
}

/// One estimate from one perturbed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEstimate {
    /// Repetition index, or the strength / feature count of the variant.
    pub label: String,
    pub seed: u64,
    pub horizon: f64,
    pub estimand: Estimand,
    pub ate: f64,
    pub se: f64,
    /// `ate - baseline ate`, for tests with a baseline.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: f64,
    pub estimand: Estimand,
    pub mean: f64,
    pub sd: f64,
    /// Largest `|estimate - reference|` (reference: 0 or the baseline).
    pub max_abs_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub check: String,
    pub observed: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Verdict {
    fn at_most(check: String, observed: f64, threshold: f64) -> Self {
        Verdict { check, observed, threshold, pass: observed <= threshold }
    }

    fn below(check: String, observed: f64, threshold: f64) -> Self {
        Verdict { check, observed, threshold, pass: observed < threshold }
    }

    fn at_least(check: String, observed: f64, threshold: f64) -> Self {
        Verdict { check, observed, threshold, pass: observed >= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefutationReport {
    pub kind: RefutationKind,
    pub seed: u64,
    pub reps: usize,
    /// Seeds of every perturbed run, in order.
    pub run_seeds: Vec<u64>,
    pub baseline: Vec<RunEstimate>,
    pub estimates: Vec<RunEstimate>,
    pub summary: Vec<HorizonSummary>,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
}

impl RefutationReport {
    fn new(kind: RefutationKind, seed: u64, reps: usize) -> Self {
        RefutationReport {
            kind,
            seed,
            reps,
            run_seeds: vec![],
            baseline: vec![],
            estimates: vec![],
            summary: vec![],
            verdicts: vec![],
            pass: false,
        }
    }

    fn finish(mut self) -> Self {
        self.pass = self.verdicts.iter().all(|v| v.pass);
        self
    }

    pub fn summary_for(&self, horizon: f64, estimand: Estimand) -> Option<&HorizonSummary> {
        self.summary.iter().find(|s| s.horizon == horizon && s.estimand == estimand)
    }

    /// `horizon, estimand, label, estimate` rows for box plots.
    pub fn write_csv(&self, out: impl std::io::Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["horizon", "estimand", "repetition", "estimate", "se", "delta"])?;
        for e in &self.estimates {
            w.write_record([
                e.horizon.to_string(),
                e.estimand.name().to_string(),
                e.label.clone(),
                e.ate.to_string(),
                e.se.to_string(),
                e.delta.map_or(String::new(), |d| d.to_string()),
            ])?;
        }
        w.flush()
    }
}

fn run(cohort: &SurvivalCohort, cfg: &PipelineConfig, seed: u64, cate: bool) -> Result<pipeline::PipelineRun> {
    let c = PipelineConfig { seed, fit_cate: cate, ..cfg.clone() };
    Ok(pipeline::run_estimation(cohort, &c)?)
}

fn estimates(run: &pipeline::PipelineRun, label: &str, seed: u64) -> Vec<RunEstimate> {
    run.estimates
        .iter()
        .map(|e| RunEstimate {
            label: label.to_string(),
            seed,
            horizon: e.horizon,
            estimand: e.estimand,
            ate: e.ate,
            se: e.ate_se,
            delta: None,
        })
        .collect()
}

fn with_deltas(mut est: Vec<RunEstimate>, base: &[RunEstimate]) -> Vec<RunEstimate> {
    for (e, b) in est.iter_mut().zip(base) {
        debug_assert!(e.horizon == b.horizon && e.estimand == b.estimand);
        e.delta = Some(e.ate - b.ate);
    }
    est
}

/// Per-(horizon, estimand) mean, SD and max deviation from `reference`.
fn summarize(est: &[RunEstimate], cfg: &PipelineConfig, use_delta: bool) -> Vec<HorizonSummary> {
    let mut out = Vec::new();
    for &estimand in &cfg.estimands {
        for &h in &cfg.horizons {
            let vals: Vec<f64> = est
                .iter()
                .filter(|e| e.horizon == h && e.estimand == estimand)
                .map(|e| if use_delta { e.delta.unwrap_or(0.0) } else { e.ate })
                .collect();
            if vals.is_empty() {
                continue;
            }
            out.push(HorizonSummary {
                horizon: h,
                estimand,
                mean: stats::mean(&vals),
                sd: if vals.len() > 1 { stats::sd(&vals) } else { 0.0 },
                max_abs_deviation: vals.iter().fold(0.0, |m, v| m.max(v.abs())),
            });
        }
    }
    out
}

fn rep_seed(seed: u64, kind: RefutationKind, rep: usize) -> u64 {
    rng::derive_seed(seed, &[rng::tag::REFUTE, kind.tag(), rep as u64])
}

fn rebuild(cohort: &SurvivalCohort, subjects: Vec<SubjectRecord>) -> SurvivalCohort {
    SurvivalCohort { subjects, schema: cohort.schema.clone(), standardized: cohort.standardized }
}

/// Shuffles treatment and `(time, event)` pairs independently in each
/// repetition and re-estimates every horizon.
pub fn dummy_outcome_test(cohort: &SurvivalCohort, cfg: &RefutationConfig, seed: u64) -> Result<RefutationReport> {
    if cfg.reps < 2 {
        return Err(RefutationError::Config("dummy outcome test needs at least 2 repetitions".into()));
    }
    let kind = RefutationKind::DummyOutcome;
    let runs: Vec<Result<Vec<RunEstimate>>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| {
            let s = rep_seed(seed, kind, r);
            let mut g = rng::stream(s, &[]);
            let mut w = cohort.treatments();
            w.shuffle(&mut g);
            let mut outcome: Vec<(f64, bool)> = cohort.subjects.iter().map(|s| (s.time_months, s.event)).collect();
            outcome.shuffle(&mut g);
            let subjects = cohort
                .subjects
                .iter()
                .zip(w)
                .zip(outcome)
                .map(|((s, w), (t, d))| SubjectRecord { treatment: w, time_months: t, event: d, ..s.clone() })
                .collect();
            let run = run(&rebuild(cohort, subjects), &cfg.pipeline, s, false)?;
            Ok(estimates(&run, &r.to_string(), s))
        })
        .collect();
    let mut report = RefutationReport::new(kind, seed, cfg.reps);
    report.run_seeds = (0..cfg.reps).map(|r| rep_seed(seed, kind, r)).collect();
    for r in runs {
        report.estimates.extend(r?);
    }
    report.summary = summarize(&report.estimates, &cfg.pipeline, false);
    let root = (cfg.reps as f64).sqrt();
    for s in &report.summary {
        if s.horizon <= cfg.reliable_horizon {
            report.verdicts.push(Verdict::at_most(
                format!("{}_{}_mean_centred", s.estimand.name(), s.horizon),
                s.mean.abs(),
                cfg.se_multiplier * s.sd / root,
            ));
        }
    }
    for &estimand in &cfg.pipeline.estimands {
        let (first, last) = (cfg.pipeline.horizons[0], cfg.pipeline.horizons[cfg.pipeline.horizons.len() - 1]);
        if let (Some(a), Some(b)) = (report.summary_for(first, estimand), report.summary_for(last, estimand)) {
            report.verdicts.push(Verdict::at_least(format!("{}_sd_grows", estimand.name()), b.sd, a.sd));
        }
    }
    Ok(report.finish())
}

/// Replaces treatment with Bernoulli noise at the observed treatment rate.
pub fn negative_control_test(cohort: &SurvivalCohort, cfg: &RefutationConfig, seed: u64) -> Result<RefutationReport> {
    let kind = RefutationKind::NegativeControl;
    let s = rep_seed(seed, kind, 0);
    let mut g = rng::stream(s, &[]);
    let rate = cohort.treatment_rate();
    let subjects: Vec<SubjectRecord> =
        cohort.subjects.iter().map(|x| SubjectRecord { treatment: g.random::<f64>() < rate, ..x.clone() }).collect();
    let fake = rebuild(cohort, subjects);
    let run = run(&fake, &cfg.pipeline, s, false)?;
    let mut report = RefutationReport::new(kind, seed, 1);
    report.run_seeds = vec![s];
    report.estimates = estimates(&run, "0", s);
    report.summary = summarize(&report.estimates, &cfg.pipeline, false);
    report.verdicts.push(Verdict::at_most(
        "fake_treatment_rate_gap".into(),
        (fake.treatment_rate() - rate).abs(),
        0.02,
    ));
    for e in &report.estimates {
        report.verdicts.push(Verdict::below(
            format!("{}_{}_null", e.estimand.name(), e.horizon),
            e.ate.abs(),
            cfg.se_multiplier * e.se,
        ));
    }
    Ok(report.finish())
}

/// `r * w + sqrt(1 - r^2) * e`, where `w` is standardized treatment and `e`
/// standardized noise residualized on `w`: sample correlation with
/// treatment is exactly `r`.
pub fn confounder_column(treatment: &[bool], strength: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let w: Vec<f64> = treatment.iter().map(|&b| f64::from(u8::from(b))).collect();
    let sd = stats::sd(&w);
    if !(sd > 0.0) {
        return Err(RefutationError::CorrelationUnachievable);
    }
    if !(-1.0..=1.0).contains(&strength) {
        return Err(RefutationError::Config("strength must lie in [-1, 1]".into()));
    }
    let m = stats::mean(&w);
    let ws: Vec<f64> = w.iter().map(|v| (v - m) / sd).collect();
    let noise: Vec<f64> = (0..w.len()).map(|_| rng.sample(StandardNormal)).collect();
    let nm = stats::mean(&noise);
    let n1 = (w.len() - 1) as f64;
    let proj = ws.iter().zip(&noise).map(|(a, b)| a * (b - nm)).sum::<f64>() / n1;
    let resid: Vec<f64> = noise.iter().zip(&ws).map(|(e, a)| e - nm - proj * a).collect();
    let rsd = stats::sd(&resid);
    Ok(ws.iter().zip(&resid).map(|(a, e)| strength * a + (1.0 - strength * strength).sqrt() * e / rsd).collect())
}

/// Adds one treatment-correlated, outcome-independent covariate per strength
/// and reports the shift in every horizon's ATE.
pub fn synthetic_confounder_test(
    cohort: &SurvivalCohort,
    cfg: &RefutationConfig,
    seed: u64,
) -> Result<RefutationReport> {
    let kind = RefutationKind::SyntheticConfounder;
    if cfg.strengths.is_empty() {
        return Err(RefutationError::Config("no confounder strengths".into()));
    }
    let base_seed = rep_seed(seed, kind, usize::MAX);
    let base = estimates(&run(cohort, &cfg.pipeline, cfg.pipeline.seed, false)?, "baseline", cfg.pipeline.seed);
    let w = cohort.treatments();
    let wf: Vec<f64> = w.iter().map(|&b| f64::from(u8::from(b))).collect();
    let mut report = RefutationReport::new(kind, seed, cfg.strengths.len());
    report.run_seeds = vec![base_seed];
    let mut max_delta = Vec::new();
    for (k, &r) in cfg.strengths.iter().enumerate() {
        let mut g = rng::stream(rep_seed(seed, kind, k), &[]);
        let z = confounder_column(&w, r, &mut g)?;
        let realized = stats::pearson(&z, &wf).unwrap_or(0.0);
        report.verdicts.push(Verdict::at_most(format!("corr_{r}"), (realized - r).abs(), 0.02));
        let augmented = cohort.with_extra_column("synthetic_confounder", &z);
        let est = with_deltas(
            estimates(&run(&augmented, &cfg.pipeline, cfg.pipeline.seed, false)?, &r.to_string(), cfg.pipeline.seed),
            &base,
        );
        max_delta.push(est.iter().fold(0.0f64, |m, e| m.max(e.delta.unwrap_or(0.0).abs())));
        report.estimates.extend(est);
    }
    report.baseline = base;
    report.summary = summarize(&report.estimates, &cfg.pipeline, true);
    if max_delta.len() > 1 {
        // strengths in the order given; the strongest should move estimates most
        let (lo, hi) = extreme_strengths(&cfg.strengths);
        report.verdicts.push(Verdict::at_least("delta_grows_with_strength".into(), max_delta[hi], max_delta[lo]));
    }
    Ok(report.finish())
}

fn extreme_strengths(s: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (k, v) in s.iter().enumerate() {
        if v.abs() < s[lo].abs() {
            lo = k;
        }
        if v.abs() > s[hi].abs() {
            hi = k;
        }
    }
    (lo, hi)
}

/// Importance of each feature averaged over horizons, with its name.
fn mean_importance(run: &pipeline::PipelineRun) -> Vec<(String, f64)> {
    let names = &run.kept.schema.names;
    let mut acc = vec![0.0; names.len()];
    let mut k = 0.0;
    for e in &run.estimates {
        if e.importance.len() == names.len() {
            for (a, v) in acc.iter_mut().zip(&e.importance) {
                *a += v;
            }
            k += 1.0;
        }
    }
    names.iter().cloned().zip(acc.into_iter().map(|a| if k > 0.0 { a / k } else { 0.0 })).collect()
}

/// Adds standard-normal columns and compares ATEs and importance rankings.
pub fn noise_feature_test(cohort: &SurvivalCohort, cfg: &RefutationConfig, seed: u64) -> Result<RefutationReport> {
    let kind = RefutationKind::NoiseFeatures;
    let base_run = run(cohort, &cfg.pipeline, cfg.pipeline.seed, true)?;
    let base = estimates(&base_run, "baseline", cfg.pipeline.seed);
    let mut g = rng::stream(rep_seed(seed, kind, 0), &[]);
    let mut augmented = cohort.clone();
    let mut noise_names = Vec::new();
    for j in 0..cfg.noise_features {
        let col: Vec<f64> = (0..cohort.len()).map(|_| g.sample(StandardNormal)).collect();
        let name = format!("noise_{}", j + 1);
        augmented = augmented.with_extra_column(&name, &col);
        noise_names.push(name);
    }
    let noisy_run = if cfg.noise_features == 0 {
        base_run.clone()
    } else {
        run(&augmented, &cfg.pipeline, cfg.pipeline.seed, true)?
    };
    let est = with_deltas(estimates(&noisy_run, &cfg.noise_features.to_string(), cfg.pipeline.seed), &base);

    let mut report = RefutationReport::new(kind, seed, 1);
    report.run_seeds = vec![rep_seed(seed, kind, 0)];
    for (e, b) in est.iter().zip(&base) {
        report.verdicts.push(Verdict::below(
            format!("{}_{}_delta", e.estimand.name(), e.horizon),
            e.delta.unwrap_or(0.0).abs(),
            cfg.noise_se_fraction * b.se,
        ));
    }
    let mut ranked = mean_importance(&noisy_run);
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let best_noise_rank =
        ranked.iter().position(|(n, _)| noise_names.contains(n)).map_or(f64::INFINITY, |p| (p + 1) as f64);
    report.verdicts.push(Verdict {
        check: "best_noise_importance_rank".into(),
        observed: best_noise_rank,
        threshold: cfg.top_k as f64,
        pass: best_noise_rank > cfg.top_k as f64,
    });
    report.estimates = est;
    report.baseline = base;
    report.summary = summarize(&report.estimates, &cfg.pipeline, true);
    Ok(report.finish())
}

/// Runs one refutation by kind.
pub fn refute(
    kind: RefutationKind,
    cohort: &SurvivalCohort,
    cfg: &RefutationConfig,
    seed: u64,
) -> Result<RefutationReport> {
    match kind {
        RefutationKind::DummyOutcome => dummy_outcome_test(cohort, cfg, seed),
        RefutationKind::NegativeControl => negative_control_test(cohort, cfg, seed),
        RefutationKind::SyntheticConfounder => synthetic_confounder_test(cohort, cfg, seed),
        RefutationKind::NoiseFeatures => noise_feature_test(cohort, cfg, seed),
    }
}
