//! Treatment propensity: elastic-net logistic regression with cross-validated
//! hyperparameters, overlap trimming, and correlation/density diagnostics.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::cohort::SurvivalCohort;
use crate::rng;
use crate::stats::{self, logistic, Matrix};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PropensityError {
    #[error("treatment has a single class; propensity is not estimable")]
    SingleClass,
    #[error("coordinate descent did not converge in {sweeps} sweeps (last max change {gap:e})")]
    NonConvergence { sweeps: usize, gap: f64 },
    #[error("covariate dimension {found} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("propensity fitting expects a standardized cohort")]
    NotStandardized,
    #[error("no subjects remain after trimming to [{lower}, {upper}]")]
    EmptyAfterTrim { lower: f64, upper: f64 },
    #[error("scores ({0}) and cohort ({1}) differ in length")]
    Misaligned(usize, usize),
    #[error("correlation diagnostics need at least 3 rows and 2 columns")]
    TooSmall,
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PropensityError>;

/// Coordinate-descent stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tolerance: 1e-7, max_sweeps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityConfig {
    pub alpha_grid: Vec<f64>,
    /// Explicit lambda grid; when `None` each alpha gets `n_lambda` log-spaced
    /// values from the smallest all-zero lambda downwards.
    pub lambda_grid: Option<Vec<f64>>,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub folds: usize,
    pub seed: u64,
    pub solver: SolverOptions,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        PropensityConfig {
            alpha_grid: vec![0.01, 0.25, 0.5, 0.75, 0.99],
            lambda_grid: None,
            n_lambda: 100,
            lambda_min_ratio: 1e-4,
            folds: 10,
            seed: 0,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub alpha: f64,
    pub lambda: f64,
    pub cv_folds: usize,
    /// Mean held-out binomial deviance per observation at the chosen point.
    pub cv_loss: f64,
}

impl PropensityModel {
    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.intercept + self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        clamp_open(logistic(self.linear_predictor(x)))
    }
}

fn clamp_open(p: f64) -> f64 {
    p.clamp(1e-12, 1.0 - 1e-12)
}

/// Solution of the penalized problem at one `(alpha, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub sweeps: usize,
    /// Penalized objective after every sweep, starting from the initial point.
    pub objective_trace: Vec<f64>,
}

#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `-(1/n) sum loglik + lambda (alpha |b|_1 + (1 - alpha) |b|_2^2 / 2)`.
pub fn penalized_objective(x: &Matrix, w: &[bool], intercept: f64, beta: &[f64], alpha: f64, lambda: f64) -> f64 {
    let n = x.rows() as f64;
    let loss: f64 = (0..x.rows())
        .map(|i| {
            let eta = intercept + x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            softplus(eta) - if w[i] { eta } else { 0.0 }
        })
        .sum::<f64>()
        / n;
    let l1: f64 = beta.iter().map(|b| b.abs()).sum();
    let l2: f64 = beta.iter().map(|b| b * b).sum();
    loss + lambda * (alpha * l1 + (1.0 - alpha) * l2 / 2.0)
}

#[inline]
fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

struct Solver<'a> {
    x: &'a Matrix,
    y: Vec<f64>,
    /// `X~'X~ / 4n` for the design with a leading intercept column: a uniform
    /// bound on the Hessian of the mean logistic loss.
    gram: Vec<Vec<f64>>,
}

impl<'a> Solver<'a> {
    fn new(x: &'a Matrix, w: &[bool]) -> Self {
        let n = x.rows();
        let p = x.cols() + 1;
        let mut gram = vec![vec![0.0; p]; p];
        let mut row = vec![1.0; p];
        for i in 0..n {
            row[1..].copy_from_slice(x.row(i));
            for a in 0..p {
                let ra = row[a];
                for b in a..p {
                    gram[a][b] += ra * row[b];
                }
            }
        }
        let scale = 1.0 / (4.0 * n as f64);
        for a in 0..p {
            for b in a..p {
                gram[a][b] *= scale;
                gram[b][a] = gram[a][b];
            }
        }
        Solver { x, y: w.iter().map(|&b| f64::from(u8::from(b))).collect(), gram }
    }

    /// Gradient of the mean logistic loss, intercept first.
    fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let n = self.x.rows();
        let mut g = vec![0.0; theta.len()];
        for i in 0..n {
            let row = self.x.row(i);
            let eta = theta[0] + row.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>();
            let r = logistic(eta) - self.y[i];
            g[0] += r;
            for (gj, xj) in g[1..].iter_mut().zip(row) {
                *gj += r * xj;
            }
        }
        g.iter_mut().for_each(|v| *v /= n as f64);
        g
    }

    /// Majorize-minimize: each sweep replaces the logistic loss by the
    /// quadratic upper bound `L(t) + g'd + d'Gd/2` that touches it at the
    /// current point and minimizes bound + penalty exactly by cyclic
    /// coordinate descent. The penalized objective therefore never increases
    /// from one sweep to the next.
    fn solve(
        &self,
        alpha: f64,
        lambda: f64,
        start: (f64, Vec<f64>),
        opts: SolverOptions,
        trace: bool,
    ) -> Result<PenalizedFit> {
        let p = self.gram.len();
        let mut theta = Vec::with_capacity(p);
        theta.push(start.0);
        theta.extend(start.1);
        let l1 = lambda * alpha;
        let l2 = lambda * (1.0 - alpha);
        let w_bool: Vec<bool> = self.y.iter().map(|&y| y > 0.5).collect();
        let objective = |t: &[f64]| penalized_objective(self.x, &w_bool, t[0], &t[1..], alpha, lambda);
        let mut objective_trace = Vec::new();
        if trace {
            objective_trace.push(objective(&theta));
        }
        let inner_tol = opts.tolerance * 1e-3;

        let mut sweeps = 0;
        let mut gap = f64::INFINITY;
        loop {
            if sweeps >= opts.max_sweeps {
                return Err(PropensityError::NonConvergence { sweeps, gap });
            }
            sweeps += 1;
            let g = self.gradient(&theta);
            let anchor = theta.clone();
            // G (theta - anchor), kept current as coordinates move
            let mut gd = vec![0.0; p];
            let mut full = true;
            for _ in 0..10_000 {
                let mut inner_change: f64 = 0.0;
                for j in 0..p {
                    if !full && j > 0 && theta[j] == 0.0 {
                        continue;
                    }
                    let h = self.gram[j][j];
                    if h == 0.0 {
                        continue;
                    }
                    let grad = g[j] + gd[j];
                    let z = h * theta[j] - grad;
                    let new = if j == 0 { z / h } else { soft_threshold(z, l1) / (h + l2) };
                    let d = new - theta[j];
                    if d != 0.0 {
                        theta[j] = new;
                        for (k, v) in gd.iter_mut().enumerate() {
                            *v += self.gram[k][j] * d;
                        }
                        inner_change = inner_change.max(d.abs());
                    }
                }
                if inner_change < inner_tol {
                    if full {
                        break;
                    }
                    full = true;
                } else {
                    full = false;
                }
            }
            if trace {
                objective_trace.push(objective(&theta));
            }
            gap = theta.iter().zip(&anchor).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if gap < opts.tolerance {
                break;
            }
        }
        let intercept = theta[0];
        theta.remove(0);
        Ok(PenalizedFit { intercept, coefficients: theta, sweeps, objective_trace })
    }
}

fn check_classes(w: &[bool]) -> Result<()> {
    let k = w.iter().filter(|&&b| b).count();
    if k == 0 || k == w.len() {
        return Err(PropensityError::SingleClass);
    }
    Ok(())
}

fn null_intercept(w: &[bool]) -> f64 {
    let m = w.iter().filter(|&&b| b).count() as f64 / w.len() as f64;
    (m / (1.0 - m)).ln()
}

/// Penalized logistic fit at a single `(alpha, lambda)`, started from zero
/// coefficients and the null intercept.
pub fn fit_penalized(x: &Matrix, w: &[bool], alpha: f64, lambda: f64, opts: SolverOptions) -> Result<PenalizedFit> {
    check_classes(w)?;
    if x.rows() != w.len() {
        return Err(PropensityError::Misaligned(w.len(), x.rows()));
    }
    let solver = Solver::new(x, w);
    solver.solve(alpha, lambda, (null_intercept(w), vec![0.0; x.cols()]), opts, true)
}

/// Smallest lambda at which every coefficient is zero.
pub fn lambda_max(x: &Matrix, w: &[bool], alpha: f64) -> f64 {
    let n = x.rows() as f64;
    let wbar = w.iter().filter(|&&b| b).count() as f64 / n;
    let top = (0..x.cols())
        .map(|j| ((0..x.rows()).map(|i| x.get(i, j) * (f64::from(u8::from(w[i])) - wbar)).sum::<f64>() / n).abs())
        .fold(0.0, f64::max);
    top / alpha.max(1e-3)
}

fn lambda_path(x: &Matrix, w: &[bool], alpha: f64, cfg: &PropensityConfig) -> Vec<f64> {
    if let Some(g) = &cfg.lambda_grid {
        let mut g = g.clone();
        g.sort_by(|a, b| b.total_cmp(a));
        return g;
    }
    let hi = lambda_max(x, w, alpha).max(1e-12);
    stats::log_grid_desc(hi, hi * cfg.lambda_min_ratio, cfg.n_lambda)
}

fn path_fits(x: &Matrix, w: &[bool], alpha: f64, lambdas: &[f64], opts: SolverOptions) -> Result<Vec<(f64, Vec<f64>)>> {
    let solver = Solver::new(x, w);
    let mut start = (null_intercept(w), vec![0.0; x.cols()]);
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let fit = solver.solve(alpha, lambda, start, opts, false)?;
        start = (fit.intercept, fit.coefficients.clone());
        out.push((fit.intercept, fit.coefficients));
    }
    Ok(out)
}

fn deviance(x: &Matrix, w: &[bool], b0: f64, beta: &[f64]) -> f64 {
    let n = x.rows() as f64;
    2.0 * (0..x.rows())
        .map(|i| {
            let eta = b0 + x.row(i).iter().zip(beta).map(|(a, b)| a * b).sum::<f64>();
            softplus(eta) - if w[i] { eta } else { 0.0 }
        })
        .sum::<f64>()
        / n
}

/// Fold labels stratified on treatment, seeded.
pub fn stratified_folds(w: &[bool], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, &[rng::tag::PROPENSITY_FOLDS]);
    let mut label = vec![0; w.len()];
    for arm in [true, false] {
        let mut idx: Vec<usize> = (0..w.len()).filter(|&i| w[i] == arm).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            label[i] = k % folds;
        }
    }
    label
}

/// Cross-validated elastic-net propensity model on a standardized cohort.
pub fn fit_elastic_net(cohort: &SurvivalCohort, cfg: &PropensityConfig) -> Result<PropensityModel> {
    if !cohort.standardized {
        return Err(PropensityError::NotStandardized);
    }
    fit_elastic_net_matrix(&cohort.covariates(), &cohort.treatments(), cfg)
}

pub fn fit_elastic_net_matrix(x: &Matrix, w: &[bool], cfg: &PropensityConfig) -> Result<PropensityModel> {
    check_classes(w)?;
    if x.rows() != w.len() {
        return Err(PropensityError::Misaligned(w.len(), x.rows()));
    }
    if cfg.folds < 2 || cfg.alpha_grid.is_empty() {
        return Err(PropensityError::Config("need >= 2 folds and a non-empty alpha grid".into()));
    }
    if cfg.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(PropensityError::Config("alpha must lie in [0, 1]".into()));
    }
    let labels = stratified_folds(w, cfg.folds, cfg.seed);
    let paths: Vec<Vec<f64>> = cfg.alpha_grid.iter().map(|&a| lambda_path(x, w, a, cfg)).collect();

    let jobs: Vec<(usize, usize)> =
        (0..cfg.alpha_grid.len()).flat_map(|a| (0..cfg.folds).map(move |f| (a, f))).collect();
    let fold_dev: Vec<Result<Vec<f64>>> = jobs
        .par_iter()
        .map(|&(a, f)| {
            let train: Vec<usize> = (0..w.len()).filter(|&i| labels[i] != f).collect();
            let test: Vec<usize> = (0..w.len()).filter(|&i| labels[i] == f).collect();
            let xtr = x.select_rows(&train);
            let wtr: Vec<bool> = train.iter().map(|&i| w[i]).collect();
            check_classes(&wtr)?;
            let xte = x.select_rows(&test);
            let wte: Vec<bool> = test.iter().map(|&i| w[i]).collect();
            let fits = path_fits(&xtr, &wtr, cfg.alpha_grid[a], &paths[a], cfg.solver)?;
            Ok(fits.iter().map(|(b0, b)| deviance(&xte, &wte, *b0, b)).collect())
        })
        .collect();

    let mut best: Option<(f64, usize, usize)> = None;
    for (a, path) in paths.iter().enumerate() {
        for l in 0..path.len() {
            let mut sum = 0.0;
            for f in 0..cfg.folds {
                sum += fold_dev[a * cfg.folds + f].as_ref().map_err(Clone::clone)?[l];
            }
            let cv = sum / cfg.folds as f64;
            if best.map_or(true, |b| cv < b.0) {
                best = Some((cv, a, l));
            }
        }
    }
    let (cv_loss, a, l) = best.expect("non-empty grid");
    let fits = path_fits(x, w, cfg.alpha_grid[a], &paths[a][..=l], cfg.solver)?;
    let (intercept, coefficients) = fits.into_iter().last().expect("non-empty path");
    Ok(PropensityModel {
        intercept,
        coefficients,
        alpha: cfg.alpha_grid[a],
        lambda: paths[a][l],
        cv_folds: cfg.folds,
        cv_loss,
    })
}

/// `e_i = 1 / (1 + exp(-(intercept + beta . x_i)))`, kept strictly inside (0, 1).
pub fn predict_scores(model: &PropensityModel, cohort: &SurvivalCohort) -> Result<Vec<f64>> {
    predict_scores_matrix(model, &cohort.covariates())
}

pub fn predict_scores_matrix(model: &PropensityModel, x: &Matrix) -> Result<Vec<f64>> {
    if x.cols() != model.coefficients.len() {
        return Err(PropensityError::DimensionMismatch { expected: model.coefficients.len(), found: x.cols() });
    }
    Ok((0..x.rows()).map(|i| model.score(x.row(i))).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimResult {
    pub kept_ids: Vec<String>,
    pub trimmed_ids: Vec<String>,
    pub kept_index: Vec<usize>,
    pub trimmed_index: Vec<usize>,
    pub lower: f64,
    pub upper: f64,
}

/// Keeps subjects with `lower <= e_i <= upper`.
pub fn trim(cohort: &SurvivalCohort, scores: &[f64], lower: f64, upper: f64) -> Result<TrimResult> {
    if scores.len() != cohort.len() {
        return Err(PropensityError::Misaligned(scores.len(), cohort.len()));
    }
    let (kept_index, trimmed_index): (Vec<usize>, Vec<usize>) =
        (0..scores.len()).partition(|&i| lower <= scores[i] && scores[i] <= upper);
    if kept_index.is_empty() {
        return Err(PropensityError::EmptyAfterTrim { lower, upper });
    }
    let ids = |idx: &[usize]| idx.iter().map(|&i| cohort.subjects[i].id.clone()).collect();
    Ok(TrimResult {
        kept_ids: ids(&kept_index),
        trimmed_ids: ids(&trimmed_index),
        kept_index,
        trimmed_index,
        lower,
        upper,
    })
}

/// Trimming at `[tau, 1 - tau]` for each threshold.
pub fn trim_sensitivity(cohort: &SurvivalCohort, scores: &[f64], thresholds: &[f64]) -> Result<Vec<TrimResult>> {
    thresholds.iter().map(|&t| trim(cohort, scores, t, 1.0 - t)).collect()
}

/// Gaussian kernel density estimate evaluated on an even grid that extends
/// five bandwidths past the data, so the returned curve carries all its mass.
pub fn kde(values: &[f64], grid_points: usize) -> Vec<(f64, f64)> {
    if values.is_empty() || grid_points < 2 {
        return Vec::new();
    }
    let n = values.len() as f64;
    let sd = stats::sd(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| sorted[((p * (n - 1.0)).round() as usize).min(sorted.len() - 1)];
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = if spread > 0.0 { 0.9 * spread * n.powf(-0.2) } else { 1e-3 };
    let lo = sorted[0] - 5.0 * h;
    let hi = sorted[sorted.len() - 1] + 5.0 * h;
    let step = (hi - lo) / (grid_points as f64 - 1.0);
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..grid_points)
        .map(|k| {
            let x = lo + step * k as f64;
            let d = values.iter().map(|v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>() * norm;
            (x, d)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

impl CorrelationMethod {
    pub fn name(self) -> &'static str {
        match self {
            CorrelationMethod::Pearson => "pearson",
            CorrelationMethod::Spearman => "spearman",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub method: CorrelationMethod,
    pub names: Vec<String>,
    /// `None` where a column is constant.
    pub r: Vec<Vec<Option<f64>>>,
    pub p_values: Vec<Vec<Option<f64>>>,
    /// Bonferroni significance at `alpha / n_pairs`.
    pub significant: Vec<Vec<bool>>,
    pub alpha: f64,
    pub n_pairs: usize,
}

impl CorrelationReport {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        self.r[i][j]
    }

    /// Long format: `a, b, r, p_value, significant`; constant columns leave
    /// `r` and `p_value` empty.
    pub fn write_csv(&self, out: impl std::io::Write) -> csv::Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["a", "b", "r", "p_value", "significant"])?;
        for (i, a) in self.names.iter().enumerate() {
            for (j, b) in self.names.iter().enumerate() {
                w.write_record([
                    a.clone(),
                    b.clone(),
                    opt(self.r[i][j]),
                    opt(self.p_values[i][j]),
                    self.significant[i][j].to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Correlation matrix with two-sided t-test p-values and a Bonferroni mask.
pub fn correlation_diagnostics(
    columns: &[(String, Vec<f64>)],
    method: CorrelationMethod,
    alpha: f64,
) -> Result<CorrelationReport> {
    let k = columns.len();
    let n = columns.first().map_or(0, |c| c.1.len());
    if k < 2 || n < 3 || columns.iter().any(|c| c.1.len() != n) {
        return Err(PropensityError::TooSmall);
    }
    let data: Vec<Vec<f64>> = columns
        .iter()
        .map(|(_, c)| match method {
            CorrelationMethod::Pearson => c.clone(),
            CorrelationMethod::Spearman => stats::ranks(c),
        })
        .collect();
    let constant: Vec<bool> = data.iter().map(|c| c.iter().all(|v| *v == c[0])).collect();
    let n_pairs = k * (k - 1) / 2;
    let level = alpha / n_pairs as f64;
    let df = n as f64 - 2.0;
    let tdist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let mut r = vec![vec![None; k]; k];
    let mut p_values = vec![vec![None; k]; k];
    let mut significant = vec![vec![false; k]; k];
    for i in 0..k {
        for j in i..k {
            if constant[i] || constant[j] {
                continue;
            }
            let rij = if i == j { Some(1.0) } else { stats::pearson(&data[i], &data[j]) };
            let Some(rij) = rij else { continue };
            let p = if rij.abs() >= 1.0 {
                0.0
            } else {
                let t = rij * (df / (1.0 - rij * rij)).sqrt();
                (2.0 * (1.0 - tdist.cdf(t.abs()))).clamp(0.0, 1.0)
            };
            for (a, b) in [(i, j), (j, i)] {
                r[a][b] = Some(rij);
                p_values[a][b] = Some(p);
                significant[a][b] = i != j && p < level;
            }
        }
    }
    Ok(CorrelationReport {
        method,
        names: columns.iter().map(|c| c.0.clone()).collect(),
        r,
        p_values,
        significant,
        alpha,
        n_pairs,
    })
}
