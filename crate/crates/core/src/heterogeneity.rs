//! Monte-Carlo Shapley attributions for a black-box effect predictor, and
//! correlation screens between covariates, attributions and effects.
//!
//! Each iteration draws a feature permutation and one background row, then
//! walks the permutation switching features from background to subject
//! values; a feature's marginal contribution is the change in prediction.
//! Iterations come in antithetic pairs (a permutation and its reverse on
//! the same background row), and background rows are visited cyclically.
//! Every 100 iterations the running means are compared with the previous
//! check; once the largest change is below epsilon the run stops at the end
//! of the current pass over the background. Raw averages are renormalized so that
//! attributions sum exactly to `prediction - baseline`.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::propensity::{self, CorrelationMethod, CorrelationReport, PropensityError};
use crate::rng;
use crate::stats::Matrix;

#[derive(Debug, Error)]
pub enum HeterogeneityError {
    #[error("model returned a non-finite prediction for subject {subject}")]
    NonFiniteModelOutput { subject: usize },
    #[error("background set is empty")]
    EmptyBackground,
    #[error("dimension mismatch: expected {expected} columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Correlation(#[from] PropensityError),
}

pub type Result<T> = std::result::Result<T, HeterogeneityError>;

/// How often, in iterations, the running means are checked for convergence.
pub const CHECK_EVERY: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapConfig {
    /// Upper bound on permutations per subject.
    pub iterations: usize,
    pub epsilon: f64,
    /// Background rows drawn from the reference cohort.
    pub background_size: usize,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        ShapConfig { iterations: 1000, epsilon: 0.01, background_size: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapMatrix {
    /// `values[i][j]`: contribution of feature `j` to subject `i`.
    pub values: Vec<Vec<f64>>,
    /// Mean prediction over the background set.
    pub baseline: f64,
    pub predictions: Vec<f64>,
    /// `prediction - baseline - sum(raw)` before renormalization.
    pub raw_residuals: Vec<f64>,
    /// Permutations used per subject.
    pub iterations: Vec<usize>,
    /// Whether every subject met the convergence threshold.
    pub converged: bool,
}

impl ShapMatrix {
    pub fn n_subjects(&self) -> usize {
        self.values.len()
    }

    pub fn n_features(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    /// Mean absolute attribution per feature.
    pub fn mean_abs(&self) -> Vec<f64> {
        let n = self.n_subjects().max(1) as f64;
        (0..self.n_features()).map(|j| self.values.iter().map(|r| r[j].abs()).sum::<f64>() / n).collect()
    }

    /// One row per subject: `id, feature...`.
    pub fn write_csv(&self, ids: &[String], names: &[String], out: impl std::io::Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(std::iter::once("id").chain(names.iter().map(String::as_str)))?;
        for (id, row) in ids.iter().zip(&self.values) {
            w.write_record(std::iter::once(id.clone()).chain(row.iter().map(f64::to_string)))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format `feature, id, value, shap` for per-feature scatter plots.
    pub fn write_scatter_csv(
        &self,
        ids: &[String],
        names: &[String],
        x: &Matrix,
        out: impl std::io::Write,
    ) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature", "id", "value", "shap"])?;
        for (j, name) in names.iter().enumerate() {
            for (i, id) in ids.iter().enumerate() {
                w.write_record([name.clone(), id.clone(), x.get(i, j).to_string(), self.values[i][j].to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded subsample of `size` rows (all rows when the matrix is smaller).
pub fn background_sample(x: &Matrix, size: usize, seed: u64) -> Matrix {
    if x.rows() <= size {
        return x.clone();
    }
    let mut idx: Vec<usize> = (0..x.rows()).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::tag::SHAP, u64::MAX]));
    idx.truncate(size);
    idx.sort_unstable();
    x.select_rows(&idx)
}

fn checked(v: f64, subject: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(HeterogeneityError::NonFiniteModelOutput { subject })
    }
}

/// Spreads `residual` over features in proportion to `|raw|`, or evenly
/// when every raw value is zero.
fn renormalize(raw: &mut [f64], residual: f64) {
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    if total > 0.0 {
        for v in raw.iter_mut() {
            *v += residual * v.abs() / total;
        }
    } else if !raw.is_empty() {
        let share = residual / raw.len() as f64;
        raw.iter_mut().for_each(|v| *v += share);
    }
}

struct SubjectShap {
    values: Vec<f64>,
    prediction: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

fn explain_subject<F>(
    predict: &F,
    x: &[f64],
    background: &Matrix,
    baseline: f64,
    cfg: &ShapConfig,
    subject: usize,
) -> Result<SubjectShap>
where
    F: Fn(&[f64]) -> f64,
{
    let p = x.len();
    let prediction = checked(predict(x), subject)?;
    let mut g = rng::stream(cfg.seed, &[rng::tag::SHAP, subject as u64]);
    let mut sums = vec![0.0; p];
    let mut last_means = vec![0.0; p];
    let mut order: Vec<usize> = (0..p).collect();
    let mut z = vec![0.0; p];
    let mut done = 0;
    let mut settled = false;
    let mut converged = false;
    let start = (subject * 7919) % background.rows();
    // early stops wait for the end of a pass over the background so every
    // row carries the same weight
    let cycle = 2 * background.rows();
    while done < cfg.iterations {
        order.shuffle(&mut g);
        let b = background.row((start + done / 2) % background.rows());
        for pass in 0..2 {
            if done >= cfg.iterations {
                break;
            }
            z.copy_from_slice(b);
            let mut prev = checked(predict(&z), subject)?;
            for k in 0..p {
                let j = if pass == 0 { order[k] } else { order[p - 1 - k] };
                z[j] = x[j];
                let next = checked(predict(&z), subject)?;
                sums[j] += next - prev;
                prev = next;
            }
            done += 1;
            if done % CHECK_EVERY == 0 {
                let n = done as f64;
                let change = sums.iter().zip(&last_means).fold(0.0f64, |m, (s, l)| m.max((s / n - l).abs()));
                for (l, s) in last_means.iter_mut().zip(&sums) {
                    *l = s / n;
                }
                settled = done > CHECK_EVERY && change < cfg.epsilon;
            }
            if settled && done % cycle == 0 {
                converged = true;
                break;
            }
        }
        if converged {
            break;
        }
    }
    let n = done.max(1) as f64;
    let mut values: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let residual = prediction - baseline - values.iter().sum::<f64>();
    renormalize(&mut values, residual);
    Ok(SubjectShap { values, prediction, residual, iterations: done, converged })
}

/// Attributions for every row of `x` against `background`. Subjects are
/// processed in parallel; each has its own random stream, so results do not
/// depend on the thread count.
pub fn shap_monte_carlo<F>(predict: F, x: &Matrix, background: &Matrix, cfg: &ShapConfig) -> Result<ShapMatrix>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if background.rows() == 0 {
        return Err(HeterogeneityError::EmptyBackground);
    }
    if background.cols() != x.cols() {
        return Err(HeterogeneityError::DimensionMismatch { expected: x.cols(), found: background.cols() });
    }
    if cfg.iterations == 0 || !(cfg.epsilon > 0.0) {
        return Err(HeterogeneityError::Config("need iterations > 0 and epsilon > 0".into()));
    }
    let mut baseline = 0.0;
    for i in 0..background.rows() {
        let v = checked(predict(background.row(i)), i)?;
        baseline += (v - baseline) / (i as f64 + 1.0);
    }
    let rows: Vec<SubjectShap> = (0..x.rows())
        .into_par_iter()
        .map(|i| explain_subject(&predict, x.row(i), background, baseline, cfg, i))
        .collect::<Result<_>>()?;
    let mut out = ShapMatrix {
        values: Vec::with_capacity(rows.len()),
        baseline,
        predictions: Vec::with_capacity(rows.len()),
        raw_residuals: Vec::with_capacity(rows.len()),
        iterations: Vec::with_capacity(rows.len()),
        converged: true,
    };
    for r in rows {
        out.converged &= r.converged;
        out.values.push(r.values);
        out.predictions.push(r.prediction);
        out.raw_residuals.push(r.residual);
        out.iterations.push(r.iterations);
    }
    Ok(out)
}

/// Pearson and Spearman matrices over `covariates | shap_* | cate`.
pub fn effect_correlations(
    names: &[String],
    covariates: &Matrix,
    shap: &ShapMatrix,
    cate: &[f64],
) -> Result<(CorrelationReport, CorrelationReport)> {
    let n = covariates.rows();
    if shap.n_subjects() != n || cate.len() != n {
        return Err(HeterogeneityError::Config(format!(
            "misaligned inputs: {n} covariate rows, {} attribution rows, {} effects",
            shap.n_subjects(),
            cate.len()
        )));
    }
    if names.len() != covariates.cols() || shap.n_features() != covariates.cols() {
        return Err(HeterogeneityError::DimensionMismatch { expected: covariates.cols(), found: shap.n_features() });
    }
    let mut cols: Vec<(String, Vec<f64>)> = Vec::with_capacity(2 * names.len() + 1);
    for (j, name) in names.iter().enumerate() {
        cols.push((name.clone(), covariates.column(j)));
    }
    for (j, name) in names.iter().enumerate() {
        cols.push((format!("shap_{name}"), shap.column(j)));
    }
    cols.push(("cate".into(), cate.to_vec()));
    let pearson = propensity::correlation_diagnostics(&cols, CorrelationMethod::Pearson, 0.05)?;
    let spearman = propensity::correlation_diagnostics(&cols, CorrelationMethod::Spearman, 0.05)?;
    Ok((pearson, spearman))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ShapConfig {
        ShapConfig { seed: 3, ..ShapConfig::default() }
    }

    #[test]
    fn additive_model_is_exact() {
        let bg = Matrix::from_rows(&[[-1.0, 2.0, 0.5], [1.0, -2.0, 0.0]], 3);
        let x = Matrix::from_rows(&[[1.0, 5.0, 5.0]], 3);
        let s = shap_monte_carlo(|z| z[0], &x, &bg, &cfg()).unwrap();
        assert!((s.values[0][0] - 1.0).abs() < 1e-12);
        assert_eq!(&s.values[0][1..], &[0.0, 0.0]);
        assert_eq!(s.baseline, 0.0);
    }

    #[test]
    fn constant_model_gives_zero() {
        let bg = Matrix::from_rows(&[[0.0, 1.0]], 2);
        let x = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]], 2);
        let s = shap_monte_carlo(|_| 2.5, &x, &bg, &cfg()).unwrap();
        assert_eq!(s.baseline, 2.5);
        assert!(s.values.iter().flatten().all(|v| *v == 0.0));
        assert!(s.converged);
    }

    #[test]
    fn product_splits_evenly() {
        let bg = Matrix::from_rows(&[[0.0, 0.0]], 2);
        let x = Matrix::from_rows(&[[1.0, 1.0]], 2);
        let s = shap_monte_carlo(|z| z[0] * z[1], &x, &bg, &cfg()).unwrap();
        assert!((s.values[0][0] - 0.5).abs() < 1e-12);
        assert!((s.values[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn non_finite_output_is_reported() {
        let bg = Matrix::from_rows(&[[0.0]], 1);
        let x = Matrix::from_rows(&[[1.0]], 1);
        let err = shap_monte_carlo(|z| 1.0 / (z[0] - 1.0).abs(), &x, &bg, &cfg()).unwrap_err();
        assert!(matches!(err, HeterogeneityError::NonFiniteModelOutput { .. }));
        assert!(matches!(
            shap_monte_carlo(|_| 0.0, &x, &Matrix::zeros(0, 1), &cfg()),
            Err(HeterogeneityError::EmptyBackground)
        ));
    }

    #[test]
    fn renormalize_is_proportional() {
        let mut v = vec![1.0, -3.0, 0.0];
        renormalize(&mut v, 0.4);
        assert!((v[0] - 1.1).abs() < 1e-12 && (v[1] + 2.7).abs() < 1e-12 && v[2] == 0.0);
        let mut z = vec![0.0; 4];
        renormalize(&mut z, 1.0);
        assert_eq!(z, vec![0.25; 4]);
    }
}
