//! Continuous effect trajectories fused from horizon-wise estimates.
//!
//! Two fits are offered over a series `(h, ate_h, se_h)`:
//!
//! * an inverse-variance weighted quadratic, which yields a closed-form peak
//!   time, maximum effect and half-life;
//! * a natural cubic smoothing spline with knots at the horizons and its
//!   smoothing parameter chosen by weighted leave-one-out cross-validation,
//!   from which peaks and inflection points are read off numerically.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forest::{Estimand, HorizonEstimate};

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("need at least {needed} horizons, got {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("weighted design matrix is singular")]
    SingularDesign,
    #[error("invalid effect series: {0}")]
    InvalidSeries(String),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrajectoryError>;

/// Normal quantile for pointwise 95% intervals.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSeries {
    pub horizons: Vec<f64>,
    pub effects: Vec<f64>,
    pub ses: Vec<f64>,
    pub estimand: Estimand,
}

impl EffectSeries {
    pub fn new(horizons: Vec<f64>, effects: Vec<f64>, ses: Vec<f64>, estimand: Estimand) -> Result<Self> {
        let bad = |m: &str| Err(TrajectoryError::InvalidSeries(m.to_string()));
        if horizons.len() != effects.len() || horizons.len() != ses.len() {
            return bad("horizons, effects and ses differ in length");
        }
        if horizons.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return bad("horizons must be positive and finite");
        }
        if horizons.windows(2).any(|w| w[0] >= w[1]) {
            return bad("horizons must be strictly increasing");
        }
        if effects.iter().any(|e| !e.is_finite()) {
            return bad("effects must be finite");
        }
        if ses.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("standard errors must be positive and finite");
        }
        Ok(EffectSeries { horizons, effects, ses, estimand })
    }

    pub fn from_estimates(estimates: &[HorizonEstimate]) -> Result<Self> {
        let estimand = estimates.first().map_or(Estimand::Sp, |e| e.estimand);
        if estimates.iter().any(|e| e.estimand != estimand) {
            return Err(TrajectoryError::InvalidSeries("mixed estimands".into()));
        }
        EffectSeries::new(
            estimates.iter().map(|e| e.horizon).collect(),
            estimates.iter().map(|e| e.ate).collect(),
            estimates.iter().map(|e| e.ate_se).collect(),
            estimand,
        )
    }

    pub fn len(&self) -> usize {
        self.horizons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.horizons.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.ses.iter().map(|s| 1.0 / (s * s)).collect()
    }

    fn span(&self) -> (f64, f64) {
        (self.horizons[0], self.horizons[self.len() - 1])
    }
}

/// Reads `(horizon, ate, se)` rows. A file with an `estimand` column yields
/// one series per estimand (in order of first appearance); otherwise all rows
/// form one series tagged `default`.
pub fn read_series_csv(reader: impl Read, default: Estimand) -> Result<Vec<EffectSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let missing = |name: &str| TrajectoryError::InvalidSeries(format!("missing column `{name}`"));
    let hc = col("horizon").or_else(|| col("months")).ok_or_else(|| missing("horizon"))?;
    if col("ate").is_none() && (col("ate_sp").is_some() || col("ate_rmst").is_some()) {
        return read_wide(rdr, hc, &col);
    }
    let ac = col("ate").ok_or_else(|| missing("ate"))?;
    let sc = col("se").ok_or_else(|| missing("se"))?;
    let ec = col("estimand");
    let mut groups: Vec<(Estimand, Vec<[f64; 3]>)> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| {
            rec[c]
                .parse::<f64>()
                .map_err(|_| TrajectoryError::InvalidSeries(format!("row {}: `{}` is not a number", line + 2, &rec[c])))
        };
        let est = match ec {
            Some(c) => rec[c].parse::<Estimand>().map_err(TrajectoryError::InvalidSeries)?,
            None => default,
        };
        let row = [num(hc)?, num(ac)?, num(sc)?];
        match groups.iter_mut().find(|g| g.0 == est) {
            Some(g) => g.1.push(row),
            None => groups.push((est, vec![row])),
        }
    }
    groups
        .into_iter()
        .map(|(est, rows)| {
            EffectSeries::new(
                rows.iter().map(|r| r[0]).collect(),
                rows.iter().map(|r| r[1]).collect(),
                rows.iter().map(|r| r[2]).collect(),
                est,
            )
        })
        .collect()
}

/// Wide layout: `horizon, ate_sp, se_sp, ate_rmst, se_rmst` (either pair
/// may be absent).
fn read_wide(
    mut rdr: csv::Reader<impl Read>,
    hc: usize,
    col: &dyn Fn(&str) -> Option<usize>,
) -> Result<Vec<EffectSeries>> {
    let mut pairs = Vec::new();
    for est in [Estimand::Sp, Estimand::Rmst] {
        let (a, s) = (format!("ate_{}", est.name()), format!("se_{}", est.name()));
        match (col(&a), col(&s)) {
            (Some(a), Some(s)) => pairs.push((est, a, s)),
            (None, None) => {}
            _ => return Err(TrajectoryError::InvalidSeries(format!("`{a}` and `{s}` must appear together"))),
        }
    }
    let mut data: Vec<[Vec<f64>; 3]> = vec![Default::default(); pairs.len()];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| {
            rec[c]
                .parse::<f64>()
                .map_err(|_| TrajectoryError::InvalidSeries(format!("row {}: `{}` is not a number", line + 2, &rec[c])))
        };
        for (d, &(_, a, s)) in data.iter_mut().zip(&pairs) {
            d[0].push(num(hc)?);
            d[1].push(num(a)?);
            d[2].push(num(s)?);
        }
    }
    pairs.iter().zip(data).map(|(&(est, _, _), [h, a, s])| EffectSeries::new(h, a, s, est)).collect()
}

pub fn read_series_file(path: &Path, default: Estimand) -> Result<Vec<EffectSeries>> {
    read_series_csv(std::fs::File::open(path)?, default)
}

// ---------------------------------------------------------------------------
// Weighted quadratic

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFit {
    /// `[b0, b1, b2]` of `b0 + b1 t + b2 t^2` in original time units.
    pub coefficients: [f64; 3],
    /// `(X'WX)^-1` in original time units.
    pub covariance: [[f64; 3]; 3],
    /// Vertex time, only for a concave fit.
    pub t_peak: Option<f64>,
    pub max_effect: Option<f64>,
    pub half_life: Option<f64>,
    /// Largest horizon of the input series; bounds the half-life search.
    pub max_horizon: f64,
    origin: f64,
    scale: f64,
    scaled_coefficients: [f64; 3],
    scaled_covariance: [[f64; 3]; 3],
}

impl QuadraticFit {
    pub fn eval(&self, t: f64) -> f64 {
        let [b0, b1, b2] = self.coefficients;
        b0 + b1 * t + b2 * t * t
    }

    /// Pointwise standard error of the fitted curve.
    pub fn se(&self, t: f64) -> f64 {
        let s = (t - self.origin) / self.scale;
        let x = [1.0, s, s * s];
        let mut v = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                v += x[i] * self.scaled_covariance[i][j] * x[j];
            }
        }
        v.max(0.0).sqrt()
    }

    /// Pointwise normal-theory 95% interval.
    pub fn ci(&self, t: f64) -> (f64, f64) {
        let (m, s) = (self.eval(t), self.se(t));
        (m - Z_95 * s, m + Z_95 * s)
    }

    pub fn ci_curves(&self, grid: &[f64]) -> Vec<(f64, f64)> {
        grid.iter().map(|&t| self.ci(t)).collect()
    }
}

/// Inverse-variance weighted least-squares quadratic.
pub fn fit_quadratic(series: &EffectSeries) -> Result<QuadraticFit> {
    let n = series.len();
    if n < 3 {
        return Err(TrajectoryError::TooFewPoints { needed: 3, found: n });
    }
    let (lo, hi) = series.span();
    let scale = hi - lo;
    if !(scale > 0.0) {
        return Err(TrajectoryError::SingularDesign);
    }
    // sqrt(W) X and sqrt(W) y on the scaled axis s = (t - lo) / scale
    let w = series.weights();
    let mut xw = DMatrix::<f64>::zeros(n, 3);
    let mut yw = DVector::<f64>::zeros(n);
    for i in 0..n {
        let s = (series.horizons[i] - lo) / scale;
        let r = w[i].sqrt();
        xw[(i, 0)] = r;
        xw[(i, 1)] = r * s;
        xw[(i, 2)] = r * s * s;
        yw[i] = r * series.effects[i];
    }
    let qr = xw.qr();
    let rm = qr.r();
    let rmax = (0..3).map(|k| rm[(k, k)].abs()).fold(0.0, f64::max);
    if (0..3).any(|k| !(rm[(k, k)].abs() > 1e-12 * rmax)) {
        return Err(TrajectoryError::SingularDesign);
    }
    let qty = qr.q().transpose() * &yw;
    let gamma = rm.solve_upper_triangular(&qty).ok_or(TrajectoryError::SingularDesign)?;
    let rinv = rm.solve_upper_triangular(&DMatrix::identity(3, 3)).ok_or(TrajectoryError::SingularDesign)?;
    let cov_g = &rinv * rinv.transpose();

    let g = Vector3::new(gamma[0], gamma[1], gamma[2]);
    // d(beta)/d(gamma) for t = lo + scale * s
    let jac = Matrix3::new(
        1.0,
        -lo / scale,
        lo * lo / (scale * scale),
        0.0,
        1.0 / scale,
        -2.0 * lo / (scale * scale),
        0.0,
        0.0,
        1.0 / (scale * scale),
    );
    let beta = jac * g;
    let cg = Matrix3::from_fn(|i, j| cov_g[(i, j)]);
    let cb = jac * cg * jac.transpose();

    let coefficients = [beta[0], beta[1], beta[2]];
    let mut fit = QuadraticFit {
        coefficients,
        covariance: std::array::from_fn(|i| std::array::from_fn(|j| cb[(i, j)])),
        t_peak: None,
        max_effect: None,
        half_life: None,
        max_horizon: hi,
        origin: lo,
        scale,
        scaled_coefficients: [g[0], g[1], g[2]],
        scaled_covariance: std::array::from_fn(|i| std::array::from_fn(|j| cg[(i, j)])),
    };
    let [b0, b1, b2] = coefficients;
    if b2 < 0.0 {
        let tp = -b1 / (2.0 * b2);
        fit.t_peak = Some(tp);
        fit.max_effect = Some(b0 + b1 * tp + b2 * tp * tp);
        fit.half_life = half_life(&fit);
    }
    Ok(fit)
}

/// Time from the peak until the quadratic falls to half its maximum,
/// searched by bisection on `[t_peak, 2 * max horizon]`.
pub fn half_life(fit: &QuadraticFit) -> Option<f64> {
    let (tp, max) = (fit.t_peak?, fit.max_effect?);
    if !(max > 0.0) {
        return None;
    }
    let target = 0.5 * max;
    let f = |t: f64| fit.eval(t) - target;
    let (mut a, mut b) = (tp, 2.0 * fit.max_horizon);
    if !(b > a) || f(b) > 0.0 {
        return None;
    }
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm.abs() < 1e-9 || b - a < 1e-12 {
            a = m;
            b = m;
            break;
        }
        if fm > 0.0 {
            a = m;
        } else {
            b = m;
        }
    }
    let lambda = 0.5 * (a + b) - tp;
    (lambda > 0.0).then_some(lambda)
}

// ---------------------------------------------------------------------------
// Smoothing spline

/// Number of smoothing parameters searched by cross-validation.
pub const SPLINE_GRID_SIZE: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFit {
    pub knots: Vec<f64>,
    /// Fitted values at the knots.
    pub values: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    pub second_derivatives: Vec<f64>,
    pub lambda: f64,
    pub cv_score: f64,
}

impl SplineFit {
    fn piece(&self, t: f64) -> (usize, f64) {
        let n = self.knots.len();
        let k = match self.knots.partition_point(|&x| x <= t) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        (k, t - self.knots[k])
    }

    /// Cubic coefficients `(a, b, c, d)` of piece `k` in `u = t - knot_k`.
    fn coefs(&self, k: usize) -> (f64, f64, f64, f64) {
        let h = self.knots[k + 1] - self.knots[k];
        let (g0, g1) = (self.values[k], self.values[k + 1]);
        let (c0, c1) = (self.second_derivatives[k], self.second_derivatives[k + 1]);
        (g0, (g1 - g0) / h - h * (2.0 * c0 + c1) / 6.0, c0 / 2.0, (c1 - c0) / (6.0 * h))
    }

    /// Spline value; linear beyond the boundary knots.
    pub fn eval(&self, t: f64) -> f64 {
        let (lo, hi) = (self.knots[0], self.knots[self.knots.len() - 1]);
        if t < lo {
            return self.eval(lo) + (t - lo) * self.derivative(lo);
        }
        if t > hi {
            return self.eval(hi) + (t - hi) * self.derivative(hi);
        }
        let (k, u) = self.piece(t);
        let (a, b, c, d) = self.coefs(k);
        a + u * (b + u * (c + u * d))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let (lo, hi) = (self.knots[0], self.knots[self.knots.len() - 1]);
        let (k, u) = self.piece(t.clamp(lo, hi));
        let (_, b, c, d) = self.coefs(k);
        b + u * (2.0 * c + 3.0 * d * u)
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let (lo, hi) = (self.knots[0], self.knots[self.knots.len() - 1]);
        if t < lo || t > hi {
            return 0.0;
        }
        let (k, u) = self.piece(t);
        let (_, _, c, d) = self.coefs(k);
        2.0 * c + 6.0 * d * u
    }
}

/// Band matrices of the roughness penalty: `Q` (n x n-2) and `R` (n-2 x n-2).
fn penalty_matrices(x: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let mut q = DMatrix::zeros(n, n - 2);
    let mut r = DMatrix::zeros(n - 2, n - 2);
    for j in 1..n - 1 {
        let c = j - 1;
        q[(j - 1, c)] = 1.0 / h[j - 1];
        q[(j, c)] = -1.0 / h[j - 1] - 1.0 / h[j];
        q[(j + 1, c)] = 1.0 / h[j];
        r[(c, c)] = (h[j - 1] + h[j]) / 3.0;
        if c + 1 < n - 2 {
            r[(c, c + 1)] = h[j] / 6.0;
            r[(c + 1, c)] = h[j] / 6.0;
        }
    }
    (q, r)
}

struct SplineSystem {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    /// `W^-1 Q`
    winv_q: DMatrix<f64>,
    y: DVector<f64>,
    w: Vec<f64>,
}

impl SplineSystem {
    fn new(series: &EffectSeries) -> Self {
        let (q, r) = penalty_matrices(&series.horizons);
        let w = series.weights();
        let mut winv_q = q.clone();
        for (i, wi) in w.iter().enumerate() {
            winv_q.row_mut(i).scale_mut(1.0 / wi);
        }
        SplineSystem { q, r, winv_q, y: DVector::from_column_slice(&series.effects), w }
    }

    /// Fitted values, interior second derivatives and the hat diagonal.
    fn solve(&self, lambda: f64) -> Option<(DVector<f64>, DVector<f64>, Vec<f64>)> {
        let m = &self.r + (self.q.transpose() * &self.winv_q) * lambda;
        let chol = m.cholesky()?;
        let gamma = chol.solve(&(self.q.transpose() * &self.y));
        let fitted = &self.y - (&self.winv_q * &gamma) * lambda;
        // A = I - lambda W^-1 Q M^-1 Q'
        let minv_qt = chol.solve(&self.q.transpose());
        let hat =
            (0..self.y.len()).map(|i| 1.0 - lambda * self.winv_q.row(i).dot(&minv_qt.column(i).transpose())).collect();
        Some((fitted, gamma, hat))
    }

    fn cv(&self, lambda: f64) -> f64 {
        let Some((fitted, _, hat)) = self.solve(lambda) else {
            return f64::INFINITY;
        };
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..self.w.len() {
            let loo = (self.y[i] - fitted[i]) / (1.0 - hat[i]);
            num += self.w[i] * loo * loo;
            den += self.w[i];
        }
        if num.is_finite() {
            num / den
        } else {
            f64::INFINITY
        }
    }

    /// Log grid spanning 1e-6..1e6 times `tr(W) / tr(Q R^-1 Q')`.
    fn grid(&self) -> Vec<f64> {
        let k = match self.r.clone().cholesky() {
            Some(c) => &self.q * c.solve(&self.q.transpose()),
            None => return vec![1.0],
        };
        let scale = self.w.iter().sum::<f64>() / k.trace();
        let (lo, hi) = (-6.0f64, 6.0f64);
        (0..SPLINE_GRID_SIZE)
            .map(|i| scale * 10f64.powf(lo + (hi - lo) * i as f64 / (SPLINE_GRID_SIZE - 1) as f64))
            .collect()
    }
}

fn check_spline_input(series: &EffectSeries) -> Result<()> {
    if series.len() < 4 {
        return Err(TrajectoryError::TooFewPoints { needed: 4, found: series.len() });
    }
    Ok(())
}

/// `(lambda, weighted LOO error)` over the search grid, ascending in lambda.
pub fn spline_cv_scores(series: &EffectSeries) -> Result<Vec<(f64, f64)>> {
    check_spline_input(series)?;
    let sys = SplineSystem::new(series);
    Ok(sys.grid().into_iter().map(|l| (l, sys.cv(l))).collect())
}

/// Smoothing spline with the given smoothing parameter.
pub fn fit_spline_with_lambda(series: &EffectSeries, lambda: f64) -> Result<SplineFit> {
    check_spline_input(series)?;
    let sys = SplineSystem::new(series);
    build_spline(series, &sys, lambda)
}

fn build_spline(series: &EffectSeries, sys: &SplineSystem, lambda: f64) -> Result<SplineFit> {
    let (fitted, gamma, _) = sys.solve(lambda).ok_or(TrajectoryError::SingularDesign)?;
    let n = series.len();
    let mut second = vec![0.0; n];
    second[1..n - 1].copy_from_slice(gamma.as_slice());
    Ok(SplineFit {
        knots: series.horizons.clone(),
        values: fitted.as_slice().to_vec(),
        second_derivatives: second,
        lambda,
        cv_score: sys.cv(lambda),
    })
}

/// Smoothing spline with its parameter chosen by weighted leave-one-out CV;
/// ties go to the smaller parameter.
pub fn fit_spline(series: &EffectSeries) -> Result<SplineFit> {
    check_spline_input(series)?;
    let sys = SplineSystem::new(series);
    let mut best = (f64::NAN, f64::INFINITY);
    for l in sys.grid() {
        let cv = sys.cv(l);
        if cv < best.1 {
            best = (l, cv);
        }
    }
    if !best.0.is_finite() {
        return Err(TrajectoryError::SingularDesign);
    }
    build_spline(series, &sys, best.0)
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Convex stretch (`g'' > 0`).
    Acceleration,
    /// Concave stretch (`g'' < 0`).
    Deceleration,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub start: f64,
    pub end: f64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFeatures {
    /// Interior maximum; `None` when the maximum sits on a boundary.
    pub peak: Option<f64>,
    pub peak_effect: Option<f64>,
    pub inflections: Vec<f64>,
    pub phases: Vec<PhaseSpan>,
}

/// 1-month grid over `[lo, hi]`, always including `hi`.
pub fn month_grid(lo: f64, hi: f64) -> Vec<f64> {
    let mut g: Vec<f64> = (0..).map(|k| lo + k as f64).take_while(|t| *t < hi - 1e-9).collect();
    g.push(hi);
    g
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

pub fn extract_features(fit: &SplineFit) -> SplineFeatures {
    let (lo, hi) = (fit.knots[0], fit.knots[fit.knots.len() - 1]);
    let grid = month_grid(lo, hi);
    let vals: Vec<f64> = grid.iter().map(|&t| fit.eval(t)).collect();
    let k = (0..vals.len()).fold(0, |b, i| if vals[i] > vals[b] { i } else { b });
    let peak = (k > 0 && k + 1 < grid.len()).then(|| golden_max(|t| fit.eval(t), grid[k - 1], grid[k + 1], 1e-3));

    let curv: Vec<f64> = grid.iter().map(|&t| fit.second_derivative(t)).collect();
    let tiny = 1e-9 * curv.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sign = |v: f64| {
        if v > tiny {
            1
        } else if v < -tiny {
            -1
        } else {
            0
        }
    };
    let mut inflections = Vec::new();
    let mut last: Option<(usize, i32)> = None;
    for (i, &c) in curv.iter().enumerate() {
        let s = sign(c);
        if s == 0 {
            continue;
        }
        if let Some((j, ls)) = last {
            if ls != s {
                let (mut a, mut b) = (grid[j], grid[i]);
                for _ in 0..100 {
                    let m = 0.5 * (a + b);
                    if sign(fit.second_derivative(m)) == ls {
                        a = m;
                    } else {
                        b = m;
                    }
                    if b - a < 1e-9 {
                        break;
                    }
                }
                inflections.push(0.5 * (a + b));
            }
        }
        last = Some((i, s));
    }

    let mut bounds = vec![lo];
    bounds.extend(&inflections);
    bounds.push(hi);
    let phases = bounds
        .windows(2)
        .map(|w| {
            let phase = match sign(fit.second_derivative(0.5 * (w[0] + w[1]))) {
                1 => Phase::Acceleration,
                -1 => Phase::Deceleration,
                _ => Phase::Linear,
            };
            PhaseSpan { start: w[0], end: w[1], phase }
        })
        .collect();
    SplineFeatures { peak, peak_effect: peak.map(|t| fit.eval(t)), inflections, phases }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub quadratic: f64,
    pub q_lo: f64,
    pub q_hi: f64,
    pub spline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub estimand: Estimand,
    pub coefficients: [f64; 3],
    pub t_peak: Option<f64>,
    pub max_effect: Option<f64>,
    pub half_life: Option<f64>,
    pub spline_lambda: f64,
    pub spline_peak: Option<f64>,
    pub spline_peak_effect: Option<f64>,
    pub inflections: Vec<f64>,
    pub phases: Vec<PhaseSpan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandTrajectory {
    pub series: EffectSeries,
    pub quadratic: QuadraticFit,
    pub spline: SplineFit,
    pub curve: Vec<CurvePoint>,
    pub summary: TrajectorySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub estimands: Vec<EstimandTrajectory>,
}

impl TrajectoryReport {
    pub fn get(&self, estimand: Estimand) -> Option<&EstimandTrajectory> {
        self.estimands.iter().find(|e| e.series.estimand == estimand)
    }

    pub fn summaries(&self) -> Vec<&TrajectorySummary> {
        self.estimands.iter().map(|e| &e.summary).collect()
    }

    /// `t, quadratic, q_lo, q_hi, spline` rows for one estimand.
    pub fn write_curve_csv(&self, estimand: Estimand, out: impl std::io::Write) -> Result<()> {
        let e = self
            .get(estimand)
            .ok_or_else(|| TrajectoryError::InvalidSeries(format!("no {} series", estimand.name())))?;
        let mut w = csv::Writer::from_writer(out);
        for p in &e.curve {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn trajectory_for(series: &EffectSeries) -> Result<EstimandTrajectory> {
    let quadratic = fit_quadratic(series)?;
    let spline = fit_spline(series)?;
    let features = extract_features(&spline);
    let (lo, hi) = series.span();
    let curve = month_grid(lo, hi)
        .into_iter()
        .map(|t| {
            let (q_lo, q_hi) = quadratic.ci(t);
            CurvePoint { t, quadratic: quadratic.eval(t), q_lo, q_hi, spline: spline.eval(t) }
        })
        .collect();
    let summary = TrajectorySummary {
        estimand: series.estimand,
        coefficients: quadratic.coefficients,
        t_peak: quadratic.t_peak,
        max_effect: quadratic.max_effect,
        half_life: quadratic.half_life,
        spline_lambda: spline.lambda,
        spline_peak: features.peak,
        spline_peak_effect: features.peak_effect,
        inflections: features.inflections,
        phases: features.phases,
    };
    Ok(EstimandTrajectory { series: series.clone(), quadratic, spline, curve, summary })
}

/// Fits and samples every series (typically the SP and RMST pair).
pub fn trajectory_report(series: &[EffectSeries]) -> Result<TrajectoryReport> {
    Ok(TrajectoryReport { estimands: series.iter().map(trajectory_for).collect::<Result<_>>()? })
}
