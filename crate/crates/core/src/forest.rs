//! Per-horizon doubly-robust effect estimation.
//!
//! For a horizon `h` every subject receives an AIPW pseudo-outcome
//!
//! ```text
//! G_i = m1(x_i) - m0(x_i)
//!     + (W_i - e_i) / (e_i (1 - e_i)) * (Y_i(h) - m_{W_i}(x_i)) * O_i / K_c(min(T_i, h)- | W_i)
//! ```
//!
//! where `Y_i(h)` is `1{T_i > h}` (survival probability) or `min(T_i, h)`
//! (restricted mean), `O_i` marks subjects whose horizon outcome is observed
//! (`event` or `T_i >= h`) and `K_c` is the censoring survival curve. The ATE
//! is the mean of the valid `G_i`; an honest regression forest on `G` gives
//! conditional effects, with variances from grouped ("little bag") trees.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::SurvivalCohort;
use crate::rng;
use crate::stats::{self, Matrix};
use crate::survival::{self, CensoringCurves, Conditioning, CENSORING_FLOOR};

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("no subject has a valid pseudo-outcome at horizon {0}")]
    NoValidSubjects(f64),
    #[error("treatment arm {0} has no usable subjects for the outcome regression")]
    DegenerateArm(u8),
    #[error("forest needs at least {needed} rows, got {found}")]
    TooSmall { needed: usize, found: usize },
    #[error("covariate dimension {found} does not match the forest ({expected})")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("horizons must be positive and strictly increasing")]
    BadHorizons,
    #[error("scores ({0}) and cohort ({1}) differ in length")]
    Misaligned(usize, usize),
    #[error("invalid forest configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Survival(#[from] survival::SurvivalError),
}

pub type Result<T> = std::result::Result<T, ForestError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// Difference in survival probability at the horizon.
    Sp,
    /// Difference in restricted mean survival time up to the horizon.
    Rmst,
}

impl Estimand {
    pub fn name(self) -> &'static str {
        match self {
            Estimand::Sp => "sp",
            Estimand::Rmst => "rmst",
        }
    }

    /// Horizon outcome for an (uncensored at `h`) subject.
    pub fn outcome(self, time: f64, horizon: f64) -> f64 {
        match self {
            Estimand::Sp => f64::from(u8::from(time > horizon)),
            Estimand::Rmst => time.min(horizon),
        }
    }

    fn tag(self) -> u64 {
        match self {
            Estimand::Sp => 1,
            Estimand::Rmst => 2,
        }
    }
}

impl std::str::FromStr for Estimand {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sp" => Ok(Estimand::Sp),
            "rmst" => Ok(Estimand::Rmst),
            other => Err(format!("unknown estimand `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSpec {
    pub horizons: Vec<f64>,
    pub estimand: Estimand,
}

impl HorizonSpec {
    pub fn new(horizons: Vec<f64>, estimand: Estimand) -> Result<Self> {
        let ok = !horizons.is_empty()
            && horizons.iter().all(|h| *h > 0.0 && h.is_finite())
            && horizons.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(ForestError::BadHorizons);
        }
        Ok(HorizonSpec { horizons, estimand })
    }

    /// 12, 24, ..., 120 months.
    pub fn default_for(estimand: Estimand) -> Self {
        HorizonSpec { horizons: (1..=10).map(|k| 12.0 * k as f64).collect(), estimand }
    }
}

fn horizon_tag(h: f64) -> u64 {
    h.to_bits()
}

// ---------------------------------------------------------------------------
// Honest regression trees

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Node {
    /// `u32::MAX` for leaves.
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
    count: u32,
}

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HonestTree {
    nodes: Vec<Node>,
}

impl HonestTree {
    fn leaf_of(&self, x: &[f64]) -> &Node {
        let mut k = 0usize;
        loop {
            let n = &self.nodes[k];
            if n.feature == LEAF {
                return n;
            }
            k = if x[n.feature as usize] <= n.threshold { n.left } else { n.right } as usize;
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.leaf_of(x).value
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }

    /// Estimation-sample counts of every leaf.
    pub fn leaf_counts(&self) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.feature == LEAF).map(|n| n.count as usize).collect()
    }

    /// `(feature, depth)` of every split, root at depth 1.
    fn splits(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, 1usize)];
        while let Some((k, d)) = stack.pop() {
            let n = &self.nodes[k];
            if n.feature != LEAF {
                out.push((n.feature as usize, d));
                stack.push((n.left as usize, d + 1));
                stack.push((n.right as usize, d + 1));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct GrowParams {
    min_node: usize,
    mtry: usize,
    imbalance_penalty: f64,
}

struct Grower<'a> {
    x: &'a Matrix,
    y: &'a [f64],
    w: &'a [f64],
    params: GrowParams,
}

/// Per-tree row buffers. Every node owns the ranges `s[lo..hi]` and
/// `e[lo..hi]`; each list is kept in sample order (`s`, `e`, for
/// order-sensitive sums) and sorted by `(value, row)` per feature.
struct Rows {
    s: Vec<usize>,
    e: Vec<usize>,
    s_sorted: Vec<Vec<(usize, f64)>>,
    e_sorted: Vec<Vec<(usize, f64)>>,
}

struct NodeRows<'a> {
    s: &'a [usize],
    e: &'a [usize],
    s_sorted: Vec<&'a [(usize, f64)]>,
    e_sorted: Vec<&'a [(usize, f64)]>,
}

impl Rows {
    fn node(&self, s: (usize, usize), e: (usize, usize)) -> NodeRows<'_> {
        NodeRows {
            s: &self.s[s.0..s.1],
            e: &self.e[e.0..e.1],
            s_sorted: self.s_sorted.iter().map(|v| &v[s.0..s.1]).collect(),
            e_sorted: self.e_sorted.iter().map(|v| &v[e.0..e.1]).collect(),
        }
    }
}

trait RowKey: Copy {
    fn row(&self) -> usize;
}

impl RowKey for usize {
    fn row(&self) -> usize {
        *self
    }
}

impl RowKey for (usize, f64) {
    fn row(&self) -> usize {
        self.0
    }
}

/// Stable in-place partition of `v[lo..hi]`; returns the split point.
fn partition_range<T: RowKey>(v: &mut [T], lo: usize, hi: usize, left: &[bool], tmp: &mut Vec<T>) -> usize {
    tmp.clear();
    let mut k = lo;
    for j in lo..hi {
        let item = v[j];
        if left[item.row()] {
            v[k] = item;
            k += 1;
        } else {
            tmp.push(item);
        }
    }
    v[k..hi].copy_from_slice(tmp);
    k
}

impl Grower<'_> {
    fn sorted_by_feature(&self, rows: &[usize]) -> Vec<Vec<(usize, f64)>> {
        (0..self.x.cols())
            .map(|f| {
                let mut v: Vec<(usize, f64)> = rows.iter().map(|&i| (i, self.x.get(i, f))).collect();
                // (value, row) keys are distinct, so an unstable sort is deterministic
                v.sort_unstable_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                v
            })
            .collect()
    }

    fn grow(&self, structure: Vec<usize>, estimation: Vec<usize>, rng: &mut impl Rng) -> HonestTree {
        let mut rows = Rows {
            s_sorted: self.sorted_by_feature(&structure),
            e_sorted: self.sorted_by_feature(&estimation),
            s: structure,
            e: estimation,
        };
        let mut go_left = vec![false; self.x.rows()];
        let cap = rows.s.len().max(rows.e.len());
        let (mut tmp, mut tmp_kv) = (Vec::with_capacity(cap), Vec::with_capacity(cap));
        let mut nodes = vec![self.leaf(&[])];
        let mut stack = vec![(0usize, (0, rows.s.len()), (0, rows.e.len()))];
        while let Some((slot, sr, er)) = stack.pop() {
            let found = self.best_split(&rows.node(sr, er), rng);
            match found {
                None => nodes[slot] = self.leaf(&rows.e[er.0..er.1]),
                Some((feature, threshold)) => {
                    for &i in rows.s[sr.0..sr.1].iter().chain(&rows.e[er.0..er.1]) {
                        go_left[i] = self.x.get(i, feature) <= threshold;
                    }
                    let sm = partition_range(&mut rows.s, sr.0, sr.1, &go_left, &mut tmp);
                    let em = partition_range(&mut rows.e, er.0, er.1, &go_left, &mut tmp);
                    for v in &mut rows.s_sorted {
                        partition_range(v, sr.0, sr.1, &go_left, &mut tmp_kv);
                    }
                    for v in &mut rows.e_sorted {
                        partition_range(v, er.0, er.1, &go_left, &mut tmp_kv);
                    }
                    let left = nodes.len();
                    nodes.push(self.leaf(&[]));
                    nodes.push(self.leaf(&[]));
                    nodes[slot] = Node {
                        feature: feature as u32,
                        threshold,
                        left: left as u32,
                        right: left as u32 + 1,
                        value: 0.0,
                        count: 0,
                    };
                    stack.push((left + 1, (sm, sr.1), (em, er.1)));
                    stack.push((left, (sr.0, sm), (er.0, em)));
                }
            }
        }
        HonestTree { nodes }
    }

    fn leaf(&self, e_idx: &[usize]) -> Node {
        // weighted running mean: a constant target reproduces exactly
        let (mut m, mut wsum) = (0.0, 0.0);
        for &i in e_idx {
            let wi = self.w[i];
            if wi > 0.0 {
                wsum += wi;
                m += wi / wsum * (self.y[i] - m);
            }
        }
        Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: m, count: e_idx.len() as u32 }
    }

    fn best_split(&self, rows: &NodeRows<'_>, rng: &mut impl Rng) -> Option<(usize, f64)> {
        let (s_idx, e_idx) = (rows.s, rows.e);
        let min = self.params.min_node;
        if s_idx.len() < 2 * min || e_idx.len() < 2 * min {
            return None;
        }
        let y0 = self.y[s_idx[0]];
        if s_idx.iter().all(|&i| self.y[i] == y0) {
            return None;
        }
        let (mut sw, mut swy, mut swyy) = (0.0, 0.0, 0.0);
        for &i in s_idx {
            let (w, y) = (self.w[i], self.y[i]);
            sw += w;
            swy += w * y;
            swyy += w * y * y;
        }
        if sw <= 0.0 {
            return None;
        }
        let parent = swy * swy / sw;
        let sst = swyy - parent;
        if !(sst > 0.0) {
            return None;
        }
        let node_n = s_idx.len() as f64;

        let p = self.x.cols();
        let mut features: Vec<usize> =
            if self.params.mtry >= p { (0..p).collect() } else { sample(rng, p, self.params.mtry).into_vec() };
        features.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            let order = rows.s_sorted[f];
            let evals = rows.e_sorted[f];
            if order[0].1 == order[order.len() - 1].1 {
                continue;
            }
            let (mut lw, mut lwy) = (0.0, 0.0);
            let mut e_left = 0usize;
            for k in 1..order.len() {
                let (i_prev, v_prev) = order[k - 1];
                lw += self.w[i_prev];
                lwy += self.w[i_prev] * self.y[i_prev];
                let v = order[k].1;
                if v == v_prev || k < min || order.len() - k < min {
                    continue;
                }
                let mut thr = 0.5 * (v_prev + v);
                if thr >= v {
                    thr = v_prev;
                }
                while e_left < evals.len() && evals[e_left].1 <= thr {
                    e_left += 1;
                }
                if e_left < min || evals.len() - e_left < min {
                    continue;
                }
                let rw = sw - lw;
                if lw <= 0.0 || rw <= 0.0 {
                    continue;
                }
                let rwy = swy - lwy;
                let mut gain = lwy * lwy / lw + rwy * rwy / rw - parent;
                if self.params.imbalance_penalty > 0.0 {
                    let nl = k as f64;
                    let nr = node_n - nl;
                    gain -= self.params.imbalance_penalty * (sst / node_n) * (node_n / nl + node_n / nr);
                }
                if gain > 1e-12 * sst && best.map_or(true, |b| gain > b.0) {
                    best = Some((gain, f, thr));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

// ---------------------------------------------------------------------------
// Forests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub trees: usize,
    /// Fraction of rows drawn (without replacement) for each tree.
    pub subsample: f64,
    /// Fraction of each subsample used to place splits; the rest fills leaves.
    pub honesty_fraction: f64,
    pub min_node_size: usize,
    /// Candidate features per split; `None` means `min(p, ceil(sqrt(p)) + 20)`.
    pub mtry: Option<usize>,
    /// Penalty on unbalanced splits; 0 disables it.
    pub imbalance_penalty: f64,
    /// Trees per half-sample group used by the variance estimate.
    pub ci_group_size: usize,
    /// Choose `min_node_size` and `subsample` by out-of-bag error.
    pub tune: bool,
    pub min_node_grid: Vec<usize>,
    pub subsample_grid: Vec<f64>,
    pub tuning_trees: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            trees: 5000,
            subsample: 0.5,
            honesty_fraction: 0.5,
            min_node_size: 5,
            mtry: None,
            imbalance_penalty: 0.0,
            ci_group_size: 10,
            tune: true,
            min_node_grid: vec![5, 15, 30],
            subsample_grid: vec![0.4, 0.5],
            tuning_trees: 200,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ForestError::Config(m.to_string()));
        if self.trees == 0 || self.ci_group_size == 0 {
            return bad("trees and ci_group_size must be positive");
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return bad("subsample must lie in (0, 1]");
        }
        if self.ci_group_size > 1 && self.subsample > 0.5 {
            return bad("subsample must be <= 0.5 when trees are grouped");
        }
        if !(self.honesty_fraction > 0.0 && self.honesty_fraction < 1.0) {
            return bad("honesty_fraction must lie in (0, 1)");
        }
        if self.min_node_size == 0 {
            return bad("min_node_size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalForestModel {
    trees: Vec<HonestTree>,
    dim: usize,
    pub group_size: usize,
    pub subsample: f64,
    pub honesty_fraction: f64,
    pub min_node_size: usize,
    pub seed: u64,
}

/// Pointwise forest prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestPrediction {
    pub estimate: f64,
    pub variance: f64,
}

impl CausalForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn trees(&self) -> &[HonestTree] {
        &self.trees
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean over trees in tree order.
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        let mut m = 0.0;
        for (k, t) in self.trees.iter().enumerate() {
            m += (t.predict(x) - m) / (k as f64 + 1.0);
        }
        m
    }

    /// Estimate and grouped-tree variance: between-group spread of group
    /// means, debiased by the within-group spread, floored at zero.
    pub fn predict_with_variance(&self, x: &[f64]) -> ForestPrediction {
        let l = self.group_size;
        let groups = self.trees.len() / l;
        let mut estimate = 0.0;
        let mut group_means = Vec::with_capacity(groups);
        let mut within = 0.0;
        for (g, chunk) in self.trees.chunks(l).enumerate() {
            let mut gm = 0.0;
            let preds: Vec<f64> = chunk.iter().map(|t| t.predict(x)).collect();
            for (k, v) in preds.iter().enumerate() {
                gm += (v - gm) / (k as f64 + 1.0);
                estimate += (v - estimate) / ((g * l + k) as f64 + 1.0);
            }
            if l > 1 {
                within += preds.iter().map(|v| (v - gm) * (v - gm)).sum::<f64>() / (l as f64 - 1.0);
            }
            group_means.push(gm);
        }
        if l < 2 || groups < 2 {
            return ForestPrediction { estimate, variance: 0.0 };
        }
        let between = group_means.iter().map(|m| (m - estimate) * (m - estimate)).sum::<f64>() / groups as f64;
        let within = within / groups as f64;
        ForestPrediction { estimate, variance: (between - within / l as f64).max(0.0) }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<ForestPrediction>> {
        if x.cols() != self.dim {
            return Err(ForestError::DimensionMismatch { expected: self.dim, found: x.cols() });
        }
        Ok((0..x.rows()).into_par_iter().map(|i| self.predict_with_variance(x.row(i))).collect())
    }

    /// Depth-weighted split frequencies (splits up to depth 4, weight
    /// `depth^-2`), normalized to sum to one.
    pub fn split_importance(&self) -> Vec<f64> {
        const MAX_DEPTH: usize = 4;
        let mut counts = vec![vec![0usize; self.dim]; MAX_DEPTH];
        for t in &self.trees {
            for (f, d) in t.splits() {
                if d <= MAX_DEPTH {
                    counts[d - 1][f] += 1;
                }
            }
        }
        let mut imp = vec![0.0; self.dim];
        for (d, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            if total == 0 {
                continue;
            }
            let wd = ((d + 1) as f64).powi(-2);
            for (f, &c) in row.iter().enumerate() {
                imp[f] += wd * c as f64 / total as f64;
            }
        }
        let s: f64 = imp.iter().sum();
        if s > 0.0 {
            imp.iter_mut().for_each(|v| *v /= s);
        }
        imp
    }
}

/// Grows one tree. Tree `t` belongs to group `t / group_size`; the group
/// draws a half-sample and each tree subsamples inside it.
fn grow_tree(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    cfg: &ForestConfig,
    min_node: usize,
    subsample: f64,
    tree: usize,
) -> (HonestTree, Vec<usize>) {
    let n = x.rows();
    let l = cfg.ci_group_size;
    let pool: Vec<usize> = if l > 1 {
        let mut grng = rng::stream(cfg.seed, &[rng::tag::FOREST, (tree / l) as u64]);
        let mut half = sample(&mut grng, n, n / 2).into_vec();
        half.sort_unstable();
        half
    } else {
        (0..n).collect()
    };
    let mut trng = rng::stream(cfg.seed, &[rng::tag::FOREST, u64::MAX, tree as u64]);
    let size = ((subsample * n as f64).round() as usize).clamp(2, pool.len());
    let mut drawn: Vec<usize> = sample(&mut trng, pool.len(), size).into_iter().map(|k| pool[k]).collect();
    let n_struct = ((cfg.honesty_fraction * size as f64).round() as usize).clamp(1, size - 1);
    let estimation = drawn.split_off(n_struct);
    let structure = drawn;
    let p = x.cols();
    let mtry = cfg.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize + 20).clamp(1, p.max(1));
    let grower = Grower { x, y, w, params: GrowParams { min_node, mtry, imbalance_penalty: cfg.imbalance_penalty } };
    let mut in_bag = structure.clone();
    in_bag.extend_from_slice(&estimation);
    (grower.grow(structure, estimation, &mut trng), in_bag)
}

fn fit_inner(
    x: &Matrix,
    y: &[f64],
    w: &[f64],
    cfg: &ForestConfig,
    trees: usize,
    min_node: usize,
    subsample: f64,
    want_oob: bool,
) -> (CausalForestModel, Option<Vec<f64>>) {
    let l = cfg.ci_group_size;
    let trees = trees.div_ceil(l) * l;
    let grown: Vec<(HonestTree, Vec<usize>)> =
        (0..trees).into_par_iter().map(|t| grow_tree(x, y, w, cfg, min_node, subsample, t)).collect();
    let oob = want_oob.then(|| {
        let n = x.rows();
        let mut sum = vec![0.0; n];
        let mut cnt = vec![0usize; n];
        let mut mark = vec![false; n];
        for (tree, in_bag) in &grown {
            for &i in in_bag {
                mark[i] = true;
            }
            for i in 0..n {
                if !mark[i] {
                    sum[i] += tree.predict(x.row(i));
                    cnt[i] += 1;
                }
            }
            for &i in in_bag {
                mark[i] = false;
            }
        }
        sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect()
    });
    let model = CausalForestModel {
        trees: grown.into_iter().map(|g| g.0).collect(),
        dim: x.cols(),
        group_size: l,
        subsample,
        honesty_fraction: cfg.honesty_fraction,
        min_node_size: min_node,
        seed: cfg.seed,
    };
    (model, oob)
}

/// Out-of-bag tuning of `(min_node_size, subsample)`; ties keep the earlier grid entry.
pub fn tune_forest(x: &Matrix, y: &[f64], w: &[f64], cfg: &ForestConfig) -> (usize, f64) {
    let mut best: Option<(f64, usize, f64)> = None;
    for &m in &cfg.min_node_grid {
        if x.rows() < 4 * m {
            continue;
        }
        for &s in &cfg.subsample_grid {
            let sub = ForestConfig { seed: rng::derive_seed(cfg.seed, &[rng::tag::TUNING]), ..cfg.clone() };
            let (_, oob) = fit_inner(x, y, w, &sub, cfg.tuning_trees.max(sub.ci_group_size), m, s, true);
            let oob = oob.expect("requested");
            let (mut se, mut k) = (0.0, 0usize);
            for (p, t) in oob.iter().zip(y) {
                if p.is_finite() {
                    se += (p - t) * (p - t);
                    k += 1;
                }
            }
            let mse = if k > 0 { se / k as f64 } else { f64::INFINITY };
            if best.map_or(true, |b| mse < b.0) {
                best = Some((mse, m, s));
            }
        }
    }
    best.map_or((cfg.min_node_size, cfg.subsample), |b| (b.1, b.2))
}

/// Fits an honest forest on `(x, y)` with optional sample weights.
pub fn fit_forest(x: &Matrix, y: &[f64], weights: Option<&[f64]>, cfg: &ForestConfig) -> Result<CausalForestModel> {
    cfg.validate()?;
    if y.len() != x.rows() {
        return Err(ForestError::Misaligned(y.len(), x.rows()));
    }
    let ones;
    let w = match weights {
        Some(w) => w,
        None => {
            ones = vec![1.0; y.len()];
            &ones
        }
    };
    let (min_node, subsample) = if cfg.tune && !cfg.min_node_grid.is_empty() {
        tune_forest(x, y, w, cfg)
    } else {
        (cfg.min_node_size, cfg.subsample)
    };
    if x.rows() < 4 * min_node {
        return Err(ForestError::TooSmall { needed: 4 * min_node, found: x.rows() });
    }
    Ok(fit_inner(x, y, w, cfg, cfg.trees, min_node, subsample, false).0)
}

/// Forest predictions and variances for new covariates.
pub fn predict_cate(model: &CausalForestModel, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let preds = model.predict(x)?;
    Ok(preds.iter().map(|p| (p.estimate, p.variance)).unzip())
}

// ---------------------------------------------------------------------------
// Pseudo-outcomes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FloorPolicy {
    /// Observable subjects whose censoring survival is below the floor are dropped.
    #[default]
    Exclude,
    /// The censoring survival is clipped to the floor instead.
    Clip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    pub trees: usize,
    pub min_node_size: usize,
    pub subsample: f64,
    pub cross_fit_folds: usize,
    pub censoring: Conditioning,
    pub censoring_floor: f64,
    pub floor_policy: FloorPolicy,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            trees: 500,
            min_node_size: 5,
            subsample: 0.5,
            cross_fit_folds: 2,
            censoring: Conditioning::ByTreatment,
            censoring_floor: CENSORING_FLOOR,
            floor_policy: FloorPolicy::Exclude,
        }
    }
}

/// Everything the AIPW formula needs, aligned by subject.
#[derive(Debug, Clone, Copy)]
pub struct AipwInputs<'a> {
    pub times: &'a [f64],
    pub events: &'a [bool],
    pub treatments: &'a [bool],
    pub scores: &'a [f64],
    pub m0: &'a [f64],
    pub m1: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoOutcomeSet {
    pub horizon: f64,
    pub estimand: Estimand,
    pub gamma: Vec<f64>,
    pub valid: Vec<bool>,
    pub observable: Vec<bool>,
    pub scores: Vec<f64>,
    pub m0: Vec<f64>,
    pub m1: Vec<f64>,
    /// `K_c(min(T_i, h)-)` for the subject's arm.
    pub censoring_survival: Vec<f64>,
    pub n_excluded: usize,
}

impl PseudoOutcomeSet {
    pub fn valid_gamma(&self) -> Vec<f64> {
        self.gamma.iter().zip(&self.valid).filter(|(_, v)| **v).map(|(g, _)| *g).collect()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Applies the AIPW formula with given nuisances.
pub fn aipw_pseudo_outcomes(
    inputs: AipwInputs<'_>,
    censor: &CensoringCurves,
    horizon: f64,
    estimand: Estimand,
    floor: f64,
    policy: FloorPolicy,
) -> Result<PseudoOutcomeSet> {
    let n = inputs.times.len();
    for len in [inputs.events.len(), inputs.treatments.len(), inputs.scores.len(), inputs.m0.len(), inputs.m1.len()] {
        if len != n {
            return Err(ForestError::Misaligned(len, n));
        }
    }
    let mut set = PseudoOutcomeSet {
        horizon,
        estimand,
        gamma: vec![0.0; n],
        valid: vec![true; n],
        observable: vec![false; n],
        scores: inputs.scores.to_vec(),
        m0: inputs.m0.to_vec(),
        m1: inputs.m1.to_vec(),
        censoring_survival: vec![1.0; n],
        n_excluded: 0,
    };
    for i in 0..n {
        let (t, d, w, e) = (inputs.times[i], inputs.events[i], inputs.treatments[i], inputs.scores[i]);
        let observable = d || t >= horizon;
        let k = censor.for_arm(w).eval_left(t.min(horizon));
        set.observable[i] = observable;
        set.censoring_survival[i] = k;
        let reg = inputs.m1[i] - inputs.m0[i];
        if !observable {
            set.gamma[i] = reg;
            continue;
        }
        let k_used = if k < floor {
            match policy {
                FloorPolicy::Exclude => {
                    set.valid[i] = false;
                    set.gamma[i] = f64::NAN;
                    set.n_excluded += 1;
                    continue;
                }
                FloorPolicy::Clip => floor,
            }
        } else {
            k
        };
        let m_w = if w { inputs.m1[i] } else { inputs.m0[i] };
        let ipw = (f64::from(u8::from(w)) - e) / (e * (1.0 - e));
        set.gamma[i] = reg + ipw * (estimand.outcome(t, horizon) - m_w) / k_used;
    }
    if set.n_valid() == 0 {
        return Err(ForestError::NoValidSubjects(horizon));
    }
    Ok(set)
}

/// Cross-fitted per-arm outcome regressions `(m0, m1)` for the horizon
/// outcome, trained on observable subjects with inverse censoring weights.
pub fn fit_outcome_regressions(
    cohort: &SurvivalCohort,
    censor: &CensoringCurves,
    horizon: f64,
    estimand: Estimand,
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = cohort.len();
    let x = cohort.covariates();
    let folds = cfg.cross_fit_folds.max(1);
    let mut labels = vec![0usize; n];
    if folds > 1 {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(seed, &[rng::tag::CROSS_FIT]);
        for arm in [false, true] {
            let mut idx: Vec<usize> = (0..n).filter(|&i| cohort.subjects[i].treatment == arm).collect();
            idx.shuffle(&mut r);
            for (k, i) in idx.into_iter().enumerate() {
                labels[i] = k % folds;
            }
        }
    }
    let y: Vec<f64> = cohort.subjects.iter().map(|s| estimand.outcome(s.time_months, horizon)).collect();
    let wts: Vec<f64> = cohort
        .subjects
        .iter()
        .map(|s| {
            let observable = s.event || s.time_months >= horizon;
            if !observable {
                return 0.0;
            }
            let k = censor.for_arm(s.treatment).eval_left(s.time_months.min(horizon));
            1.0 / k.max(cfg.censoring_floor)
        })
        .collect();

    let mut m = [vec![0.0; n], vec![0.0; n]];
    for fold in 0..folds {
        let target: Vec<usize> = (0..n).filter(|&i| folds == 1 || labels[i] == fold).collect();
        for arm in [false, true] {
            let train: Vec<usize> = (0..n)
                .filter(|&i| (folds == 1 || labels[i] != fold) && cohort.subjects[i].treatment == arm && wts[i] > 0.0)
                .collect();
            if train.is_empty() {
                return Err(ForestError::DegenerateArm(u8::from(arm)));
            }
            let ty: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let tw: Vec<f64> = train.iter().map(|&i| wts[i]).collect();
            let out = &mut m[usize::from(arm)];
            if train.len() < 4 * cfg.min_node_size {
                let mean = ty.iter().zip(&tw).map(|(a, b)| a * b).sum::<f64>() / tw.iter().sum::<f64>();
                for &i in &target {
                    out[i] = mean;
                }
                continue;
            }
            let fcfg = ForestConfig {
                trees: cfg.trees,
                subsample: cfg.subsample,
                min_node_size: cfg.min_node_size,
                ci_group_size: 1,
                tune: false,
                seed: rng::derive_seed(seed, &[rng::tag::NUISANCE, fold as u64, u64::from(arm)]),
                ..ForestConfig::default()
            };
            let forest = fit_forest(&x.select_rows(&train), &ty, Some(&tw), &fcfg)?;
            let preds: Vec<f64> = target.par_iter().map(|&i| forest.predict_one(x.row(i))).collect();
            for (&i, p) in target.iter().zip(preds) {
                out[i] = p;
            }
        }
    }
    let [m0, m1] = m;
    Ok((m0, m1))
}

/// Pseudo-outcomes with cross-fitted forest nuisances.
pub fn pseudo_outcomes(
    cohort: &SurvivalCohort,
    scores: &[f64],
    horizon: f64,
    estimand: Estimand,
    censor: &CensoringCurves,
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<PseudoOutcomeSet> {
    if scores.len() != cohort.len() {
        return Err(ForestError::Misaligned(scores.len(), cohort.len()));
    }
    if !(horizon > 0.0) {
        return Err(ForestError::BadHorizons);
    }
    let (m0, m1) = fit_outcome_regressions(cohort, censor, horizon, estimand, cfg, seed)?;
    let (times, events, treatments) = (cohort.times(), cohort.events(), cohort.treatments());
    aipw_pseudo_outcomes(
        AipwInputs { times: &times, events: &events, treatments: &treatments, scores, m0: &m0, m1: &m1 },
        censor,
        horizon,
        estimand,
        cfg.censoring_floor,
        cfg.floor_policy,
    )
}

// ---------------------------------------------------------------------------
// Horizon estimates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EstimationConfig {
    pub forest: ForestConfig,
    pub nuisance: NuisanceConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEstimate {
    pub horizon: f64,
    pub estimand: Estimand,
    pub ate: f64,
    /// `SD(G) / sqrt(n_valid)` over valid pseudo-outcomes.
    pub ate_se: f64,
    /// `sqrt(sum cate_var) / n` from the forest's own variance estimates.
    pub ate_se_forest: f64,
    pub cate: Vec<f64>,
    pub cate_var: Vec<f64>,
    pub n_valid: usize,
    pub n_excluded: usize,
    pub min_node_size: usize,
    pub subsample: f64,
    pub importance: Vec<f64>,
}

/// Estimates one horizon on all rows of `cohort`; the forest is trained on
/// every valid row.
pub fn estimate_horizon(
    cohort: &SurvivalCohort,
    scores: &[f64],
    horizon: f64,
    estimand: Estimand,
    config: &EstimationConfig,
) -> Result<HorizonEstimate> {
    estimate_horizon_with(cohort, scores, horizon, estimand, config, None).map(|(e, _)| e)
}

/// Like [`estimate_horizon`], restricting forest training to rows where
/// `train_mask` is set. Returns the pseudo-outcomes and fitted forest as well.
pub fn estimate_horizon_with(
    cohort: &SurvivalCohort,
    scores: &[f64],
    horizon: f64,
    estimand: Estimand,
    config: &EstimationConfig,
    train_mask: Option<&[bool]>,
) -> Result<(HorizonEstimate, HorizonArtifacts)> {
    let key = [horizon_tag(horizon), estimand.tag()];
    let set = horizon_pseudo_outcomes(cohort, scores, horizon, estimand, config)?;
    let valid = set.valid_gamma();
    let ate = stats::mean(&valid);
    let ate_se = stats::sd(&valid) / (valid.len() as f64).sqrt();

    let rows: Vec<usize> = (0..cohort.len()).filter(|&i| set.valid[i] && train_mask.map_or(true, |m| m[i])).collect();
    let x = cohort.covariates();
    let y: Vec<f64> = rows.iter().map(|&i| set.gamma[i]).collect();
    let fcfg = ForestConfig {
        seed: rng::derive_seed(config.seed, &[rng::tag::FOREST, key[0], key[1]]),
        ..config.forest.clone()
    };
    let forest = fit_forest(&x.select_rows(&rows), &y, None, &fcfg)?;
    let (cate, cate_var) = predict_cate(&forest, &x)?;
    let ate_se_forest = cate_var.iter().sum::<f64>().sqrt() / cate.len() as f64;
    let estimate = HorizonEstimate {
        horizon,
        estimand,
        ate,
        ate_se,
        ate_se_forest,
        cate,
        cate_var,
        n_valid: valid.len(),
        n_excluded: set.n_excluded,
        min_node_size: forest.min_node_size,
        subsample: forest.subsample,
        importance: forest.split_importance(),
    };
    Ok((estimate, HorizonArtifacts { pseudo: set, forest }))
}

/// ATE and its standard error only; the conditional-effect fields are empty.
pub fn estimate_ate(
    cohort: &SurvivalCohort,
    scores: &[f64],
    horizon: f64,
    estimand: Estimand,
    config: &EstimationConfig,
) -> Result<HorizonEstimate> {
    let set = horizon_pseudo_outcomes(cohort, scores, horizon, estimand, config)?;
    let valid = set.valid_gamma();
    Ok(HorizonEstimate {
        horizon,
        estimand,
        ate: stats::mean(&valid),
        ate_se: stats::sd(&valid) / (valid.len() as f64).sqrt(),
        ate_se_forest: f64::NAN,
        cate: vec![],
        cate_var: vec![],
        n_valid: valid.len(),
        n_excluded: set.n_excluded,
        min_node_size: 0,
        subsample: 0.0,
        importance: vec![],
    })
}

/// Pseudo-outcomes with the horizon's derived nuisance seed.
pub fn horizon_pseudo_outcomes(
    cohort: &SurvivalCohort,
    scores: &[f64],
    horizon: f64,
    estimand: Estimand,
    config: &EstimationConfig,
) -> Result<PseudoOutcomeSet> {
    let censor = survival::censoring_survival(cohort, config.nuisance.censoring)?;
    let nseed = rng::derive_seed(config.seed, &[rng::tag::NUISANCE, horizon_tag(horizon), estimand.tag()]);
    pseudo_outcomes(cohort, scores, horizon, estimand, &censor, &config.nuisance, nseed)
}

#[derive(Debug, Clone)]
pub struct HorizonArtifacts {
    pub pseudo: PseudoOutcomeSet,
    pub forest: CausalForestModel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::survival::censoring_survival_from;

    fn no_censoring(n: usize) -> CensoringCurves {
        censoring_survival_from(&vec![1000.0; n], &vec![true; n], &vec![true; n], Conditioning::None).unwrap()
    }

    #[test]
    fn aipw_hand_example() {
        // Y = (1, 0, 1, 0) at h = 12 with W = (1, 1, 0, 0), e = 0.5, m = 0
        let times = [20.0, 5.0, 20.0, 5.0];
        let events = [true; 4];
        let w = [true, true, false, false];
        let set = aipw_pseudo_outcomes(
            AipwInputs {
                times: &times,
                events: &events,
                treatments: &w,
                scores: &[0.5; 4],
                m0: &[0.0; 4],
                m1: &[0.0; 4],
            },
            &no_censoring(4),
            12.0,
            Estimand::Sp,
            0.05,
            FloorPolicy::Exclude,
        )
        .unwrap();
        assert_eq!(set.gamma, vec![2.0, 0.0, -2.0, 0.0]);
        assert_eq!(stats::mean(&set.gamma), 0.0);
    }

    #[test]
    fn zero_residual_gives_regression_difference() {
        let times = [20.0, 30.0, 20.0, 30.0];
        let w = [true, true, false, false];
        let set = aipw_pseudo_outcomes(
            AipwInputs {
                times: &times,
                events: &[true; 4],
                treatments: &w,
                scores: &[0.3, 0.6, 0.4, 0.7],
                m0: &[1.0; 4],
                m1: &[1.0; 4],
            },
            &no_censoring(4),
            12.0,
            Estimand::Sp,
            0.05,
            FloorPolicy::Exclude,
        )
        .unwrap();
        assert!(set.gamma.iter().all(|g| *g == 0.0));
        let set = aipw_pseudo_outcomes(
            AipwInputs {
                times: &times,
                events: &[true; 4],
                treatments: &w,
                scores: &[0.5; 4],
                m0: &[0.0; 4],
                m1: &[1.0; 4],
            },
            &no_censoring(4),
            1.0,
            Estimand::Sp,
            0.05,
            FloorPolicy::Exclude,
        );
        // treated outcome 1 matches m1; controls' outcome 1 vs m0 = 0 gives -2 residual term
        let g = set.unwrap().gamma;
        assert_eq!(&g[..2], &[1.0, 1.0]);
    }

    #[test]
    fn censored_before_horizon_falls_back_to_regression() {
        let set = aipw_pseudo_outcomes(
            AipwInputs {
                times: &[10.0, 30.0],
                events: &[false, true],
                treatments: &[true, false],
                scores: &[0.4, 0.4],
                m0: &[0.2, 0.2],
                m1: &[0.7, 0.7],
            },
            &no_censoring(2),
            12.0,
            Estimand::Sp,
            0.05,
            FloorPolicy::Exclude,
        )
        .unwrap();
        assert!(!set.observable[0]);
        assert!((set.gamma[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn floor_policies() {
        // censoring survival drops to 0.5 then 0 before the horizon
        let censor = censoring_survival_from(&[1.0, 2.0], &[false, false], &[true; 2], Conditioning::None).unwrap();
        let inputs =
            AipwInputs { times: &[30.0], events: &[true], treatments: &[true], scores: &[0.5], m0: &[0.0], m1: &[0.0] };
        assert!(matches!(
            aipw_pseudo_outcomes(inputs, &censor, 12.0, Estimand::Sp, 0.05, FloorPolicy::Exclude),
            Err(ForestError::NoValidSubjects(_))
        ));
        let clipped = aipw_pseudo_outcomes(inputs, &censor, 12.0, Estimand::Sp, 0.05, FloorPolicy::Clip).unwrap();
        assert_eq!(clipped.gamma[0], 2.0 / 0.05);
    }

    fn grid_x(n: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![(i % 37) as f64, (i % 11) as f64]).collect();
        Matrix::from_rows(&rows, 2)
    }

    fn small_cfg(trees: usize) -> ForestConfig {
        ForestConfig { trees, tune: false, seed: 3, ..ForestConfig::default() }
    }

    #[test]
    fn constant_target_is_reproduced_exactly() {
        let x = grid_x(200);
        let f = fit_forest(&x, &[0.1; 200], None, &small_cfg(50)).unwrap();
        let (cate, var) = predict_cate(&f, &x).unwrap();
        assert!(cate.iter().all(|c| *c == 0.1));
        assert!(var.iter().all(|v| *v <= 1e-10));
    }

    #[test]
    fn single_leaf_when_min_node_is_n() {
        let x = grid_x(40);
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let cfg = ForestConfig { min_node_size: 10, ..small_cfg(20) };
        let f = fit_forest(&x, &y, None, &cfg).unwrap();
        // subsample 20, estimation half 10 < 2 * min node: never split
        assert!(f.trees().iter().all(|t| t.n_leaves() == 1));
    }

    #[test]
    fn leaves_respect_min_node_on_estimation_half() {
        let x = grid_x(400);
        let y: Vec<f64> = (0..400).map(|i| ((i * 7919) % 101) as f64).collect();
        let cfg = ForestConfig { min_node_size: 7, ..small_cfg(20) };
        let f = fit_forest(&x, &y, None, &cfg).unwrap();
        for t in f.trees() {
            assert!(t.leaf_counts().iter().all(|&c| c >= 7));
        }
    }

    #[test]
    fn too_small_and_dimension_errors() {
        let x = grid_x(10);
        assert!(matches!(
            fit_forest(&x, &[0.0; 10], None, &ForestConfig { min_node_size: 5, ..small_cfg(10) }),
            Err(ForestError::TooSmall { .. })
        ));
        let f = fit_forest(&grid_x(40), &[1.0; 40], None, &small_cfg(10)).unwrap();
        assert!(matches!(
            predict_cate(&f, &Matrix::zeros(3, 5)),
            Err(ForestError::DimensionMismatch { expected: 2, found: 5 })
        ));
    }

    #[test]
    fn duplicating_trees_keeps_predictions() {
        let x = grid_x(120);
        let y: Vec<f64> = (0..120).map(|i| (i % 37) as f64 / 10.0).collect();
        let f = fit_forest(&x, &y, None, &small_cfg(30)).unwrap();
        let mut g = f.clone();
        g.trees = f.trees.iter().chain(&f.trees).cloned().collect();
        for i in 0..x.rows() {
            assert!((f.predict_one(x.row(i)) - g.predict_one(x.row(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn seeded_forests_are_identical() {
        let x = grid_x(150);
        let y: Vec<f64> = (0..150).map(|i| ((i * 31) % 17) as f64).collect();
        let a = fit_forest(&x, &y, None, &small_cfg(20)).unwrap();
        let b = fit_forest(&x, &y, None, &small_cfg(20)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn horizon_spec_validation() {
        assert!(HorizonSpec::new(vec![12.0, 12.0], Estimand::Sp).is_err());
        assert!(HorizonSpec::new(vec![0.0, 12.0], Estimand::Sp).is_err());
        assert_eq!(HorizonSpec::default_for(Estimand::Sp).horizons.len(), 10);
        assert_eq!("RMST".parse::<Estimand>(), Ok(Estimand::Rmst));
    }
}
