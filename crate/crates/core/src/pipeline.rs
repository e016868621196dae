//! End-to-end estimation: standardize, split, propensity, trim, then one
//! doubly-robust estimate per horizon and estimand, fused into trajectories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{self, CohortError, SplitAssignment, SurvivalCohort};
use crate::forest::{self, Estimand, ForestConfig, ForestError, HorizonEstimate, NuisanceConfig};
use crate::propensity::{self, PropensityConfig, PropensityError, PropensityModel, TrimResult};
use crate::trajectory::{self, EffectSeries, TrajectoryError, TrajectoryReport};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Propensity(#[from] PropensityError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid pipeline configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub horizons: Vec<f64>,
    pub estimands: Vec<Estimand>,
    pub train_fraction: f64,
    pub trim_low: f64,
    pub trim_high: f64,
    pub propensity: PropensityConfig,
    pub forest: ForestConfig,
    pub nuisance: NuisanceConfig,
    /// Fit the conditional-effect forest; ATEs do not need it.
    pub fit_cate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            horizons: (1..=10).map(|k| 12.0 * k as f64).collect(),
            estimands: vec![Estimand::Sp, Estimand::Rmst],
            train_fraction: 0.75,
            trim_low: 0.10,
            trim_high: 0.90,
            propensity: PropensityConfig::default(),
            forest: ForestConfig::default(),
            nuisance: NuisanceConfig::default(),
            fit_cate: true,
        }
    }
}

impl PipelineConfig {
    /// Smaller forests and no tuning, for tests and CI.
    pub fn quick(seed: u64) -> Self {
        PipelineConfig {
            seed,
            propensity: PropensityConfig { folds: 5, ..PropensityConfig::default() },
            forest: ForestConfig { trees: 200, tune: false, ..ForestConfig::default() },
            nuisance: NuisanceConfig { trees: 100, ..NuisanceConfig::default() },
            ..PipelineConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0 < self.trim_low && self.trim_low < self.trim_high && self.trim_high < 1.0) {
            return Err(PipelineError::Config("need 0 < trim_low < trim_high < 1".into()));
        }
        if self.estimands.is_empty() {
            return Err(PipelineError::Config("no estimand requested".into()));
        }
        forest::HorizonSpec::new(self.horizons.clone(), self.estimands[0])?;
        Ok(())
    }
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub config: PipelineConfig,
    /// Standardized input cohort.
    pub cohort: SurvivalCohort,
    /// Covariates flagged during standardization (zero variance).
    pub flagged: Vec<String>,
    pub split: SplitAssignment,
    pub propensity: PropensityModel,
    /// Scores for every subject of `cohort`.
    pub scores: Vec<f64>,
    pub trim: TrimResult,
    /// Subjects kept after trimming, in input order.
    pub kept: SurvivalCohort,
    pub kept_scores: Vec<f64>,
    /// Train-split membership of each kept subject.
    pub kept_train: Vec<bool>,
    pub estimates: Vec<HorizonEstimate>,
}

impl PipelineRun {
    pub fn estimates_for(&self, estimand: Estimand) -> Vec<&HorizonEstimate> {
        self.estimates.iter().filter(|e| e.estimand == estimand).collect()
    }

    pub fn series(&self, estimand: Estimand) -> Result<EffectSeries> {
        let est: Vec<HorizonEstimate> = self.estimates_for(estimand).into_iter().cloned().collect();
        Ok(EffectSeries::from_estimates(&est)?)
    }

    pub fn trajectories(&self) -> Result<TrajectoryReport> {
        let series = self.config.estimands.iter().map(|&e| self.series(e)).collect::<Result<Vec<_>>>()?;
        Ok(trajectory::trajectory_report(&series)?)
    }

    /// Rows of `cohort` kept after trimming.
    pub fn kept_rows(&self) -> &[usize] {
        &self.trim.kept_index
    }
}

/// Standardization, split, propensity and trimming.
pub struct Prepared {
    pub cohort: SurvivalCohort,
    pub flagged: Vec<String>,
    pub split: SplitAssignment,
    pub propensity: PropensityModel,
    pub scores: Vec<f64>,
    pub trim: TrimResult,
}

pub fn prepare(raw: &SurvivalCohort, cfg: &PipelineConfig) -> Result<Prepared> {
    cfg.validate()?;
    let std = if raw.standardized {
        cohort::Standardized { cohort: raw.clone(), flagged: vec![] }
    } else {
        cohort::standardize(raw)?
    };
    let cohort = std.cohort;
    let split = cohort::stratified_split(&cohort, cfg.train_fraction, cfg.seed)?;
    let train = cohort.select(&split.train_index);
    let pcfg = PropensityConfig { seed: cfg.seed, ..cfg.propensity.clone() };
    let model = propensity::fit_elastic_net(&train, &pcfg)?;
    let scores = propensity::predict_scores(&model, &cohort)?;
    let trim = propensity::trim(&cohort, &scores, cfg.trim_low, cfg.trim_high)?;
    Ok(Prepared { cohort, flagged: std.flagged, split, propensity: model, scores, trim })
}

impl Prepared {
    /// Kept cohort, its scores and train-split membership.
    fn kept(&self) -> (SurvivalCohort, Vec<f64>, Vec<bool>) {
        let kept = self.cohort.select(&self.trim.kept_index);
        let scores = self.trim.kept_index.iter().map(|&i| self.scores[i]).collect();
        let mask = self.split.train_mask(self.cohort.len());
        let train = self.trim.kept_index.iter().map(|&i| mask[i]).collect();
        (kept, scores, train)
    }
}

fn estimation_config(cfg: &PipelineConfig) -> forest::EstimationConfig {
    forest::EstimationConfig { forest: cfg.forest.clone(), nuisance: cfg.nuisance.clone(), seed: cfg.seed }
}

/// One horizon's fitted effect forest, reproduced exactly as in
/// [`run_estimation`] with the same configuration.
pub struct HorizonModel {
    pub kept: SurvivalCohort,
    pub kept_train: Vec<bool>,
    pub estimate: HorizonEstimate,
    pub forest: forest::CausalForestModel,
}

pub fn fit_horizon_model(
    raw: &SurvivalCohort,
    cfg: &PipelineConfig,
    horizon: f64,
    estimand: Estimand,
) -> Result<HorizonModel> {
    let prep = prepare(raw, cfg)?;
    let (kept, kept_scores, kept_train) = prep.kept();
    let (estimate, art) = forest::estimate_horizon_with(
        &kept,
        &kept_scores,
        horizon,
        estimand,
        &estimation_config(cfg),
        Some(&kept_train),
    )?;
    Ok(HorizonModel { kept, kept_train, estimate, forest: art.forest })
}

/// Runs every horizon and estimand in `cfg`.
pub fn run_estimation(raw: &SurvivalCohort, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let prep = prepare(raw, cfg)?;
    let (kept, kept_scores, kept_train) = prep.kept();
    let ecfg = estimation_config(cfg);
    let mut estimates = Vec::new();
    for &estimand in &cfg.estimands {
        for &h in &cfg.horizons {
            let est = if cfg.fit_cate {
                forest::estimate_horizon_with(&kept, &kept_scores, h, estimand, &ecfg, Some(&kept_train))?.0
            } else {
                forest::estimate_ate(&kept, &kept_scores, h, estimand, &ecfg)?
            };
            estimates.push(est);
        }
    }
    Ok(PipelineRun {
        config: cfg.clone(),
        cohort: prep.cohort,
        flagged: prep.flagged,
        split: prep.split,
        propensity: prep.propensity,
        scores: prep.scores,
        trim: prep.trim,
        kept,
        kept_scores,
        kept_train,
        estimates,
    })
}

/// Table-2 shaped rows: `(horizon, ate_sp, se_sp, ate_rmst, se_rmst)`.
pub fn table_rows(estimates: &[HorizonEstimate]) -> Vec<(f64, Option<(f64, f64)>, Option<(f64, f64)>)> {
    let mut hs: Vec<f64> = estimates.iter().map(|e| e.horizon).collect();
    hs.sort_by(f64::total_cmp);
    hs.dedup();
    hs.into_iter()
        .map(|h| {
            let find = |est: Estimand| {
                estimates.iter().find(|e| e.horizon == h && e.estimand == est).map(|e| (e.ate, e.ate_se))
            };
            (h, find(Estimand::Sp), find(Estimand::Rmst))
        })
        .collect()
}
