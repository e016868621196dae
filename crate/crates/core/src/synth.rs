//! Synthetic head-and-neck style cohorts with known effect trajectories.
//!
//! Control survival is piecewise-exponential with a proportional risk score;
//! treated survival is control survival plus a subject-specific effect curve
//! `a(x) q(t)`, so the survival-probability effect is known exactly. The
//! generator refuses configurations where that sum stops being a survival
//! curve.
//!
//! Also provides the linear-quadratic biologically effective dose used as a
//! covariate.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{self, SchemaConfig, SurvivalCohort};
use crate::rng;
use crate::stats;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dose per fraction and number of fractions must be positive")]
    NonPositiveDose,
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("effect makes treated survival invalid for subject {subject} near t = {time} months")]
    InfeasibleEffect { subject: usize, time: f64 },
    #[error("scenario file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Cohort(#[from] cohort::CohortError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SynthError>;

// ---------------------------------------------------------------------------
// Biologically effective dose

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BedModel {
    /// Fixed repopulation loss per day past onset.
    DoseIndependent,
    /// Repopulation loss scaled by dose per fraction relative to the reference dose.
    DoseDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BedParams {
    /// Linear radiosensitivity, per Gy.
    pub alpha: f64,
    pub alpha_beta: f64,
    /// Days after which accelerated repopulation starts.
    pub onset_days: f64,
    /// Dose-equivalent loss per day past onset, in Gy.
    pub repopulation_gy_per_day: f64,
    /// Dose per fraction at which both models agree.
    pub reference_dose: f64,
}

impl Default for BedParams {
    fn default() -> Self {
        BedParams { alpha: 0.2, alpha_beta: 10.0, onset_days: 28.0, repopulation_gy_per_day: 0.7, reference_dose: 2.0 }
    }
}

impl BedParams {
    /// Daily loss `ln 2 / (alpha * doubling_days)` for a tumour potential
    /// doubling time.
    pub fn loss_from_doubling_time(&self, doubling_days: f64) -> f64 {
        std::f64::consts::LN_2 / (self.alpha * doubling_days)
    }

    fn validate(&self) -> Result<()> {
        let positive = [self.alpha, self.alpha_beta, self.onset_days, self.reference_dose];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.repopulation_gy_per_day >= 0.0) {
            return Err(SynthError::Config("BED parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Linear-quadratic BED with a linear repopulation correction.
pub fn bed(
    dose_per_fraction: f64,
    fractions: u32,
    duration_days: f64,
    params: &BedParams,
    model: BedModel,
) -> Result<f64> {
    if !(dose_per_fraction > 0.0) || fractions == 0 {
        return Err(SynthError::NonPositiveDose);
    }
    if !(duration_days > 0.0) {
        return Err(SynthError::Config("treatment duration must be positive".into()));
    }
    params.validate()?;
    let d = dose_per_fraction;
    let physical = f64::from(fractions) * d * (1.0 + d / params.alpha_beta);
    let rate = match model {
        BedModel::DoseIndependent => params.repopulation_gy_per_day,
        BedModel::DoseDependent => params.repopulation_gy_per_day * d / params.reference_dose,
    };
    Ok(physical - (duration_days - params.onset_days).max(0.0) * rate)
}

// ---------------------------------------------------------------------------
// Scenario

/// Shape `q(t)` of the survival-probability effect; multiplied by the
/// subject's amplitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EffectShape {
    /// `t (2p - t) / p^2` on `[0, 2p]`, zero afterwards: rises from 0 to 1 at `p`.
    Quadratic {
        peak: f64,
    },
    /// Linear interpolation through `(times, values)` with an implicit `(0, 0)`;
    /// constant after the last point.
    Piecewise {
        times: Vec<f64>,
        values: Vec<f64>,
    },
    Null,
}

impl EffectShape {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            EffectShape::Quadratic { peak } => {
                if t <= 0.0 || t >= 2.0 * peak {
                    0.0
                } else {
                    t * (2.0 * peak - t) / (peak * peak)
                }
            }
            EffectShape::Piecewise { times, values } => {
                let (mut t0, mut v0) = (0.0, 0.0);
                for (&t1, &v1) in times.iter().zip(values) {
                    if t <= t1 {
                        return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
                    }
                    (t0, v0) = (t1, v1);
                }
                v0
            }
            EffectShape::Null => 0.0,
        }
    }

    /// `integral_0^h q(t) dt`.
    pub fn integral(&self, h: f64) -> f64 {
        match self {
            EffectShape::Quadratic { peak } => {
                let p = *peak;
                let u = h.clamp(0.0, 2.0 * p);
                (p * u * u - u * u * u / 3.0) / (p * p)
            }
            EffectShape::Piecewise { times, values } => {
                let (mut t0, mut v0, mut acc) = (0.0, 0.0, 0.0);
                for (&t1, &v1) in times.iter().zip(values) {
                    if h <= t1 {
                        let vh = v0 + (v1 - v0) * (h - t0) / (t1 - t0);
                        return acc + 0.5 * (v0 + vh) * (h - t0);
                    }
                    acc += 0.5 * (v0 + v1) * (t1 - t0);
                    (t0, v0) = (t1, v1);
                }
                acc + v0 * (h - t0)
            }
            EffectShape::Null => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            EffectShape::Quadratic { peak } if !(*peak > 0.0) => {
                Err(SynthError::Config("effect peak must be positive".into()))
            }
            EffectShape::Piecewise { times, values } => {
                let ok = times.len() == values.len()
                    && !times.is_empty()
                    && times[0] > 0.0
                    && times.windows(2).all(|w| w[0] < w[1])
                    && values.iter().all(|v| v.abs() <= 1.0);
                if ok {
                    Ok(())
                } else {
                    Err(SynthError::Config("piecewise effect needs increasing positive times and |values| <= 1".into()))
                }
            }
            _ => Ok(()),
        }
    }
}

/// `intercept + sum coef * feature` over named standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: BTreeMap<String, f64>,
}

impl LinearModel {
    fn new(intercept: f64, coefs: &[(&str, f64)]) -> Self {
        LinearModel { intercept, coefficients: coefs.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }

    fn eval(&self, f: &BTreeMap<String, f64>) -> f64 {
        self.intercept + self.coefficients.iter().map(|(k, c)| c * f[k]).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regimen {
    pub dose_per_fraction: f64,
    pub fractions: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CovariateSpec {
    pub age_mean: f64,
    pub age_sd: f64,
    pub male_rate: f64,
    /// Probabilities of stages I–IV.
    pub stage_probs: [f64; 4],
    /// Probabilities of positive, negative and unknown HPV status.
    pub hpv_probs: [f64; 3],
    pub smoker_rate: f64,
    pub pack_years_shape: f64,
    pub pack_years_scale: f64,
    pub site_probs: BTreeMap<String, f64>,
    pub regimens: Vec<Regimen>,
    /// Mean of the exponential overrun of the planned schedule, in days.
    pub delay_mean_days: f64,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        CovariateSpec {
            age_mean: 60.0,
            age_sd: 9.0,
            male_rate: 0.48,
            stage_probs: [0.15, 0.20, 0.25, 0.40],
            hpv_probs: [0.55, 0.25, 0.20],
            smoker_rate: 0.7,
            pack_years_shape: 2.0,
            pack_years_scale: 15.0,
            site_probs: [
                ("hypopharynx", 0.08),
                ("larynx", 0.20),
                ("nasopharynx", 0.07),
                ("oral_cavity", 0.10),
                ("oropharynx", 0.55),
            ]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
            regimens: vec![
                Regimen { dose_per_fraction: 2.0, fractions: 35, weight: 0.65 },
                Regimen { dose_per_fraction: 2.0, fractions: 33, weight: 0.15 },
                Regimen { dose_per_fraction: 2.4, fractions: 25, weight: 0.20 },
            ],
            delay_mean_days: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HazardSpec {
    /// Start of each constant-hazard piece, months; the first must be 0.
    pub knots: Vec<f64>,
    /// Monthly hazard on each piece.
    pub rates: Vec<f64>,
    /// Log relative risk.
    pub risk: LinearModel,
    pub risk_min: f64,
    pub risk_max: f64,
}

impl Default for HazardSpec {
    fn default() -> Self {
        HazardSpec {
            knots: vec![0.0, 24.0, 60.0],
            rates: vec![0.011, 0.027, 0.011],
            risk: LinearModel::new(
                0.0,
                &[("age", 0.35), ("stage", 0.45), ("hpv_positive", -0.6), ("pack_years", 0.25), ("sex", 0.1)],
            ),
            risk_min: 0.0,
            risk_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EffectSpec {
    pub shape: EffectShape,
    /// Population-level effect size at the shape's maximum.
    pub amplitude: f64,
    /// Relative effect modification; its intercept should be 1.
    pub modifiers: LinearModel,
    pub modifier_min: f64,
    pub modifier_max: f64,
}

impl Default for EffectSpec {
    fn default() -> Self {
        EffectSpec {
            shape: EffectShape::Quadratic { peak: 50.0 },
            amplitude: 0.15,
            modifiers: LinearModel::new(
                1.0,
                &[("stage", 0.25), ("pack_years", -0.3), ("hpv_positive", 0.2), ("age", -0.15), ("sex", 0.1)],
            ),
            modifier_min: 0.2,
            modifier_max: 1.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CensoringSpec {
    /// Administrative censoring is uniform on `[admin_min, admin_max]` months.
    pub admin_min: f64,
    pub admin_max: f64,
    /// Monthly hazard of loss to follow-up.
    pub dropout_rate: f64,
}

impl Default for CensoringSpec {
    fn default() -> Self {
        CensoringSpec { admin_min: 60.0, admin_max: 140.0, dropout_rate: 0.0005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub seed: u64,
    pub horizons: Vec<f64>,
    pub covariates: CovariateSpec,
    pub treatment: LinearModel,
    pub hazard: HazardSpec,
    pub effect: EffectSpec,
    pub censoring: CensoringSpec,
    pub bed: BedParams,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "radcure-like".into(),
            n: 4000,
            seed: 1,
            horizons: (1..=10).map(|k| 12.0 * k as f64).collect(),
            covariates: CovariateSpec::default(),
            treatment: LinearModel::new(
                -0.45,
                &[("stage", 0.8), ("age", -0.4), ("hpv_positive", 0.3), ("sex", 0.1), ("pack_years", -0.2)],
            ),
            hazard: HazardSpec::default(),
            effect: EffectSpec::default(),
            censoring: CensoringSpec::default(),
            bed: BedParams::default(),
        }
    }
}

/// The scenario shipped as `scenarios/radcure-like.toml`.
pub const RADCURE_LIKE_TOML: &str = include_str!("../../../scenarios/radcure-like.toml");

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn radcure_like() -> Self {
        Self::parse(RADCURE_LIKE_TOML).expect("shipped scenario is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Same scenario without any treatment effect.
    pub fn null_effect(&self) -> Self {
        let mut c = self.clone();
        c.effect.shape = EffectShape::Null;
        c
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n < 10 {
            return bad("n must be at least 10".into());
        }
        let h = &self.hazard;
        if h.knots.len() != h.rates.len() || h.knots.first() != Some(&0.0) {
            return bad("hazard knots must start at 0 and match rates".into());
        }
        if h.knots.windows(2).any(|w| w[0] >= w[1]) || h.rates.iter().any(|r| !(*r > 0.0)) {
            return bad("hazard knots must increase and rates must be positive".into());
        }
        if !(h.risk_min <= h.risk_max) || !(self.effect.modifier_min <= self.effect.modifier_max) {
            return bad("risk and modifier bounds are inverted".into());
        }
        let c = &self.censoring;
        if !(c.admin_min > 0.0 && c.admin_min <= c.admin_max) || !(c.dropout_rate >= 0.0) {
            return bad("censoring needs 0 < admin_min <= admin_max and dropout_rate >= 0".into());
        }
        if !(self.effect.amplitude.abs() <= 1.0) {
            return bad("effect amplitude must lie in [-1, 1]".into());
        }
        self.effect.shape.validate()?;
        self.bed.validate()?;
        let cv = &self.covariates;
        let probs_ok = |p: &[f64]| p.iter().all(|v| *v >= 0.0) && p.iter().sum::<f64>() > 0.0;
        if !probs_ok(&cv.stage_probs) || !probs_ok(&cv.hpv_probs) || cv.site_probs.is_empty() {
            return bad("covariate probabilities must be non-negative with positive total".into());
        }
        if !probs_ok(&cv.site_probs.values().copied().collect::<Vec<_>>()) {
            return bad("site probabilities must be non-negative with positive total".into());
        }
        if cv.regimens.is_empty() || cv.regimens.iter().any(|r| !(r.dose_per_fraction > 0.0) || r.fractions == 0) {
            return bad("regimens need positive doses and fractions".into());
        }
        if !(cv.age_sd > 0.0 && cv.pack_years_shape > 0.0 && cv.pack_years_scale > 0.0) {
            return bad("age_sd and pack-years parameters must be positive".into());
        }
        let known = self.feature_names();
        for m in [&self.treatment, &h.risk, &self.effect.modifiers] {
            if let Some(k) = m.coefficients.keys().find(|k| !known.contains(k)) {
                return bad(format!("unknown feature `{k}`; expected one of {known:?}"));
            }
        }
        if self.horizons.is_empty() || self.horizons.iter().any(|t| !(*t > 0.0)) {
            return bad("horizons must be positive".into());
        }
        Ok(())
    }

    /// Names usable in the linear models.
    pub fn feature_names(&self) -> Vec<String> {
        let mut v: Vec<String> =
            ["age", "sex", "stage", "hpv_positive", "hpv_unknown", "pack_years", "bed_di", "bed_dd"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        v.extend(self.covariates.site_probs.keys().map(|s| format!("site_{s}")));
        v
    }

    /// Schema config for the generated CSV.
    pub fn schema(&self) -> SchemaConfig {
        SchemaConfig::parse(
            "age = continuous\nsex = binary\nstage = continuous\nhpv = categorical(drop=negative)\n\
             pack_years = continuous\nsite = categorical(drop=oropharynx)\nbed_di = continuous\nbed_dd = continuous\n",
        )
        .expect("static schema")
    }
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub scenario: String,
    pub seed: u64,
    pub horizons: Vec<f64>,
    pub ids: Vec<String>,
    pub propensity: Vec<f64>,
    /// Subject-specific effect amplitude `a(x)`.
    pub amplitude: Vec<f64>,
    /// `effect_sp[i][k]`: survival-probability effect of subject `i` at horizon `k`.
    pub effect_sp: Vec<Vec<f64>>,
    pub effect_rmst: Vec<Vec<f64>>,
    pub ate_sp: Vec<f64>,
    pub ate_rmst: Vec<f64>,
}

impl TruthRecord {
    /// Mean effects over a subset of subjects (e.g. those kept after trimming).
    pub fn ate_over(&self, rows: &[usize], rmst: bool) -> Vec<f64> {
        let src = if rmst { &self.effect_rmst } else { &self.effect_sp };
        (0..self.horizons.len()).map(|k| stats::mean(&rows.iter().map(|&i| src[i][k]).collect::<Vec<_>>())).collect()
    }

    /// Row of each subject id.
    pub fn index_of(&self) -> std::collections::HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Raw CSV (categorical columns as labels), ingestible with [`ScenarioConfig::schema`].
    pub csv: String,
    pub schema: SchemaConfig,
    pub cohort: SurvivalCohort,
    pub truth: TruthRecord,
}

struct Baseline<'a> {
    knots: &'a [f64],
    rates: &'a [f64],
}

impl Baseline<'_> {
    fn cumulative(&self, t: f64) -> f64 {
        let mut h = 0.0;
        for (k, (&lo, &r)) in self.knots.iter().zip(self.rates).enumerate() {
            let hi = self.knots.get(k + 1).copied().unwrap_or(f64::INFINITY);
            if t <= lo {
                break;
            }
            h += (t.min(hi) - lo) * r;
        }
        h
    }

    fn inverse(&self, target: f64) -> f64 {
        let mut h = 0.0;
        for (k, (&lo, &r)) in self.knots.iter().zip(self.rates).enumerate() {
            let hi = self.knots.get(k + 1).copied().unwrap_or(f64::INFINITY);
            let piece = (hi - lo) * r;
            if h + piece >= target {
                return lo + (target - h) / r;
            }
            h += piece;
        }
        f64::INFINITY
    }
}

fn pick(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn round_to(v: f64, digits: i32) -> f64 {
    let s = 10f64.powi(digits);
    (v * s).round() / s
}

const FEASIBILITY_STEP: f64 = 0.25;

/// Draws a cohort and its ground truth from one seeded stream.
pub fn generate(config: &ScenarioConfig) -> Result<Generated> {
    config.validate()?;
    let cv = &config.covariates;
    let mut r = rng::stream(config.seed, &[rng::tag::SYNTH]);
    let age_dist = Normal::new(cv.age_mean, cv.age_sd).map_err(|e| SynthError::Config(e.to_string()))?;
    let pack_dist =
        Gamma::new(cv.pack_years_shape, cv.pack_years_scale).map_err(|e| SynthError::Config(e.to_string()))?;
    let sites: Vec<(&String, f64)> = cv.site_probs.iter().map(|(k, v)| (k, *v)).collect();
    let site_w: Vec<f64> = sites.iter().map(|s| s.1).collect();
    let reg_w: Vec<f64> = cv.regimens.iter().map(|g| g.weight).collect();
    let baseline = Baseline { knots: &config.hazard.knots, rates: &config.hazard.rates };
    let shape = &config.effect.shape;
    let t_cap = config.censoring.admin_max;
    let n_grid = (t_cap / FEASIBILITY_STEP).ceil() as usize;
    let q_grid: Vec<f64> = (0..=n_grid).map(|k| shape.value(k as f64 * FEASIBILITY_STEP)).collect();
    let dropout =
        (config.censoring.dropout_rate > 0.0).then(|| Exp::new(config.censoring.dropout_rate).expect("positive rate"));
    const HPV: [&str; 3] = ["positive", "negative", "unknown"];

    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record([
        "id",
        "age",
        "sex",
        "stage",
        "hpv",
        "pack_years",
        "site",
        "bed_di",
        "bed_dd",
        "treatment",
        "time_months",
        "event",
    ])
    .map_err(std::io::Error::from)?;

    let n = config.n;
    let width = n.to_string().len();
    let mut truth = TruthRecord {
        scenario: config.name.clone(),
        seed: config.seed,
        horizons: config.horizons.clone(),
        ids: Vec::with_capacity(n),
        propensity: Vec::with_capacity(n),
        amplitude: Vec::with_capacity(n),
        effect_sp: Vec::with_capacity(n),
        effect_rmst: Vec::with_capacity(n),
        ate_sp: vec![],
        ate_rmst: vec![],
    };
    let z = |v: f64, m: f64, s: f64| ((v - m) / s).clamp(-3.0, 3.0);

    for i in 0..n {
        let age = round_to(age_dist.sample(&mut r).clamp(30.0, 90.0), 1);
        let male = r.random::<f64>() < cv.male_rate;
        let stage = pick(&mut r, &cv.stage_probs) + 1;
        let hpv = pick(&mut r, &cv.hpv_probs);
        let pack =
            if r.random::<f64>() < cv.smoker_rate { round_to(pack_dist.sample(&mut r).min(150.0), 1) } else { 0.0 };
        let site = sites[pick(&mut r, &site_w)].0;
        let reg = &cv.regimens[pick(&mut r, &reg_w)];
        let planned = (f64::from(reg.fractions) - 1.0) * 7.0 / 5.0 + 1.0;
        let duration = planned + (-cv.delay_mean_days * (1.0 - r.random::<f64>()).ln()).round();
        let bed_di =
            round_to(bed(reg.dose_per_fraction, reg.fractions, duration, &config.bed, BedModel::DoseIndependent)?, 2);
        let bed_dd =
            round_to(bed(reg.dose_per_fraction, reg.fractions, duration, &config.bed, BedModel::DoseDependent)?, 2);

        let mut f = BTreeMap::new();
        f.insert("age".to_string(), z(age, 60.0, 9.0));
        f.insert("sex".to_string(), f64::from(u8::from(male)) - 0.5);
        f.insert("stage".to_string(), z(stage as f64, 2.9, 1.05));
        f.insert("hpv_positive".to_string(), f64::from(u8::from(hpv == 0)));
        f.insert("hpv_unknown".to_string(), f64::from(u8::from(hpv == 2)));
        f.insert("pack_years".to_string(), z(pack, 21.0, 20.0));
        f.insert("bed_di".to_string(), z(bed_di, 68.0, 3.0));
        f.insert("bed_dd".to_string(), z(bed_dd, 68.0, 3.0));
        for (s, _) in &sites {
            f.insert(format!("site_{s}"), f64::from(u8::from(*s == site)));
        }

        let e = stats::logistic(config.treatment.eval(&f));
        let treated = r.random::<f64>() < e;
        let risk = config.hazard.risk.eval(&f).clamp(config.hazard.risk_min, config.hazard.risk_max).exp();
        let amp = config.effect.amplitude
            * config.effect.modifiers.eval(&f).clamp(config.effect.modifier_min, config.effect.modifier_max);
        let s0 = |t: f64| (-risk * baseline.cumulative(t)).exp();

        // treated survival S0 + a q must stay a survival curve on the observable window
        let mut prev = 1.0;
        for (k, q) in q_grid.iter().enumerate() {
            let t = k as f64 * FEASIBILITY_STEP;
            let s1 = s0(t) + amp * q;
            if !(-1e-12..=1.0 + 1e-12).contains(&s1) || s1 > prev + 1e-12 {
                return Err(SynthError::InfeasibleEffect { subject: i, time: t });
            }
            prev = s1;
        }

        let u: f64 = 1.0 - r.random::<f64>();
        let event_time = if !treated {
            baseline.inverse(-u.ln() / risk)
        } else {
            let s1 = |t: f64| s0(t) + amp * shape.value(t);
            if s1(t_cap) > u {
                t_cap + 1.0
            } else {
                let (mut a, mut b) = (0.0, t_cap);
                while b - a > 1e-9 {
                    let m = 0.5 * (a + b);
                    if s1(m) > u {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                b
            }
        };
        let admin =
            config.censoring.admin_min + (config.censoring.admin_max - config.censoring.admin_min) * r.random::<f64>();
        let censor = match &dropout {
            Some(d) => admin.min(d.sample(&mut r)),
            None => admin,
        };
        let (time, event) = if event_time <= censor { (event_time, true) } else { (censor, false) };
        let time = round_to(time, 4).max(1e-4);

        let id = format!("S{:0width$}", i + 1);
        out.write_record([
            id.clone(),
            format!("{age}"),
            u8::from(male).to_string(),
            stage.to_string(),
            HPV[hpv].to_string(),
            format!("{pack}"),
            site.clone(),
            format!("{bed_di}"),
            format!("{bed_dd}"),
            u8::from(treated).to_string(),
            format!("{time}"),
            u8::from(event).to_string(),
        ])
        .map_err(std::io::Error::from)?;

        truth.ids.push(id);
        truth.propensity.push(e);
        truth.amplitude.push(amp);
        truth.effect_sp.push(config.horizons.iter().map(|&h| amp * shape.value(h)).collect());
        truth.effect_rmst.push(config.horizons.iter().map(|&h| amp * shape.integral(h)).collect());
    }
    let all: Vec<usize> = (0..n).collect();
    truth.ate_sp = truth.ate_over(&all, false);
    truth.ate_rmst = truth.ate_over(&all, true);

    let csv = String::from_utf8(out.into_inner().map_err(|e| e.into_error())?).expect("utf-8 csv");
    let schema = config.schema();
    let cohort = cohort::ingest_reader(csv.as_bytes(), &schema)?.cohort;
    Ok(Generated { csv, schema, cohort, truth })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bed_examples() {
        let p = BedParams::default();
        let v = bed(2.0, 35, 20.0, &p, BedModel::DoseIndependent).unwrap();
        assert!((v - 84.0).abs() < 1e-12);
        let v = bed(2.0, 35, p.onset_days + 7.0, &p, BedModel::DoseIndependent).unwrap();
        assert!((v - 79.1).abs() < 1e-12);
        let zero = BedParams { repopulation_gy_per_day: 0.0, ..p };
        for d in [1.8, 2.0, 2.4] {
            assert_eq!(
                bed(d, 30, 50.0, &zero, BedModel::DoseIndependent).unwrap(),
                bed(d, 30, 50.0, &zero, BedModel::DoseDependent).unwrap()
            );
        }
        assert!(matches!(bed(0.0, 35, 40.0, &p, BedModel::DoseIndependent), Err(SynthError::NonPositiveDose)));
        assert!(matches!(bed(2.0, 0, 40.0, &p, BedModel::DoseIndependent), Err(SynthError::NonPositiveDose)));
    }

    #[test]
    fn shapes() {
        let q = EffectShape::Quadratic { peak: 50.0 };
        assert_eq!(q.value(50.0), 1.0);
        assert_eq!(q.value(0.0), 0.0);
        assert_eq!(q.value(130.0), 0.0);
        assert!((q.integral(100.0) - 200.0 / 3.0).abs() < 1e-12);
        assert!((q.integral(150.0) - q.integral(100.0)).abs() < 1e-12);
        let p = EffectShape::Piecewise { times: vec![10.0, 20.0], values: vec![1.0, 0.5] };
        assert_eq!(p.value(5.0), 0.5);
        assert_eq!(p.value(15.0), 0.75);
        assert_eq!(p.value(40.0), 0.5);
        assert!((p.integral(30.0) - (5.0 + 7.5 + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn baseline_inverse_roundtrip() {
        let b = Baseline { knots: &[0.0, 24.0, 60.0], rates: &[0.03, 0.02, 0.01] };
        for t in [1.0, 24.0, 30.0, 100.0] {
            assert!((b.inverse(b.cumulative(t)) - t).abs() < 1e-9);
        }
    }

    #[test]
    fn small_generation_is_seeded() {
        let cfg = ScenarioConfig { n: 300, ..ScenarioConfig::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.cohort.len(), 300);
        let c = generate(&ScenarioConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.csv, c.csv);
    }

    #[test]
    fn null_scenario_has_zero_truth() {
        let cfg = ScenarioConfig { n: 200, ..ScenarioConfig::default() }.null_effect();
        let g = generate(&cfg).unwrap();
        assert!(g.truth.ate_sp.iter().all(|v| *v == 0.0));
        assert!(g.truth.ate_rmst.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_truth_peaks_at_48_on_grid() {
        let g = generate(&ScenarioConfig { n: 500, ..ScenarioConfig::default() }).unwrap();
        let k = (0..10).fold(0, |b, k| if g.truth.ate_sp[k] > g.truth.ate_sp[b] { k } else { b });
        assert_eq!(g.truth.horizons[k], 48.0);
    }

    #[test]
    fn oversized_effect_is_rejected() {
        let mut cfg = ScenarioConfig { n: 50, ..ScenarioConfig::default() };
        cfg.effect.amplitude = 1.0;
        assert!(matches!(generate(&cfg), Err(SynthError::InfeasibleEffect { .. })));
    }

    #[test]
    fn unknown_feature_is_a_config_error() {
        let mut cfg = ScenarioConfig::default();
        cfg.treatment.coefficients.insert("height".into(), 1.0);
        assert!(matches!(generate(&cfg), Err(SynthError::Config(_))));
    }

    #[test]
    fn shipped_scenario_matches_defaults() {
        assert_eq!(ScenarioConfig::radcure_like(), ScenarioConfig::default());
        let round = ScenarioConfig::parse(&ScenarioConfig::default().to_toml()).unwrap();
        assert_eq!(round, ScenarioConfig::default());
    }
}
