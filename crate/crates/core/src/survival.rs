//! Classical survival estimators: Kaplan–Meier, Nelson–Aalen, restricted mean
//! survival time and censoring-survival curves for inverse weighting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::SurvivalCohort;

/// Censoring-survival values below this are never used as inverse weights.
pub const CENSORING_FLOOR: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum SurvivalError {
    #[error("survival estimators need at least one subject")]
    EmptyInput,
    #[error("times and events differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("time {0} is not a positive finite number")]
    BadTime(f64),
    #[error("restricted mean requires a survival curve")]
    NonSurvivalCurve,
    #[error("horizon must be positive, got {0}")]
    BadHorizon(f64),
    #[error("treatment arm {0} has no subjects")]
    EmptyGroup(u8),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Survival,
    CumulativeHazard,
}

/// Right-continuous step function on `(0, inf)`, constant past the last
/// observed time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    kind: CurveKind,
    initial: f64,
    times: Vec<f64>,
    values: Vec<f64>,
    last_observed: f64,
}

impl StepFunction {
    pub fn kind(&self) -> CurveKind {
        self.kind
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.times
    }

    pub fn jump_values(&self) -> &[f64] {
        &self.values
    }

    pub fn value_at_zero(&self) -> f64 {
        self.initial
    }

    /// Largest time seen in the data, censored or not.
    pub fn last_observed(&self) -> f64 {
        self.last_observed
    }

    /// Value at `t`, including any jump at `t`.
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s <= t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    /// Left limit at `t`, excluding any jump at `t`.
    pub fn eval_left(&self, t: f64) -> f64 {
        match self.times.partition_point(|&s| s < t) {
            0 => self.initial,
            k => self.values[k - 1],
        }
    }

    /// True when `t` lies beyond follow-up and the curve is carried forward.
    pub fn is_extrapolated(&self, t: f64) -> bool {
        t > self.last_observed
    }

    /// `(t, value)` pairs starting at `(0, initial)`, for plot output.
    pub fn points(&self) -> Vec<(f64, f64)> {
        std::iter::once((0.0, self.initial))
            .chain(self.times.iter().copied().zip(self.values.iter().copied()))
            .collect()
    }
}

struct RiskTable {
    /// (time, deaths, at risk)
    rows: Vec<(f64, usize, usize)>,
    last: f64,
}

fn risk_table(times: &[f64], events: &[bool]) -> Result<RiskTable, SurvivalError> {
    if times.len() != events.len() {
        return Err(SurvivalError::LengthMismatch(times.len(), events.len()));
    }
    if times.is_empty() {
        return Err(SurvivalError::EmptyInput);
    }
    if let Some(&t) = times.iter().find(|t| !(**t > 0.0) || !t.is_finite()) {
        return Err(SurvivalError::BadTime(t));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut rows = Vec::new();
    let mut at_risk = times.len();
    let mut i = 0;
    while i < order.len() {
        let t = times[order[i]];
        let mut j = i;
        let mut deaths = 0;
        while j < order.len() && times[order[j]] == t {
            deaths += usize::from(events[order[j]]);
            j += 1;
        }
        // Everyone tied at `t` is at risk; deaths are processed before the
        // censorings at the same time.
        rows.push((t, deaths, at_risk));
        at_risk -= j - i;
        i = j;
    }
    Ok(RiskTable { rows, last: times[order[order.len() - 1]] })
}

/// Product-limit survival estimate.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<StepFunction, SurvivalError> {
    let table = risk_table(times, events)?;
    let mut s = 1.0;
    let (mut jt, mut jv) = (Vec::new(), Vec::new());
    for (t, d, n) in table.rows {
        if d > 0 {
            s *= (n - d) as f64 / n as f64;
            jt.push(t);
            jv.push(s);
        }
    }
    Ok(StepFunction { kind: CurveKind::Survival, initial: 1.0, times: jt, values: jv, last_observed: table.last })
}

/// Nelson–Aalen cumulative hazard `H(t) = sum_{t_j <= t} d_j / n_j`.
pub fn nelson_aalen(times: &[f64], events: &[bool]) -> Result<StepFunction, SurvivalError> {
    let table = risk_table(times, events)?;
    let mut h = 0.0;
    let (mut jt, mut jv) = (Vec::new(), Vec::new());
    for (t, d, n) in table.rows {
        if d > 0 {
            h += d as f64 / n as f64;
            jt.push(t);
            jv.push(h);
        }
    }
    Ok(StepFunction {
        kind: CurveKind::CumulativeHazard,
        initial: 0.0,
        times: jt,
        values: jv,
        last_observed: table.last,
    })
}

/// Exact area under a survival step function on `[0, horizon]`.
pub fn rmst(curve: &StepFunction, horizon: f64) -> Result<f64, SurvivalError> {
    if curve.kind != CurveKind::Survival {
        return Err(SurvivalError::NonSurvivalCurve);
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(SurvivalError::BadHorizon(horizon));
    }
    let mut area = 0.0;
    let mut prev_t = 0.0;
    let mut level = curve.initial;
    for (&t, &v) in curve.times.iter().zip(&curve.values) {
        if t >= horizon {
            break;
        }
        area += level * (t - prev_t);
        prev_t = t;
        level = v;
    }
    Ok(area + level * (horizon - prev_t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    None,
    #[default]
    ByTreatment,
}

/// Censoring-survival curves `K_c(t)`, one per arm (identical when pooled).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringCurves {
    pub conditioning: Conditioning,
    pub control: StepFunction,
    pub treated: StepFunction,
}

impl CensoringCurves {
    pub fn for_arm(&self, treated: bool) -> &StepFunction {
        if treated {
            &self.treated
        } else {
            &self.control
        }
    }
}

/// Kaplan–Meier of the censoring distribution (event indicator flipped).
pub fn censoring_survival(
    cohort: &SurvivalCohort,
    conditioning: Conditioning,
) -> Result<CensoringCurves, SurvivalError> {
    censoring_survival_from(&cohort.times(), &cohort.events(), &cohort.treatments(), conditioning)
}

pub fn censoring_survival_from(
    times: &[f64],
    events: &[bool],
    treatments: &[bool],
    conditioning: Conditioning,
) -> Result<CensoringCurves, SurvivalError> {
    let flipped: Vec<bool> = events.iter().map(|e| !e).collect();
    match conditioning {
        Conditioning::None => {
            let k = kaplan_meier(times, &flipped)?;
            Ok(CensoringCurves { conditioning, control: k.clone(), treated: k })
        }
        Conditioning::ByTreatment => {
            let arm = |w: bool| -> Result<StepFunction, SurvivalError> {
                let idx: Vec<usize> = (0..times.len()).filter(|&i| treatments[i] == w).collect();
                if idx.is_empty() {
                    return Err(SurvivalError::EmptyGroup(u8::from(w)));
                }
                let t: Vec<f64> = idx.iter().map(|&i| times[i]).collect();
                let d: Vec<bool> = idx.iter().map(|&i| flipped[i]).collect();
                kaplan_meier(&t, &d)
            };
            Ok(CensoringCurves { conditioning, control: arm(false)?, treated: arm(true)? })
        }
    }
}
