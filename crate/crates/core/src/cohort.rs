//! Censored survival cohorts: CSV ingestion, standardization and stratified
//! train/test splitting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;
use crate::stats::{self, Matrix};

pub const TIME_COLUMN: &str = "time_months";
pub const EVENT_COLUMN: &str = "event";
pub const TREATMENT_COLUMN: &str = "treatment";
pub const ID_COLUMN: &str = "id";

/// Largest allowed event-rate gap between train and test partitions.
pub const MAX_EVENT_RATE_GAP: f64 = 0.02;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("column `{0}` is missing from the CSV header")]
    MissingColumn(String),
    #[error("line {line}: cannot parse `{value}` in column `{column}`")]
    ParseError { line: usize, column: String, value: String },
    #[error("subject `{id}` has non-positive time {time}")]
    NonPositiveTime { id: String, time: f64 },
    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("stratified split needs at least 4 events, found {0}")]
    TooFewEvents(usize),
    #[error("cohort is already standardized")]
    AlreadyStandardized,
    #[error("cohort is empty")]
    Empty,
    #[error("duplicate subject id `{0}`")]
    DuplicateId(String),
    #[error("subject `{id}` has {found} covariates, expected {expected}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("subject `{0}` has a non-finite covariate")]
    NonFiniteCovariate(String),
    #[error("invalid schema config line {line}: {message}")]
    SchemaConfig { line: usize, message: String },
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CohortError>;

/// Per-column covariate kind.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
    OneHot { group: String, level: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// Standardization statistics; `Some` only for standardized continuous columns.
    pub stats: Vec<Option<ColumnStats>>,
}

impl ColumnSchema {
    pub fn new(names: Vec<String>, kinds: Vec<ColumnKind>) -> Self {
        assert_eq!(names.len(), kinds.len());
        let stats = vec![None; names.len()];
        ColumnSchema { names, kinds, stats }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Appends a continuous covariate column (used by the refutation harness).
    pub fn push_continuous(&mut self, name: impl Into<String>) {
        self.names.push(name.into());
        self.kinds.push(ColumnKind::Continuous);
        self.stats.push(None);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub covariates: Vec<f64>,
    pub treatment: bool,
    pub time_months: f64,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCohort {
    pub subjects: Vec<SubjectRecord>,
    pub schema: ColumnSchema,
    pub standardized: bool,
}

impl SurvivalCohort {
    /// Validates the record-level invariants and builds a cohort.
    pub fn new(subjects: Vec<SubjectRecord>, schema: ColumnSchema) -> Result<Self> {
        let p = schema.len();
        let mut seen = HashSet::with_capacity(subjects.len());
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(CohortError::DuplicateId(s.id.clone()));
            }
            if s.covariates.len() != p {
                return Err(CohortError::DimensionMismatch {
                    id: s.id.clone(),
                    expected: p,
                    found: s.covariates.len(),
                });
            }
            if !(s.time_months > 0.0) || !s.time_months.is_finite() {
                return Err(CohortError::NonPositiveTime { id: s.id.clone(), time: s.time_months });
            }
            if s.covariates.iter().any(|v| !v.is_finite()) {
                return Err(CohortError::NonFiniteCovariate(s.id.clone()));
            }
        }
        Ok(SurvivalCohort { subjects, schema, standardized: false })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn times(&self) -> Vec<f64> {
        self.subjects.iter().map(|s| s.time_months).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.event).collect()
    }

    pub fn treatments(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.treatment).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    pub fn covariates(&self) -> Matrix {
        let rows: Vec<&[f64]> = self.subjects.iter().map(|s| s.covariates.as_slice()).collect();
        Matrix::from_rows(&rows, self.dim())
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.subjects.iter().map(|s| s.covariates[j]).collect()
    }

    pub fn event_rate(&self) -> f64 {
        rate(self.subjects.iter().map(|s| s.event))
    }

    pub fn treatment_rate(&self) -> f64 {
        rate(self.subjects.iter().map(|s| s.treatment))
    }

    /// The sub-cohort at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> SurvivalCohort {
        SurvivalCohort {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            schema: self.schema.clone(),
            standardized: self.standardized,
        }
    }

    /// Appends a continuous covariate column.
    pub fn with_extra_column(&self, name: &str, values: &[f64]) -> SurvivalCohort {
        assert_eq!(values.len(), self.len());
        let mut out = self.clone();
        out.schema.push_continuous(name);
        for (s, &v) in out.subjects.iter_mut().zip(values) {
            s.covariates.push(v);
        }
        out
    }
}

fn rate(it: impl Iterator<Item = bool>) -> f64 {
    let (mut k, mut n) = (0usize, 0usize);
    for b in it {
        n += 1;
        k += usize::from(b);
    }
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// How a raw CSV column maps onto covariates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigKind {
    Continuous,
    Binary,
    /// One indicator per observed level; `drop` names an omitted reference level.
    Categorical {
        drop: Option<String>,
    },
}

/// Ordered column-name → kind mapping, read from a `name = kind` text file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SchemaConfig {
    pub columns: Vec<(String, ConfigKind)>,
}

impl SchemaConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut columns = Vec::new();
        let mut names = HashSet::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| CohortError::SchemaConfig { line: k + 1, message };
            let (name, kind) = line.split_once('=').ok_or_else(|| bad("expected `name = kind`".into()))?;
            let (name, kind) = (name.trim(), kind.trim());
            if [TIME_COLUMN, EVENT_COLUMN, TREATMENT_COLUMN, ID_COLUMN].contains(&name) {
                return Err(bad(format!("`{name}` is reserved")));
            }
            if !names.insert(name.to_string()) {
                return Err(bad(format!("duplicate column `{name}`")));
            }
            let kind = match kind {
                "continuous" => ConfigKind::Continuous,
                "binary" => ConfigKind::Binary,
                "categorical" => ConfigKind::Categorical { drop: None },
                other => match other.strip_prefix("categorical(drop=").and_then(|s| s.strip_suffix(')')) {
                    Some(level) => ConfigKind::Categorical { drop: Some(level.trim().to_string()) },
                    None => return Err(bad(format!("unknown kind `{other}`"))),
                },
            };
            columns.push((name.to_string(), kind));
        }
        Ok(SchemaConfig { columns })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// A config that re-ingests a written cohort column for column.
    pub fn for_schema(schema: &ColumnSchema) -> Self {
        let columns = schema
            .names
            .iter()
            .zip(&schema.kinds)
            .map(|(n, k)| {
                let kind = match k {
                    ColumnKind::Continuous => ConfigKind::Continuous,
                    ColumnKind::Binary | ColumnKind::OneHot { .. } => ConfigKind::Binary,
                };
                (n.clone(), kind)
            })
            .collect();
        SchemaConfig { columns }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, kind) in &self.columns {
            let k = match kind {
                ConfigKind::Continuous => "continuous".to_string(),
                ConfigKind::Binary => "binary".to_string(),
                ConfigKind::Categorical { drop: None } => "categorical".to_string(),
                ConfigKind::Categorical { drop: Some(l) } => format!("categorical(drop={l})"),
            };
            out.push_str(&format!("{name} = {k}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub dropped_missing: usize,
    pub rejected_nonpositive_time: usize,
}

impl IngestReport {
    pub fn dropped_count(&self) -> usize {
        self.dropped_missing + self.rejected_nonpositive_time
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub cohort: SurvivalCohort,
    pub report: IngestReport,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "N/A" | "NaN" | "nan" | "null" | ".")
}

/// Reads a cohort CSV, dropping rows with missing required fields and
/// rejecting rows with non-positive time. Both are counted in the report.
pub fn ingest_csv(path: impl AsRef<Path>, config: &SchemaConfig) -> Result<Ingested> {
    ingest_reader(std::fs::File::open(path)?, config)
}

pub fn ingest_reader<R: Read>(reader: R, config: &SchemaConfig) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let need = |name: &str| find(name).ok_or_else(|| CohortError::MissingColumn(name.to_string()));
    let time_col = need(TIME_COLUMN)?;
    let event_col = need(EVENT_COLUMN)?;
    let treat_col = need(TREATMENT_COLUMN)?;
    let id_col = find(ID_COLUMN);
    let cov_cols = config.columns.iter().map(|(n, _)| need(n)).collect::<Result<Vec<_>>>()?;

    let mut report = IngestReport::default();
    // (id, raw covariate fields, w, t, d)
    let mut rows: Vec<(String, Vec<String>, bool, f64, bool)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        report.rows_read += 1;
        let field = |c: usize| rec.get(c).unwrap_or("").trim();
        let required = [time_col, event_col, treat_col].into_iter().chain(cov_cols.iter().copied());
        if required.into_iter().any(|c| is_missing(field(c))) {
            report.dropped_missing += 1;
            continue;
        }
        let num = |c: usize, name: &str| -> Result<f64> {
            let v = field(c);
            v.parse::<f64>().map_err(|_| CohortError::ParseError {
                line,
                column: name.to_string(),
                value: v.to_string(),
            })
        };
        let flag = |c: usize, name: &str| -> Result<bool> {
            let v = num(c, name)?;
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(CohortError::ParseError { line, column: name.to_string(), value: field(c).into() })
            }
        };
        let t = num(time_col, TIME_COLUMN)?;
        let d = flag(event_col, EVENT_COLUMN)?;
        let w = flag(treat_col, TREATMENT_COLUMN)?;
        if !(t > 0.0) || !t.is_finite() {
            report.rejected_nonpositive_time += 1;
            continue;
        }
        let id = match id_col {
            Some(c) if !field(c).is_empty() => field(c).to_string(),
            _ => format!("row{}", line - 1),
        };
        let raw = cov_cols.iter().map(|&c| field(c).to_string()).collect();
        rows.push((id, raw, w, t, d));
    }

    // Expand categorical columns using the levels observed in retained rows.
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    enum Plan {
        Number { binary: bool },
        Levels(Vec<String>),
    }
    let mut plans = Vec::with_capacity(config.columns.len());
    for (j, (name, kind)) in config.columns.iter().enumerate() {
        match kind {
            ConfigKind::Continuous | ConfigKind::Binary => {
                names.push(name.clone());
                let binary = *kind == ConfigKind::Binary;
                kinds.push(if binary { ColumnKind::Binary } else { ColumnKind::Continuous });
                plans.push(Plan::Number { binary });
            }
            ConfigKind::Categorical { drop } => {
                let levels: BTreeSet<&str> = rows.iter().map(|r| r.1[j].as_str()).collect();
                let levels: Vec<String> =
                    levels.into_iter().filter(|l| drop.as_deref() != Some(*l)).map(str::to_string).collect();
                for l in &levels {
                    names.push(format!("{name}={l}"));
                    kinds.push(ColumnKind::OneHot { group: name.clone(), level: l.clone() });
                }
                plans.push(Plan::Levels(levels));
            }
        }
    }

    let mut subjects = Vec::with_capacity(rows.len());
    for (k, (id, raw, w, t, d)) in rows.into_iter().enumerate() {
        let mut covariates = Vec::with_capacity(names.len());
        for (j, plan) in plans.iter().enumerate() {
            match plan {
                Plan::Number { binary } => {
                    let v: f64 = raw[j].parse().map_err(|_| CohortError::ParseError {
                        line: k + 2,
                        column: config.columns[j].0.clone(),
                        value: raw[j].clone(),
                    })?;
                    if !v.is_finite() || (*binary && v != 0.0 && v != 1.0) {
                        return Err(CohortError::ParseError {
                            line: k + 2,
                            column: config.columns[j].0.clone(),
                            value: raw[j].clone(),
                        });
                    }
                    covariates.push(v);
                }
                Plan::Levels(levels) => {
                    covariates.extend(levels.iter().map(|l| f64::from(u8::from(*l == raw[j]))));
                }
            }
        }
        subjects.push(SubjectRecord { id, covariates, treatment: w, time_months: t, event: d });
    }
    let cohort = SurvivalCohort::new(subjects, ColumnSchema::new(names, kinds))?;
    Ok(Ingested { cohort, report })
}

/// Writes the cohort in the ingestible CSV layout (one-hot columns as binary).
pub fn write_csv<W: Write>(cohort: &SurvivalCohort, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![ID_COLUMN.to_string()];
    header.extend(cohort.schema.names.iter().cloned());
    header.extend([TREATMENT_COLUMN, TIME_COLUMN, EVENT_COLUMN].map(String::from));
    w.write_record(&header)?;
    for s in &cohort.subjects {
        let mut rec = vec![s.id.clone()];
        rec.extend(s.covariates.iter().map(|v| v.to_string()));
        rec.push(u8::from(s.treatment).to_string());
        rec.push(s.time_months.to_string());
        rec.push(u8::from(s.event).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Standardized {
    pub cohort: SurvivalCohort,
    /// Continuous columns left untransformed because they are constant.
    pub flagged: Vec<String>,
}

/// Sample mean and SD of every continuous column; `None` for constant or
/// non-continuous columns.
pub fn fit_column_stats(cohort: &SurvivalCohort) -> Vec<Option<ColumnStats>> {
    (0..cohort.dim())
        .map(|j| {
            if cohort.schema.kinds[j] != ColumnKind::Continuous {
                return None;
            }
            let col = cohort.column(j);
            let sd = stats::sd(&col);
            (sd > 0.0 && sd.is_finite()).then(|| ColumnStats { mean: stats::mean(&col), sd })
        })
        .collect()
}

/// Standardizes continuous columns with the cohort's own statistics.
pub fn standardize(cohort: &SurvivalCohort) -> Result<Standardized> {
    let stats = fit_column_stats(cohort);
    apply_stats(cohort, &stats)
}

/// Standardizes with statistics fitted elsewhere (typically the training split).
pub fn standardize_with(cohort: &SurvivalCohort, reference: &ColumnSchema) -> Result<Standardized> {
    if reference.names != cohort.schema.names {
        return Err(CohortError::DimensionMismatch {
            id: "<schema>".into(),
            expected: reference.len(),
            found: cohort.dim(),
        });
    }
    apply_stats(cohort, &reference.stats)
}

fn apply_stats(cohort: &SurvivalCohort, stats: &[Option<ColumnStats>]) -> Result<Standardized> {
    if cohort.standardized {
        return Err(CohortError::AlreadyStandardized);
    }
    let mut out = cohort.clone();
    let flagged = (0..cohort.dim())
        .filter(|&j| cohort.schema.kinds[j] == ColumnKind::Continuous && stats[j].is_none())
        .map(|j| cohort.schema.names[j].clone())
        .collect();
    for s in &mut out.subjects {
        for (v, st) in s.covariates.iter_mut().zip(stats) {
            if let Some(st) = st {
                *v = (*v - st.mean) / st.sd;
            }
        }
    }
    out.schema.stats = stats.to_vec();
    out.standardized = true;
    Ok(Standardized { cohort: out, flagged })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub train_fraction: f64,
    /// Row indices into the split cohort, ascending.
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
}

impl SplitAssignment {
    /// `mask[i]` is true when row `i` is in the training partition.
    pub fn train_mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.train_index {
            m[i] = true;
        }
        m
    }
}

/// Event-stratified split. The training size may move by up to
/// `max(2, 5% of n)` rows from `round(train_fraction * n)` when that is
/// needed to keep the event-rate gap within [`MAX_EVENT_RATE_GAP`].
pub fn stratified_split(cohort: &SurvivalCohort, train_fraction: f64, seed: u64) -> Result<SplitAssignment> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CohortError::BadFraction(train_fraction));
    }
    let n = cohort.len();
    if n == 0 {
        return Err(CohortError::Empty);
    }
    let mut events: Vec<usize> = (0..n).filter(|&i| cohort.subjects[i].event).collect();
    let mut others: Vec<usize> = (0..n).filter(|&i| !cohort.subjects[i].event).collect();
    if events.len() < 4 {
        return Err(CohortError::TooFewEvents(events.len()));
    }
    let (train_size, train_events) = split_counts(n, events.len(), train_fraction);

    let mut rng = rng::stream(seed, &[rng::tag::SPLIT]);
    events.shuffle(&mut rng);
    others.shuffle(&mut rng);
    let mut train_index: Vec<usize> =
        events[..train_events].iter().chain(&others[..train_size - train_events]).copied().collect();
    let mut test_index: Vec<usize> =
        events[train_events..].iter().chain(&others[train_size - train_events..]).copied().collect();
    train_index.sort_unstable();
    test_index.sort_unstable();
    let ids = |idx: &[usize]| idx.iter().map(|&i| cohort.subjects[i].id.clone()).collect();
    Ok(SplitAssignment {
        train_ids: ids(&train_index),
        test_ids: ids(&test_index),
        seed,
        train_fraction,
        train_index,
        test_index,
    })
}

/// Chooses `(train size, train events)`.
fn split_counts(n: usize, n_events: usize, fraction: f64) -> (usize, usize) {
    let target = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    if n < 2 {
        return (n, n_events.min(n));
    }
    let window = 2usize.max(n / 20);
    let lo = target.saturating_sub(window).max(1);
    let hi = (target + window).min(n - 1);
    let n_other = n - n_events;
    let gap_for = |t: usize| -> (f64, usize) {
        let ideal = (n_events as f64 * t as f64 / n as f64).round() as usize;
        let e = ideal.clamp(t.saturating_sub(n_other), t.min(n_events));
        let gap = (e as f64 / t as f64 - (n_events - e) as f64 / (n - t) as f64).abs();
        (gap, e)
    };
    let mut candidates: Vec<usize> = (lo..=hi).collect();
    candidates.sort_by_key(|&t| (t.abs_diff(target), t));
    let mut best: Option<(f64, usize, usize)> = None;
    for t in candidates {
        let (gap, e) = gap_for(t);
        if gap <= MAX_EVENT_RATE_GAP {
            return (t, e);
        }
        if best.map_or(true, |b| gap < b.0) {
            best = Some((gap, t, e));
        }
    }
    let (_, t, e) = best.expect("non-empty candidate window");
    (t, e)
}

/// Summary of categorical levels per one-hot group, in column order.
pub fn one_hot_groups(schema: &ColumnSchema) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (j, k) in schema.kinds.iter().enumerate() {
        if let ColumnKind::OneHot { group, .. } = k {
            groups.entry(group.clone()).or_default().push(j);
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> SchemaConfig {
        SchemaConfig::parse(text).unwrap()
    }

    fn toy(n: usize, n_events: usize) -> SurvivalCohort {
        let subjects = (0..n)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                covariates: vec![i as f64],
                treatment: i % 2 == 0,
                time_months: 1.0 + i as f64,
                event: i < n_events,
            })
            .collect();
        SurvivalCohort::new(subjects, ColumnSchema::new(vec!["x".into()], vec![ColumnKind::Continuous])).unwrap()
    }

    #[test]
    fn missing_treatment_row_is_dropped() {
        let csv = "id,age,treatment,time_months,event\n\
                   a,50,1,10,1\nb,60,,12,0\nc,70,0,3,1\nd,55,1,8,0\n";
        let got = ingest_reader(csv.as_bytes(), &cfg("age = continuous")).unwrap();
        assert_eq!(got.cohort.len(), 3);
        assert_eq!(got.report.dropped_count(), 1);
        assert_eq!(got.report.dropped_missing, 1);
        assert!(!got.cohort.standardized);
    }

    #[test]
    fn zero_time_row_is_rejected() {
        let csv = "age,treatment,time_months,event\n50,1,0,1\n60,0,12,0\n70,0,3,1\n";
        let got = ingest_reader(csv.as_bytes(), &cfg("age = continuous")).unwrap();
        assert_eq!(got.cohort.len(), 2);
        assert_eq!(got.report.rejected_nonpositive_time, 1);
        assert_eq!(got.cohort.subjects[0].id, "row2");
    }

    #[test]
    fn schema_mismatch_is_an_error() {
        let csv = "age,treatment,time_months\n50,1,3\n";
        let err = ingest_reader(csv.as_bytes(), &cfg("age = continuous")).unwrap_err();
        assert!(matches!(err, CohortError::MissingColumn(c) if c == "event"));
        let csv = "age,treatment,time_months,event\n50,1,3,1\n";
        let err = ingest_reader(csv.as_bytes(), &cfg("bmi = continuous")).unwrap_err();
        assert!(matches!(err, CohortError::MissingColumn(c) if c == "bmi"));
    }

    #[test]
    fn malformed_number_is_a_parse_error() {
        let csv = "age,treatment,time_months,event\nfifty,1,3,1\n";
        let err = ingest_reader(csv.as_bytes(), &cfg("age = continuous")).unwrap_err();
        assert!(matches!(err, CohortError::ParseError { line: 2, .. }));
        let csv = "age,treatment,time_months,event\n50,2,3,1\n";
        assert!(ingest_reader(csv.as_bytes(), &cfg("age = continuous")).is_err());
    }

    #[test]
    fn categorical_columns_are_one_hot_encoded() {
        let csv = "hpv,treatment,time_months,event\npositive,1,3,1\nunknown,0,4,0\nnegative,1,5,1\n";
        let got = ingest_reader(csv.as_bytes(), &cfg("hpv = categorical")).unwrap().cohort;
        assert_eq!(got.schema.names, ["hpv=negative", "hpv=positive", "hpv=unknown"]);
        for s in &got.subjects {
            assert_eq!(s.covariates.iter().sum::<f64>(), 1.0);
        }
        let dropped = ingest_reader(csv.as_bytes(), &cfg("hpv = categorical(drop=negative)")).unwrap().cohort;
        assert_eq!(dropped.schema.names, ["hpv=positive", "hpv=unknown"]);
    }

    #[test]
    fn schema_config_rejects_reserved_and_unknown() {
        assert!(SchemaConfig::parse("event = binary").is_err());
        assert!(SchemaConfig::parse("x = ordinal").is_err());
        assert!(SchemaConfig::parse("x = binary\nx = binary").is_err());
        let c = cfg("# comment\nage = continuous # trailing\nsite = categorical(drop=larynx)\n");
        assert_eq!(SchemaConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn standardize_123() {
        let c = toy(3, 3);
        let s = standardize(&c).unwrap().cohort;
        let col = s.column(0);
        assert!(stats::mean(&col).abs() < 1e-12);
        assert!((stats::sd(&col) - 1.0).abs() < 1e-12);
        assert!(matches!(standardize(&s), Err(CohortError::AlreadyStandardized)));
    }

    #[test]
    fn constant_column_is_flagged_not_transformed() {
        let mut c = toy(3, 3);
        for s in &mut c.subjects {
            s.covariates[0] = 5.0;
        }
        let s = standardize(&c).unwrap();
        assert_eq!(s.flagged, ["x"]);
        assert_eq!(s.cohort.column(0), vec![5.0; 3]);
    }

    #[test]
    fn train_statistics_carry_to_test() {
        let c = toy(10, 5);
        let train = c.select(&[0, 1, 2, 3, 4]);
        let test = c.select(&[5, 6, 7, 8, 9]);
        let fitted = standardize(&train).unwrap().cohort;
        let applied = standardize_with(&test, &fitted.schema).unwrap().cohort;
        assert!(stats::mean(&applied.column(0)) > 1.0);
    }

    #[test]
    fn binary_columns_untouched_by_standardize() {
        let csv = "sex,treatment,time_months,event\n1,1,3,1\n0,0,4,0\n1,1,5,1\n";
        let c = ingest_reader(csv.as_bytes(), &cfg("sex = binary")).unwrap().cohort;
        let s = standardize(&c).unwrap();
        assert!(s.flagged.is_empty());
        assert_eq!(s.cohort.column(0), vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn split_100_rows_80_events() {
        let c = toy(100, 80);
        let a = stratified_split(&c, 0.75, 7).unwrap();
        assert_eq!(a.train_ids.len(), 75);
        assert_eq!(a.test_ids.len(), 25);
        let tr = c.select(&a.train_index).event_rate();
        let te = c.select(&a.test_index).event_rate();
        assert!((tr - 0.8).abs() <= 0.02 && (tr - te).abs() <= 0.02);
        assert_eq!(a, stratified_split(&c, 0.75, 7).unwrap());
        assert_ne!(a.train_ids, stratified_split(&c, 0.75, 8).unwrap().train_ids);
    }

    #[test]
    fn split_needs_four_events() {
        assert!(matches!(stratified_split(&toy(50, 3), 0.75, 1), Err(CohortError::TooFewEvents(3))));
        assert!(stratified_split(&toy(50, 3), 1.0, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let csv = "id,age,site,treatment,time_months,event\n\
                   a,50.25,oro,1,10.5,1\nb,61,lar,0,12,0\nc,0.1,oro,0,3.3333333333333335,1\n";
        let c = ingest_reader(csv.as_bytes(), &cfg("age = continuous\nsite = categorical")).unwrap().cohort;
        let mut buf = Vec::new();
        write_csv(&c, &mut buf).unwrap();
        let back = ingest_reader(buf.as_slice(), &SchemaConfig::for_schema(&c.schema)).unwrap().cohort;
        assert_eq!(back.subjects, c.subjects);
        assert_eq!(back.schema.names, c.schema.names);
    }
}
