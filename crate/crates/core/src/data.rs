//! Nested-trial cohort data.
//!
//! A cohort row carries the participation indicator `S`, the second-stage
//! measurement indicator `D`, treatment `A` and outcome `Y` (trial rows only),
//! the always-observed stage-one covariates and the stage-two covariates that
//! are only measured when `D = 1`. The observed data therefore have a monotone
//! missingness pattern, which [`CohortDataset`] enforces on construction.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}, column `{column}`: {message}")]
    TypeError {
        row: usize,
        column: String,
        message: String,
    },
    #[error("row {row}: pattern violation, {rule}")]
    PatternViolation { row: usize, rule: PatternRule },
    #[error("invalid column spec: {0}")]
    InvalidColumnSpec(String),
    #[error("column `{column}` has {found} values, expected {expected}")]
    LengthMismatch {
        column: String,
        expected: usize,
        found: usize,
    },
    #[error("invalid sub-sampling design: {0}")]
    InvalidDesign(String),
    #[error("infeasible sub-sampling design: level {level} would need sampling probability {probability:.6}")]
    InfeasibleDesign { level: f64, probability: f64 },
    #[error("masking requires census input, but row {row} has d = 0")]
    NotCensus { row: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The monotone-missingness rules a cohort row must satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternRule {
    /// `S = 1` requires `D = 1`.
    TrialUnmeasured,
    /// `D = 0` requires every stage-two covariate to be missing.
    UnmeasuredHasStageTwo,
    /// `D = 1` requires every stage-two covariate to be present.
    MeasuredMissingStageTwo,
    /// `S = 0` requires `A` and `Y` to be missing.
    NonTrialHasTreatmentOrOutcome,
    /// `S = 1` requires `A` and `Y` to be present.
    TrialMissingTreatmentOrOutcome,
    /// Stage-one covariates are never missing.
    MissingStageOne,
}

impl fmt::Display for PatternRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            PatternRule::TrialUnmeasured => "s = 1 requires d = 1",
            PatternRule::UnmeasuredHasStageTwo => "d = 0 requires all x2 entries missing",
            PatternRule::MeasuredMissingStageTwo => "d = 1 requires all x2 entries present",
            PatternRule::NonTrialHasTreatmentOrOutcome => "s = 0 requires a and y missing",
            PatternRule::TrialMissingTreatmentOrOutcome => "s = 1 requires a and y present",
            PatternRule::MissingStageOne => "x1 entries are never missing",
        };
        f.write_str(msg)
    }
}

/// Mapping from CSV column names to roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub s: String,
    pub d: String,
    pub a: String,
    pub y: String,
    pub x1: Vec<String>,
    #[serde(default)]
    pub x2: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl ColumnSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.x1.is_empty() {
            return Err(DataError::InvalidColumnSpec(
                "x1 must name at least one column".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        let all = [&self.s, &self.d, &self.a, &self.y]
            .into_iter()
            .chain(&self.x1)
            .chain(&self.x2)
            .chain(self.id.as_ref());
        for name in all {
            if name.is_empty() {
                return Err(DataError::InvalidColumnSpec("empty column name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(DataError::InvalidColumnSpec(format!(
                    "column `{name}` mapped to more than one role"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let spec: ColumnSpec = serde_json::from_str(text)
            .map_err(|e| DataError::InvalidColumnSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// A named covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate<T> {
    pub name: String,
    pub values: Vec<T>,
}

impl<T> Covariate<T> {
    pub fn new(name: impl Into<String>, values: Vec<T>) -> Self {
        Covariate {
            name: name.into(),
            values,
        }
    }
}

/// Unvalidated column storage; convert with [`CohortDataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct CohortColumns {
    pub spec: ColumnSpec,
    pub ids: Option<Vec<String>>,
    pub s: Vec<bool>,
    pub d: Vec<bool>,
    pub a: Vec<Option<i64>>,
    pub y: Vec<Option<f64>>,
    pub x1: Vec<Covariate<f64>>,
    pub x2: Vec<Covariate<Option<f64>>>,
}

/// Validated, immutable nested-trial dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    cols: CohortColumns,
}

/// Borrowed view of one covariate usable in a design matrix.
#[derive(Debug, Clone, Copy)]
pub enum CovariateColumn<'a> {
    Participation(&'a [bool]),
    StageOne(&'a [f64]),
    StageTwo(&'a [Option<f64>]),
}

impl CovariateColumn<'_> {
    pub fn get(&self, row: usize) -> Option<f64> {
        match self {
            CovariateColumn::Participation(v) => Some(if v[row] { 1.0 } else { 0.0 }),
            CovariateColumn::StageOne(v) => Some(v[row]),
            CovariateColumn::StageTwo(v) => v[row],
        }
    }

    /// True when the column is observed on every row (stage one or `S`).
    pub fn always_observed(&self) -> bool {
        !matches!(self, CovariateColumn::StageTwo(_))
    }
}

impl CohortDataset {
    pub fn new(cols: CohortColumns) -> Result<Self, DataError> {
        cols.spec.validate()?;
        let n = cols.s.len();
        let check = |column: &str, found: usize| {
            if found != n {
                Err(DataError::LengthMismatch {
                    column: column.to_string(),
                    expected: n,
                    found,
                })
            } else {
                Ok(())
            }
        };
        check(&cols.spec.d, cols.d.len())?;
        check(&cols.spec.a, cols.a.len())?;
        check(&cols.spec.y, cols.y.len())?;
        if let Some(ids) = &cols.ids {
            check(cols.spec.id.as_deref().unwrap_or("id"), ids.len())?;
        }
        if cols.x1.len() != cols.spec.x1.len() || cols.x2.len() != cols.spec.x2.len() {
            return Err(DataError::InvalidColumnSpec(
                "covariate columns do not match the column spec".into(),
            ));
        }
        for (c, name) in cols.x1.iter().zip(&cols.spec.x1) {
            if &c.name != name {
                return Err(DataError::InvalidColumnSpec(format!(
                    "x1 column `{}` does not match spec name `{name}`",
                    c.name
                )));
            }
            check(&c.name, c.values.len())?;
        }
        for (c, name) in cols.x2.iter().zip(&cols.spec.x2) {
            if &c.name != name {
                return Err(DataError::InvalidColumnSpec(format!(
                    "x2 column `{}` does not match spec name `{name}`",
                    c.name
                )));
            }
            check(&c.name, c.values.len())?;
        }

        for row in 0..n {
            let violation = |rule| Err(DataError::PatternViolation { row, rule });
            if cols.x1.iter().any(|c| !c.values[row].is_finite()) {
                return violation(PatternRule::MissingStageOne);
            }
            let (s, d) = (cols.s[row], cols.d[row]);
            if s && !d {
                return violation(PatternRule::TrialUnmeasured);
            }
            let present = cols.x2.iter().filter(|c| c.values[row].is_some()).count();
            if !d && present > 0 {
                return violation(PatternRule::UnmeasuredHasStageTwo);
            }
            if d && present < cols.x2.len() {
                return violation(PatternRule::MeasuredMissingStageTwo);
            }
            let has_a = cols.a[row].is_some();
            let has_y = cols.y[row].is_some();
            if s && !(has_a && has_y) {
                return violation(PatternRule::TrialMissingTreatmentOrOutcome);
            }
            if !s && (has_a || has_y) {
                return violation(PatternRule::NonTrialHasTreatmentOrOutcome);
            }
        }
        Ok(CohortDataset { cols })
    }

    pub fn into_columns(self) -> CohortColumns {
        self.cols
    }

    pub fn columns(&self) -> &CohortColumns {
        &self.cols
    }

    pub fn spec(&self) -> &ColumnSpec {
        &self.cols.spec
    }

    pub fn n_units(&self) -> usize {
        self.cols.s.len()
    }

    pub fn s(&self) -> &[bool] {
        &self.cols.s
    }

    pub fn d(&self) -> &[bool] {
        &self.cols.d
    }

    pub fn a(&self) -> &[Option<i64>] {
        &self.cols.a
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.cols.y
    }

    pub fn x1(&self) -> &[Covariate<f64>] {
        &self.cols.x1
    }

    pub fn x2(&self) -> &[Covariate<Option<f64>>] {
        &self.cols.x2
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.cols.ids.as_deref()
    }

    /// True when every unit has full covariate measurement.
    pub fn is_census(&self) -> bool {
        self.cols.d.iter().all(|&d| d)
    }

    /// Treatment labels observed among trial participants, sorted.
    pub fn arms(&self) -> Vec<i64> {
        self.cols
            .a
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Looks up a covariate (or the participation indicator) by column name.
    pub fn covariate(&self, name: &str) -> Option<CovariateColumn<'_>> {
        if name == self.cols.spec.s {
            return Some(CovariateColumn::Participation(&self.cols.s));
        }
        if let Some(c) = self.cols.x1.iter().find(|c| c.name == name) {
            return Some(CovariateColumn::StageOne(&c.values));
        }
        self.cols
            .x2
            .iter()
            .find(|c| c.name == name)
            .map(|c| CovariateColumn::StageTwo(&c.values))
    }

    /// Copy of this dataset restricted to (and reordered by) `rows`.
    pub fn select_rows(&self, rows: &[usize]) -> CohortDataset {
        let c = &self.cols;
        let pick = |v: &Vec<_>| rows.iter().map(|&r| v[r]).collect::<Vec<_>>();
        let cols = CohortColumns {
            spec: c.spec.clone(),
            ids: c
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&r| ids[r].clone()).collect()),
            s: pick(&c.s),
            d: pick(&c.d),
            a: rows.iter().map(|&r| c.a[r]).collect(),
            y: rows.iter().map(|&r| c.y[r]).collect(),
            x1: c
                .x1
                .iter()
                .map(|x| Covariate::new(x.name.clone(), rows.iter().map(|&r| x.values[r]).collect()))
                .collect(),
            x2: c
                .x2
                .iter()
                .map(|x| Covariate::new(x.name.clone(), rows.iter().map(|&r| x.values[r]).collect()))
                .collect(),
        };
        // Row selection preserves every per-row invariant.
        CohortDataset { cols }
    }

    pub fn load_csv(path: impl AsRef<Path>, spec: &ColumnSpec) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, spec)
    }

    /// Reads a headed CSV; missing values are empty cells or the literal `NA`.
    pub fn read_csv<R: Read>(reader: R, spec: &ColumnSpec) -> Result<Self, DataError> {
        spec.validate()?;
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let index_of = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let s_idx = index_of(&spec.s)?;
        let d_idx = index_of(&spec.d)?;
        let a_idx = index_of(&spec.a)?;
        let y_idx = index_of(&spec.y)?;
        let x1_idx = spec.x1.iter().map(|n| index_of(n)).collect::<Result<Vec<_>, _>>()?;
        let x2_idx = spec.x2.iter().map(|n| index_of(n)).collect::<Result<Vec<_>, _>>()?;
        let id_idx = spec.id.as_deref().map(index_of).transpose()?;

        let mut cols = CohortColumns {
            spec: spec.clone(),
            ids: id_idx.map(|_| Vec::new()),
            s: Vec::new(),
            d: Vec::new(),
            a: Vec::new(),
            y: Vec::new(),
            x1: spec.x1.iter().map(|n| Covariate::new(n.clone(), Vec::new())).collect(),
            x2: spec.x2.iter().map(|n| Covariate::new(n.clone(), Vec::new())).collect(),
        };
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            let cell = |idx: usize| record.get(idx).unwrap_or("");
            cols.s.push(parse_indicator(cell(s_idx), row, &spec.s)?);
            cols.d.push(parse_indicator(cell(d_idx), row, &spec.d)?);
            cols.a.push(parse_label(cell(a_idx), row, &spec.a)?);
            cols.y.push(parse_real(cell(y_idx), row, &spec.y)?);
            for (c, &idx) in cols.x1.iter_mut().zip(&x1_idx) {
                // A missing stage-one value is a pattern violation, reported on validation.
                c.values.push(parse_real(cell(idx), row, &c.name)?.unwrap_or(f64::NAN));
            }
            for (c, &idx) in cols.x2.iter_mut().zip(&x2_idx) {
                c.values.push(parse_real(cell(idx), row, &c.name)?);
            }
            if let (Some(ids), Some(idx)) = (cols.ids.as_mut(), id_idx) {
                ids.push(cell(idx).to_string());
            }
        }
        CohortDataset::new(cols)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(file)
    }

    /// Writes the canonical layout: id, s, d, a, y, x1..., x2..., with
    /// missing values as `NA` and reals in shortest round-trip form.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let c = &self.cols;
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header: Vec<&str> = Vec::new();
        if c.ids.is_some() {
            header.push(c.spec.id.as_deref().unwrap_or("id"));
        }
        header.extend([c.spec.s.as_str(), &c.spec.d, &c.spec.a, &c.spec.y]);
        header.extend(c.x1.iter().map(|x| x.name.as_str()));
        header.extend(c.x2.iter().map(|x| x.name.as_str()));
        wtr.write_record(&header)?;

        let opt = |v: Option<String>| v.unwrap_or_else(|| "NA".to_string());
        for row in 0..self.n_units() {
            let mut rec: Vec<String> = Vec::with_capacity(header.len());
            if let Some(ids) = &c.ids {
                rec.push(ids[row].clone());
            }
            rec.push(u8::from(c.s[row]).to_string());
            rec.push(u8::from(c.d[row]).to_string());
            rec.push(opt(c.a[row].map(|v| v.to_string())));
            rec.push(opt(c.y[row].map(|v| v.to_string())));
            rec.extend(c.x1.iter().map(|x| x.values[row].to_string()));
            rec.extend(c.x2.iter().map(|x| opt(x.values[row].map(|v| v.to_string()))));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn is_missing(cell: &str) -> bool {
    cell.is_empty() || cell == "NA"
}

fn type_error(row: usize, column: &str, message: impl Into<String>) -> DataError {
    DataError::TypeError {
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_real(cell: &str, row: usize, column: &str) -> Result<Option<f64>, DataError> {
    if is_missing(cell) {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(type_error(row, column, format!("`{cell}` is not a finite number"))),
    }
}

fn parse_indicator(cell: &str, row: usize, column: &str) -> Result<bool, DataError> {
    match parse_real(cell, row, column)? {
        Some(0.0) => Ok(false),
        Some(1.0) => Ok(true),
        _ => Err(type_error(row, column, format!("indicator must be 0 or 1, found `{cell}`"))),
    }
}

fn parse_label(cell: &str, row: usize, column: &str) -> Result<Option<i64>, DataError> {
    if is_missing(cell) {
        return Ok(None);
    }
    if let Ok(v) = cell.parse::<i64>() {
        return Ok(Some(v));
    }
    match parse_real(cell, row, column)? {
        Some(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(Some(v as i64)),
        _ => Err(type_error(row, column, format!("treatment label `{cell}` is not an integer"))),
    }
}

/// Per-column descriptive summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSummary {
    pub name: String,
    pub observed: usize,
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmCount {
    pub arm: i64,
    pub count: usize,
    /// Set when no trial participant received this arm.
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_units: usize,
    pub n_trial: usize,
    pub n_measured: usize,
    pub arms: Vec<ArmCount>,
    pub columns: Vec<ColumnSummary>,
}

/// Counts, observed-entry means and per-arm counts. Arms listed in
/// `expected_arms` are always reported, flagged when empty.
pub fn summarize(data: &CohortDataset, expected_arms: &[i64]) -> DatasetSummary {
    let c = data.columns();
    let mut arm_counts: BTreeMap<i64, usize> = expected_arms.iter().map(|&a| (a, 0)).collect();
    for a in c.a.iter().flatten() {
        *arm_counts.entry(*a).or_default() += 1;
    }
    let summarize_opt = |name: &str, values: Vec<Option<f64>>| {
        let observed: Vec<f64> = values.into_iter().flatten().collect();
        ColumnSummary {
            name: name.to_string(),
            observed: observed.len(),
            mean: (!observed.is_empty()).then(|| crate::stats::mean(&observed)),
        }
    };
    let flag = |v: &[bool]| v.iter().map(|&b| Some(f64::from(u8::from(b)))).collect();
    let mut columns = vec![
        summarize_opt(&c.spec.s, flag(&c.s)),
        summarize_opt(&c.spec.d, flag(&c.d)),
        summarize_opt(&c.spec.a, c.a.iter().map(|a| a.map(|v| v as f64)).collect()),
        summarize_opt(&c.spec.y, c.y.clone()),
    ];
    for x in &c.x1 {
        columns.push(summarize_opt(&x.name, x.values.iter().map(|&v| Some(v)).collect()));
    }
    for x in &c.x2 {
        columns.push(summarize_opt(&x.name, x.values.clone()));
    }
    DatasetSummary {
        n_units: data.n_units(),
        n_trial: c.s.iter().filter(|&&s| s).count(),
        n_measured: c.d.iter().filter(|&&d| d).count(),
        arms: arm_counts
            .into_iter()
            .map(|(arm, count)| ArmCount {
                arm,
                count,
                empty: count == 0,
            })
            .collect(),
        columns,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingKind {
    Census,
    SimpleRandom,
    CovariateDependent,
}

/// Relative sampling probability for one level of a discrete stage-one covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRatio {
    pub level: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDependence {
    pub column: String,
    pub levels: Vec<LevelRatio>,
}

/// Second-stage Bernoulli sampling design for non-randomized individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsamplingDesign {
    pub kind: SamplingKind,
    pub marginal_q: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependence: Option<LevelDependence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelProbability {
    pub level: f64,
    pub probability: f64,
}

/// Sampling probabilities of a design solved against a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum ResolvedSampling {
    Constant { probability: f64 },
    ByLevel {
        column: String,
        levels: Vec<LevelProbability>,
    },
}

impl ResolvedSampling {
    /// `Pr[D = 1 | x1, S = 0]` for `row` of `data`.
    pub fn probability(&self, data: &CohortDataset, row: usize) -> Result<f64, DataError> {
        match self {
            ResolvedSampling::Constant { probability } => Ok(*probability),
            ResolvedSampling::ByLevel { column, levels } => {
                let x = data
                    .x1()
                    .iter()
                    .find(|c| &c.name == column)
                    .ok_or_else(|| DataError::MissingColumn(column.clone()))?
                    .values[row];
                levels
                    .iter()
                    .find(|l| l.level == x)
                    .map(|l| l.probability)
                    .ok_or_else(|| {
                        DataError::InvalidDesign(format!("level {x} of `{column}` has no sampling ratio"))
                    })
            }
        }
    }
}

impl SubsamplingDesign {
    pub fn census() -> Self {
        SubsamplingDesign {
            kind: SamplingKind::Census,
            marginal_q: 1.0,
            dependence: None,
        }
    }

    pub fn simple_random(q: f64) -> Self {
        SubsamplingDesign {
            kind: SamplingKind::SimpleRandom,
            marginal_q: q,
            dependence: None,
        }
    }

    pub fn covariate_dependent(q: f64, column: impl Into<String>, levels: &[(f64, f64)]) -> Self {
        SubsamplingDesign {
            kind: SamplingKind::CovariateDependent,
            marginal_q: q,
            dependence: Some(LevelDependence {
                column: column.into(),
                levels: levels
                    .iter()
                    .map(|&(level, ratio)| LevelRatio { level, ratio })
                    .collect(),
            }),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let q = self.marginal_q;
        if !(q > 0.0 && q <= 1.0) {
            return Err(DataError::InvalidDesign(format!("marginal_q {q} outside (0, 1]")));
        }
        match (self.kind, &self.dependence) {
            (SamplingKind::Census, _) if q != 1.0 => {
                Err(DataError::InvalidDesign("census requires marginal_q = 1".into()))
            }
            (SamplingKind::Census | SamplingKind::SimpleRandom, Some(_)) => Err(
                DataError::InvalidDesign("only covariate_dependent designs take a dependence map".into()),
            ),
            (SamplingKind::CovariateDependent, None) => Err(DataError::InvalidDesign(
                "covariate_dependent design needs a dependence map".into(),
            )),
            (SamplingKind::CovariateDependent, Some(dep)) => {
                if dep.levels.is_empty() {
                    return Err(DataError::InvalidDesign("dependence map is empty".into()));
                }
                let mut seen = Vec::new();
                for l in &dep.levels {
                    if !(l.ratio > 0.0 && l.ratio.is_finite()) {
                        return Err(DataError::InvalidDesign(format!(
                            "ratio for level {} must be positive",
                            l.level
                        )));
                    }
                    if seen.contains(&l.level) {
                        return Err(DataError::InvalidDesign(format!("duplicate level {}", l.level)));
                    }
                    seen.push(l.level);
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Solves per-level probabilities `p_l = k * ratio_l` so that the
    /// marginal over the empirical level shares among `S = 0` rows equals
    /// `marginal_q`. Fails when some `p_l` would exceed one.
    pub fn resolve(&self, data: &CohortDataset) -> Result<ResolvedSampling, DataError> {
        self.validate()?;
        let dep = match (&self.kind, &self.dependence) {
            (SamplingKind::CovariateDependent, Some(dep)) => dep,
            _ => {
                return Ok(ResolvedSampling::Constant {
                    probability: self.marginal_q,
                })
            }
        };
        let column = data
            .x1()
            .iter()
            .find(|c| c.name == dep.column)
            .ok_or_else(|| DataError::MissingColumn(dep.column.clone()))?;
        let mut counts = vec![0usize; dep.levels.len()];
        let mut n0 = 0usize;
        for (row, &s) in data.s().iter().enumerate() {
            if s {
                continue;
            }
            n0 += 1;
            let x = column.values[row];
            let pos = dep.levels.iter().position(|l| l.level == x).ok_or_else(|| {
                DataError::InvalidDesign(format!("level {x} of `{}` has no sampling ratio", dep.column))
            })?;
            counts[pos] += 1;
        }
        if n0 == 0 {
            return Err(DataError::InvalidDesign("no non-randomized rows to sample".into()));
        }
        let denom: f64 = dep
            .levels
            .iter()
            .zip(&counts)
            .map(|(l, &k)| l.ratio * k as f64 / n0 as f64)
            .sum();
        let scale = self.marginal_q / denom;
        let mut levels = Vec::with_capacity(dep.levels.len());
        for l in &dep.levels {
            let probability = scale * l.ratio;
            if probability > 1.0 + 1e-12 {
                return Err(DataError::InfeasibleDesign {
                    level: l.level,
                    probability,
                });
            }
            levels.push(LevelProbability {
                level: l.level,
                probability: probability.min(1.0),
            });
        }
        Ok(ResolvedSampling::ByLevel {
            column: dep.column.clone(),
            levels,
        })
    }
}

/// Emulates second-stage sampling on a census dataset: each `S = 0` row is
/// kept with its design probability (independent Bernoulli draws in row
/// order); rows not drawn get `D = 0` and their stage-two covariates removed.
pub fn mask_by_subsampling(
    full: &CohortDataset,
    design: &SubsamplingDesign,
    seed: u64,
) -> Result<CohortDataset, DataError> {
    if let Some(row) = full.d().iter().position(|&d| !d) {
        return Err(DataError::NotCensus { row });
    }
    let resolved = design.resolve(full)?;
    if design.kind == SamplingKind::Census {
        return Ok(full.clone());
    }
    let mut rng = rng::seeded(seed);
    let mut cols = full.columns().clone();
    for row in 0..full.n_units() {
        if cols.s[row] {
            continue;
        }
        let p = resolved.probability(full, row)?;
        let u: f64 = rng.random();
        if u >= p {
            cols.d[row] = false;
            for x in cols.x2.iter_mut() {
                x.values[row] = None;
            }
        }
    }
    CohortDataset::new(cols)
}
