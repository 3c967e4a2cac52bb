//! Long-format person-time data.
//!
//! A [`LongDataset`] holds one row per (subject, interval) in columnar form.
//! Rows of a subject are contiguous and, once validated, indexed by interval so
//! that row `k` of subject `i` lives at `subject_range(i).start + k`. Nothing
//! past a subject's last observed interval is stored.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::ops::Range;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Censoring indicator with its cause.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CensorCause {
    None,
    Disenroll,
    Death,
    Admin,
}

impl CensorCause {
    /// Censoring causes in the order they are evaluated within an interval.
    pub const CAUSES: [CensorCause; 3] = [
        CensorCause::Disenroll,
        CensorCause::Death,
        CensorCause::Admin,
    ];

    pub fn code(self) -> u8 {
        match self {
            CensorCause::None => 0,
            CensorCause::Disenroll => 1,
            CensorCause::Death => 2,
            CensorCause::Admin => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CensorCause::None),
            1 => Some(CensorCause::Disenroll),
            2 => Some(CensorCause::Death),
            3 => Some(CensorCause::Admin),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0" | "none" => Some(CensorCause::None),
            "1" | "disenroll" => Some(CensorCause::Disenroll),
            "2" | "death" => Some(CensorCause::Death),
            "3" | "admin" => Some(CensorCause::Admin),
            _ => None,
        }
    }

    pub fn is_censored(self) -> bool {
        self != CensorCause::None
    }

    pub fn name(self) -> &'static str {
        match self {
            CensorCause::None => "none",
            CensorCause::Disenroll => "disenroll",
            CensorCause::Death => "death",
            CensorCause::Admin => "admin",
        }
    }
}

/// A single person-time observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonTimeRow {
    pub subject_id: String,
    pub t: u32,
    pub covariates: Vec<f64>,
    pub a_treat: bool,
    pub a_cens: CensorCause,
    /// Absent exactly when the row is censored.
    pub y: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    DoesNotStartAtZero,
    NonConsecutiveT,
    RowAfterCensoring,
    RowAfterFailure,
    OutcomeOnCensoredRow,
    MissingOutcome,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::DoesNotStartAtZero => "first interval is not t = 0",
            ViolationKind::NonConsecutiveT => "non-consecutive t",
            ViolationKind::RowAfterCensoring => "row after censoring",
            ViolationKind::RowAfterFailure => "row after failure",
            ViolationKind::OutcomeOnCensoredRow => "outcome present on censored row",
            ViolationKind::MissingOutcome => "outcome missing on uncensored row",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub subject_id: String,
    pub t: u32,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "subject {} at t = {}: {}",
            self.subject_id, self.t, self.kind
        )
    }
}

/// Columnar long-format dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LongDataset {
    covariate_names: Vec<String>,
    subject_ids: Vec<String>,
    subject_start: Vec<usize>,
    row_subject: Vec<u32>,
    t: Vec<u32>,
    a_treat: Vec<bool>,
    a_cens: Vec<CensorCause>,
    y: Vec<Option<bool>>,
    covariates: Array2<f64>,
}

impl LongDataset {
    /// Groups rows by subject (first-appearance order), keeping the input order
    /// within each subject. Does not validate; see [`LongDataset::validate`].
    pub fn from_rows(covariate_names: Vec<String>, rows: Vec<PersonTimeRow>) -> Result<Self> {
        let p = covariate_names.len();
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<PersonTimeRow>> = HashMap::new();
        for row in rows {
            if row.covariates.len() != p {
                return Err(Error::Dimension(format!(
                    "subject {} at t = {} has {} covariates, expected {}",
                    row.subject_id,
                    row.t,
                    row.covariates.len(),
                    p
                )));
            }
            if !groups.contains_key(&row.subject_id) {
                order.push(row.subject_id.clone());
            }
            groups.entry(row.subject_id.clone()).or_default().push(row);
        }
        if order.is_empty() {
            return Err(Error::Config("dataset has no subjects".into()));
        }
        let n_rows: usize = groups.values().map(Vec::len).sum();
        let mut ds = LongDataset {
            covariate_names,
            subject_ids: Vec::with_capacity(order.len()),
            subject_start: Vec::with_capacity(order.len() + 1),
            row_subject: Vec::with_capacity(n_rows),
            t: Vec::with_capacity(n_rows),
            a_treat: Vec::with_capacity(n_rows),
            a_cens: Vec::with_capacity(n_rows),
            y: Vec::with_capacity(n_rows),
            covariates: Array2::zeros((0, 0)),
        };
        let mut cov = Vec::with_capacity(n_rows * p);
        for id in order {
            let rows = groups.remove(&id).unwrap_or_default();
            let s = ds.subject_ids.len() as u32;
            ds.subject_start.push(ds.t.len());
            ds.subject_ids.push(id);
            for r in rows {
                ds.row_subject.push(s);
                ds.t.push(r.t);
                ds.a_treat.push(r.a_treat);
                ds.a_cens.push(r.a_cens);
                ds.y.push(r.y);
                cov.extend_from_slice(&r.covariates);
            }
        }
        ds.subject_start.push(ds.t.len());
        ds.covariates = Array2::from_shape_vec((n_rows, p), cov)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        Ok(ds)
    }

    /// Builds and validates in one step.
    pub fn from_rows_validated(
        covariate_names: Vec<String>,
        rows: Vec<PersonTimeRow>,
    ) -> Result<Self> {
        let ds = Self::from_rows(covariate_names, rows)?;
        ds.ensure_valid()?;
        Ok(ds)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Invalid(v))
        }
    }

    /// Every invariant violation, tagged with subject and interval.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for s in 0..self.n_subjects() {
            let range = self.subject_range(s);
            let id = &self.subject_ids[s];
            let mut push = |t: u32, kind| {
                out.push(Violation {
                    subject_id: id.clone(),
                    t,
                    kind,
                });
            };
            let first = range.start;
            if self.t[first] != 0 {
                push(self.t[first], ViolationKind::DoesNotStartAtZero);
            }
            for r in range.clone() {
                if r > first {
                    if self.t[r] != self.t[r - 1] + 1 {
                        push(self.t[r], ViolationKind::NonConsecutiveT);
                    }
                    if self.a_cens[r - 1].is_censored() {
                        push(self.t[r], ViolationKind::RowAfterCensoring);
                    } else if self.y[r - 1] == Some(true) {
                        push(self.t[r], ViolationKind::RowAfterFailure);
                    }
                }
                match (self.a_cens[r].is_censored(), self.y[r]) {
                    (true, Some(_)) => push(self.t[r], ViolationKind::OutcomeOnCensoredRow),
                    (false, None) => push(self.t[r], ViolationKind::MissingOutcome),
                    _ => {}
                }
            }
        }
        out
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_rows(&self) -> usize {
        self.t.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// K = max over subjects of the last observed interval.
    pub fn max_t(&self) -> u32 {
        self.t.iter().copied().max().unwrap_or(0)
    }

    pub fn subject_id(&self, s: usize) -> &str {
        &self.subject_ids[s]
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn subject_range(&self, s: usize) -> Range<usize> {
        self.subject_start[s]..self.subject_start[s + 1]
    }

    /// Last observed interval of subject `s` (T̃).
    pub fn last_t(&self, s: usize) -> u32 {
        self.t[self.subject_start[s + 1] - 1]
    }

    /// Row index of subject `s` at interval `k`, if observed.
    pub fn row_at(&self, s: usize, k: u32) -> Option<usize> {
        let r = self.subject_start[s] + k as usize;
        (r < self.subject_start[s + 1]).then_some(r)
    }

    pub fn row_subject(&self, r: usize) -> usize {
        self.row_subject[r] as usize
    }

    pub fn t(&self, r: usize) -> u32 {
        self.t[r]
    }

    pub fn a_treat(&self, r: usize) -> bool {
        self.a_treat[r]
    }

    pub fn a_cens(&self, r: usize) -> CensorCause {
        self.a_cens[r]
    }

    pub fn y(&self, r: usize) -> Option<bool> {
        self.y[r]
    }

    /// Treatment at the previous interval; `false` at t = 0.
    pub fn a_treat_prev(&self, r: usize) -> bool {
        self.t[r] > 0 && self.a_treat[r - 1]
    }

    pub fn covariate(&self, r: usize, j: usize) -> f64 {
        self.covariates[[r, j]]
    }

    pub fn covariate_row(&self, r: usize) -> ArrayView1<'_, f64> {
        self.covariates.row(r)
    }

    pub fn covariates(&self) -> &Array2<f64> {
        &self.covariates
    }

    pub fn row(&self, r: usize) -> PersonTimeRow {
        PersonTimeRow {
            subject_id: self.subject_ids[self.row_subject(r)].clone(),
            t: self.t[r],
            covariates: self.covariates.row(r).to_vec(),
            a_treat: self.a_treat[r],
            a_cens: self.a_cens[r],
            y: self.y[r],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = PersonTimeRow> + '_ {
        (0..self.n_rows()).map(|r| self.row(r))
    }

    /// Number of subjects with T̃ ≥ k.
    pub fn n_at_or_beyond(&self, k: u32) -> usize {
        (0..self.n_subjects())
            .filter(|&s| self.last_t(s) >= k)
            .count()
    }

    /// New dataset made of the listed subjects, in order. Repeated subjects
    /// receive distinct identifiers (`id#copy`).
    pub fn resample_subjects(&self, subjects: &[usize]) -> Result<LongDataset> {
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let mut rows = Vec::new();
        for &s in subjects {
            let copy = seen.entry(s).or_insert(0);
            let id = if *copy == 0 {
                self.subject_ids[s].clone()
            } else {
                format!("{}#{}", self.subject_ids[s], copy)
            };
            *copy += 1;
            for r in self.subject_range(s) {
                let mut row = self.row(r);
                row.subject_id = id.clone();
                rows.push(row);
            }
        }
        LongDataset::from_rows(self.covariate_names.clone(), rows)
    }

    /// Same rows with a different covariate set (used to derive analyst views).
    pub fn with_covariates(
        &self,
        names: Vec<String>,
        covariates: Array2<f64>,
    ) -> Result<LongDataset> {
        if covariates.nrows() != self.n_rows() || covariates.ncols() != names.len() {
            return Err(Error::Dimension(format!(
                "covariate matrix {}x{} does not match {} rows / {} names",
                covariates.nrows(),
                covariates.ncols(),
                self.n_rows(),
                names.len()
            )));
        }
        let mut ds = self.clone();
        ds.covariate_names = names;
        ds.covariates = covariates;
        Ok(ds)
    }
}

const REQUIRED: [&str; 5] = ["subject_id", "t", "a_treat", "a_cens", "y"];

fn parse_bool01(s: &str, line: usize, what: &str) -> Result<bool> {
    match s.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Parse {
            line,
            message: format!("{what} must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Reads the comma-separated long format and validates it.
pub fn read_long_csv<R: Read>(reader: R) -> Result<LongDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut pos = [usize::MAX; 5];
    for (i, req) in REQUIRED.iter().enumerate() {
        pos[i] = headers
            .iter()
            .position(|h| h.trim() == *req)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing required column `{req}`"),
            })?;
    }
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|i| !pos.contains(i)).collect();
    let names: Vec<String> = cov_cols
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = idx + 2;
        let subject_id = rec[pos[0]].trim().to_string();
        if subject_id.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty subject_id".into(),
            });
        }
        let t: u32 = rec[pos[1]].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad t `{}`", &rec[pos[1]]),
        })?;
        let a_treat = parse_bool01(&rec[pos[2]], line, "a_treat")?;
        let code: u8 = rec[pos[3]].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad a_cens `{}`", &rec[pos[3]]),
        })?;
        let a_cens = CensorCause::from_code(code).ok_or_else(|| Error::Parse {
            line,
            message: format!("a_cens code {code} not in 0..=3"),
        })?;
        let y_raw = rec[pos[4]].trim();
        let y = if y_raw.is_empty() {
            None
        } else {
            Some(parse_bool01(y_raw, line, "y")?)
        };
        let covariates = cov_cols
            .iter()
            .map(|&i| {
                rec[i].trim().parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad value `{}` for covariate `{}`", &rec[i], &headers[i]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(PersonTimeRow {
            subject_id,
            t,
            covariates,
            a_treat,
            a_cens,
            y,
        });
    }
    LongDataset::from_rows_validated(names, rows)
}

pub fn write_long_csv<W: Write>(ds: &LongDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = REQUIRED.iter().map(|s| s.to_string()).collect();
    header.extend(ds.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for r in 0..ds.n_rows() {
        let mut rec = vec![
            ds.subject_ids[ds.row_subject(r)].clone(),
            ds.t[r].to_string(),
            u8::from(ds.a_treat[r]).to_string(),
            ds.a_cens[r].code().to_string(),
            ds.y[r].map(|y| u8::from(y).to_string()).unwrap_or_default(),
        ];
        rec.extend(ds.covariates.row(r).iter().map(|v| format_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same value.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v}")
}

/// Lagged covariate entry of a summary map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaggedColumn {
    pub name: String,
    pub lag: u32,
}

/// Declarative selection of the columns forming f_k(L'(k)).
///
/// Columns are emitted in the order: baseline values L(0), current values L(k),
/// lagged values L(k - lag) (0 before the start of follow-up), and finally
/// A(k - 1) when `lag_treatment` is set (0 at k = 0). The output dimension does
/// not depend on k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryMap {
    #[serde(default)]
    pub baseline: Vec<String>,
    #[serde(default)]
    pub current: Vec<String>,
    #[serde(default)]
    pub lagged: Vec<LaggedColumn>,
    #[serde(default = "default_true")]
    pub lag_treatment: bool,
}

fn default_true() -> bool {
    true
}

impl SummaryMap {
    /// (L(0), L(k), A(k - 1)) over every covariate.
    pub fn default_for(ds: &LongDataset) -> Self {
        SummaryMap {
            baseline: ds.covariate_names.clone(),
            current: ds.covariate_names.clone(),
            lagged: Vec::new(),
            lag_treatment: true,
        }
    }

    pub fn resolve(&self, ds: &LongDataset) -> Result<ResolvedMap> {
        let idx = |names: &[String]| {
            names
                .iter()
                .map(|n| ds.covariate_index(n))
                .collect::<Result<Vec<_>>>()
        };
        Ok(ResolvedMap {
            baseline: idx(&self.baseline)?,
            current: idx(&self.current)?,
            lagged: self
                .lagged
                .iter()
                .map(|l| Ok((ds.covariate_index(&l.name)?, l.lag)))
                .collect::<Result<Vec<_>>>()?,
            lag_treatment: self.lag_treatment,
            names: self.column_names(),
        })
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.baseline.iter().map(|n| format!("{n}_0")).collect();
        names.extend(self.current.iter().cloned());
        names.extend(
            self.lagged
                .iter()
                .map(|l| format!("{}_lag{}", l.name, l.lag)),
        );
        if self.lag_treatment {
            names.push("a_treat_lag1".into());
        }
        names
    }

    pub fn dim(&self) -> usize {
        self.baseline.len()
            + self.current.len()
            + self.lagged.len()
            + usize::from(self.lag_treatment)
    }
}

/// A [`SummaryMap`] bound to a dataset's column indices.
#[derive(Debug, Clone)]
pub struct ResolvedMap {
    baseline: Vec<usize>,
    current: Vec<usize>,
    lagged: Vec<(usize, u32)>,
    lag_treatment: bool,
    names: Vec<String>,
}

impl ResolvedMap {
    pub fn dim(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Writes f_k for row `r` (k = t(r)) into `out`.
    pub fn fill(&self, ds: &LongDataset, r: usize, out: &mut [f64]) {
        let s = ds.row_subject(r);
        let first = ds.subject_start[s];
        let k = ds.t[r];
        let mut c = 0;
        for &j in &self.baseline {
            out[c] = ds.covariates[[first, j]];
            c += 1;
        }
        for &j in &self.current {
            out[c] = ds.covariates[[r, j]];
            c += 1;
        }
        for &(j, lag) in &self.lagged {
            out[c] = if k >= lag {
                ds.covariates[[r - lag as usize, j]]
            } else {
                0.0
            };
            c += 1;
        }
        if self.lag_treatment {
            out[c] = if ds.a_treat_prev(r) { 1.0 } else { 0.0 };
        }
    }

    /// f_k for each listed row, stacked.
    pub fn design(&self, ds: &LongDataset, rows: &[usize]) -> Array2<f64> {
        let d = self.dim();
        let mut x = Array2::zeros((rows.len(), d));
        for (i, &r) in rows.iter().enumerate() {
            let mut row = x.row_mut(i);
            self.fill(ds, r, row.as_slice_mut().expect("standard layout"));
        }
        x
    }
}

/// Reduced representation at one interval.
#[derive(Debug, Clone)]
pub struct SummaryDesign {
    pub subjects: Vec<usize>,
    pub rows: Vec<usize>,
    pub x: Array2<f64>,
    pub names: Vec<String>,
}

/// f_k(L'(k)) for every subject with T̃ ≥ k.
pub fn build_summary(ds: &LongDataset, map: &SummaryMap, k: u32) -> Result<SummaryDesign> {
    if k > ds.max_t() {
        return Err(Error::Dimension(format!(
            "k = {k} exceeds max_t = {}",
            ds.max_t()
        )));
    }
    let resolved = map.resolve(ds)?;
    let (subjects, rows): (Vec<usize>, Vec<usize>) = (0..ds.n_subjects())
        .filter_map(|s| ds.row_at(s, k).map(|r| (s, r)))
        .unzip();
    let x = resolved.design(ds, &rows);
    Ok(SummaryDesign {
        subjects,
        rows,
        x,
        names: resolved.names,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    fn row(id: &str, t: u32, x: f64, a: bool, c: CensorCause, y: Option<bool>) -> PersonTimeRow {
        PersonTimeRow {
            subject_id: id.into(),
            t,
            covariates: vec![x],
            a_treat: a,
            a_cens: c,
            y,
        }
    }

    /// The three-subject illustration: T̃ = 0, 1, 1 with subject 3 censored at 1.
    pub(crate) fn toy() -> LongDataset {
        use CensorCause::*;
        LongDataset::from_rows_validated(
            vec!["x".into()],
            vec![
                row("1", 0, 0.1, false, None, Some(true)),
                row("2", 0, 0.2, false, None, Some(false)),
                row("2", 1, 0.3, false, None, Some(true)),
                row("3", 0, 0.4, false, None, Some(false)),
                row("3", 1, 0.5, false, Disenroll, Option::None),
            ],
        )
        .unwrap()
    }

    #[test]
    fn well_formed_subject_is_valid() {
        let ds = LongDataset::from_rows(
            vec!["x".into()],
            vec![
                row("a", 0, 1.0, false, CensorCause::None, Some(false)),
                row("a", 1, 1.0, false, CensorCause::None, Some(false)),
                row("a", 2, 1.0, false, CensorCause::None, Some(true)),
            ],
        )
        .unwrap();
        assert!(ds.validate().is_empty());
    }

    #[test]
    fn gap_is_one_violation() {
        let ds = LongDataset::from_rows(
            vec!["x".into()],
            vec![
                row("a", 0, 1.0, false, CensorCause::None, Some(false)),
                row("a", 2, 1.0, false, CensorCause::None, Some(false)),
            ],
        )
        .unwrap();
        let v = ds.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::NonConsecutiveT);
        assert_eq!(v[0].t, 2);
    }

    #[test]
    fn row_after_failure_is_one_violation() {
        let ds = LongDataset::from_rows(
            vec!["x".into()],
            vec![
                row("a", 0, 1.0, false, CensorCause::None, Some(true)),
                row("a", 1, 1.0, false, CensorCause::None, Some(false)),
            ],
        )
        .unwrap();
        let v = ds.validate();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::RowAfterFailure);
    }

    #[test]
    fn censoring_must_be_last_and_outcome_free() {
        let ds = LongDataset::from_rows(
            vec!["x".into()],
            vec![
                row("a", 0, 1.0, false, CensorCause::Death, Some(false)),
                row("a", 1, 1.0, false, CensorCause::None, None),
            ],
        )
        .unwrap();
        let kinds: Vec<_> = ds.validate().into_iter().map(|v| v.kind).collect();
        assert_eq!(
            kinds,
            vec![
                ViolationKind::OutcomeOnCensoredRow,
                ViolationKind::RowAfterCensoring,
                ViolationKind::MissingOutcome
            ]
        );
    }

    #[test]
    fn covariate_length_mismatch_rejected() {
        let mut r = row("a", 0, 1.0, false, CensorCause::None, Some(false));
        r.covariates.push(2.0);
        assert!(matches!(
            LongDataset::from_rows(vec!["x".into()], vec![r]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn summary_at_zero_has_empty_history() {
        let ds = toy();
        let map = SummaryMap::default_for(&ds);
        let d = build_summary(&ds, &map, 0).unwrap();
        assert_eq!(d.names, vec!["x_0", "x", "a_treat_lag1"]);
        assert_eq!(d.x.nrows(), 3);
        for i in 0..3 {
            assert_eq!(d.x[[i, 0]], d.x[[i, 1]]);
            assert_eq!(d.x[[i, 2]], 0.0);
        }
    }

    #[test]
    fn summary_at_one_keeps_subjects_two_and_three() {
        let ds = toy();
        let d = build_summary(&ds, &SummaryMap::default_for(&ds), 1).unwrap();
        let ids: Vec<&str> = d.subjects.iter().map(|&s| ds.subject_id(s)).collect();
        assert_eq!(ids, vec!["2", "3"]);
        assert_eq!(d.x.row(0).to_vec(), vec![0.2, 0.3, 0.0]);
        assert_eq!(d.x.row(1).to_vec(), vec![0.4, 0.5, 0.0]);
    }

    #[test]
    fn summary_rejects_unknown_column_and_large_k() {
        let ds = toy();
        let map = SummaryMap {
            baseline: vec!["nope".into()],
            current: vec![],
            lagged: vec![],
            lag_treatment: false,
        };
        assert!(matches!(build_summary(&ds, &map, 0), Err(Error::UnknownColumn(c)) if c == "nope"));
        assert!(build_summary(&ds, &SummaryMap::default_for(&ds), 2).is_err());
    }

    #[test]
    fn lagged_columns_fill_zero_before_start() {
        let ds = toy();
        let map = SummaryMap {
            baseline: vec![],
            current: vec!["x".into()],
            lagged: vec![LaggedColumn {
                name: "x".into(),
                lag: 1,
            }],
            lag_treatment: false,
        };
        let d0 = build_summary(&ds, &map, 0).unwrap();
        assert_eq!(d0.x.row(1).to_vec(), vec![0.2, 0.0]);
        let d1 = build_summary(&ds, &map, 1).unwrap();
        assert_eq!(d1.x.row(0).to_vec(), vec![0.3, 0.2]);
    }

    #[test]
    fn csv_parse_rejects_missing_column_and_bad_code() {
        let no_y = "subject_id,t,a_treat,a_cens,x\n1,0,0,0,1.0\n";
        assert!(matches!(
            read_long_csv(no_y.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let bad = "subject_id,t,a_treat,a_cens,y,x\n1,0,0,7,,1.0\n";
        assert!(matches!(
            read_long_csv(bad.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let empty = "subject_id,t,a_treat,a_cens,y,x\n";
        assert!(read_long_csv(empty.as_bytes()).is_err());
    }

    #[test]
    fn resample_renames_duplicates() {
        let ds = toy();
        let b = ds.resample_subjects(&[1, 1, 0]).unwrap();
        assert_eq!(
            b.subject_ids(),
            &["2".to_string(), "2#1".into(), "1".into()]
        );
        assert!(b.validate().is_empty());
        assert_eq!(b.n_rows(), 5);
    }
}
