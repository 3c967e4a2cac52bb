//! Coarsening of daily event streams into interval-level person-time rows.
//!
//! Interval k of a subject covers days `[entry + k·u, entry + (k+1)·u)`.
//! Follow-up stops at the earliest of failure, censoring and the end of the
//! subject's data (administrative censoring); failure wins ties. Covariates are
//! carried forward from the last observation on or before the first day of the
//! interval, and one `<name>_imputed` indicator per covariate is appended.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_f64, CensorCause, LongDataset, PersonTimeRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub day: i64,
    pub name: String,
    pub value: f64,
}

/// Daily-resolution follow-up of one subject. Episodes are inclusive day
/// ranges of intensified therapy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DailyEventStream {
    pub subject_id: String,
    pub entry_day: i64,
    pub end_day: i64,
    pub observations: Vec<Observation>,
    pub episodes: Vec<(i64, i64)>,
    pub failure_day: Option<i64>,
    pub censor: Option<(i64, CensorCause)>,
}

/// How daily treatment status is summarized over an interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposurePolicy {
    /// Treated if any day of the interval is covered.
    #[default]
    Any,
    /// Treated if the interval's first day is covered.
    FirstDay,
    /// Treated if more than half of the interval's days are covered.
    Majority,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsenConfig {
    pub time_unit_days: u32,
    pub max_intervals: u32,
    #[serde(default)]
    pub exposure: ExposurePolicy,
    /// Covariate order; defaults to the sorted set of observed names.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

impl CoarsenConfig {
    pub fn new(time_unit_days: u32, max_intervals: u32) -> Self {
        CoarsenConfig {
            time_unit_days,
            max_intervals,
            exposure: ExposurePolicy::Any,
            covariates: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.time_unit_days == 0 {
            return Err(Error::Config("time unit must be at least one day".into()));
        }
        if self.max_intervals == 0 {
            return Err(Error::Config("max_intervals must be at least 1".into()));
        }
        Ok(())
    }
}

/// Interval holding `day` for a subject entering on `entry`.
pub fn interval_of(day: i64, entry: i64, unit: u32) -> u32 {
    ((day - entry).div_euclid(i64::from(unit))) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stop {
    Failure,
    Censored(CensorCause),
}

impl DailyEventStream {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Subject {
            subject: self.subject_id.clone(),
            message: message.into(),
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.end_day < self.entry_day {
            return Err(self.fail(format!(
                "empty follow-up: end day {} before entry {}",
                self.end_day, self.entry_day
            )));
        }
        let inside = |d: i64| (self.entry_day..=self.end_day).contains(&d);
        for o in &self.observations {
            if !inside(o.day) {
                return Err(self.fail(format!(
                    "observation of `{}` on day {} outside follow-up",
                    o.name, o.day
                )));
            }
        }
        for &(a, b) in &self.episodes {
            if b < a || !inside(a) || !inside(b) {
                return Err(self.fail(format!(
                    "treatment episode [{a}, {b}] outside follow-up or reversed"
                )));
            }
        }
        if let Some(d) = self.failure_day {
            if !inside(d) {
                return Err(self.fail(format!("failure day {d} outside follow-up")));
            }
        }
        if let Some((d, cause)) = self.censor {
            if !inside(d) {
                return Err(self.fail(format!("censoring day {d} outside follow-up")));
            }
            if !cause.is_censored() {
                return Err(self.fail("censoring record without a cause"));
            }
        }
        Ok(())
    }

    /// Day and kind of the event ending follow-up.
    fn stop(&self) -> (i64, Stop) {
        let mut best = (self.end_day, Stop::Censored(CensorCause::Admin));
        if let Some((d, cause)) = self.censor {
            if d <= best.0 {
                best = (d, Stop::Censored(cause));
            }
        }
        if let Some(d) = self.failure_day {
            if d <= best.0 {
                best = (d, Stop::Failure);
            }
        }
        best
    }
}

/// Coarsens one subject. `names` fixes the covariate order.
pub fn coarsen(
    stream: &DailyEventStream,
    cfg: &CoarsenConfig,
    names: &[String],
) -> Result<Vec<PersonTimeRow>> {
    cfg.check()?;
    stream.check()?;
    let u = i64::from(cfg.time_unit_days);
    let entry = stream.entry_day;
    let (stop_day, stop) = stream.stop();
    let stop_k = interval_of(stop_day, entry, cfg.time_unit_days);
    let (n_rows, last_day, terminal) = if stop_k >= cfg.max_intervals {
        let n = cfg.max_intervals;
        (n, entry + i64::from(n) * u - 1, None)
    } else {
        (stop_k + 1, stop_day, Some(stop))
    };

    let span = (last_day - entry + 1) as usize;
    let mut treated = vec![false; span];
    for &(a, b) in &stream.episodes {
        let lo = (a - entry).max(0);
        let hi = (b - entry).min(span as i64 - 1);
        for d in lo..=hi {
            treated[d as usize] = true;
        }
    }

    let mut by_name: HashMap<&str, Vec<(i64, f64)>> = HashMap::new();
    for o in &stream.observations {
        by_name
            .entry(o.name.as_str())
            .or_default()
            .push((o.day, o.value));
    }
    for v in by_name.values_mut() {
        // stable: the later record wins among same-day observations
        v.sort_by_key(|p| p.0);
    }
    let series: Vec<&[(i64, f64)]> = names
        .iter()
        .map(|n| by_name.get(n.as_str()).map_or(&[][..], |v| v.as_slice()))
        .collect();
    let mut cursor = vec![0usize; names.len()];

    let mut rows = Vec::with_capacity(n_rows as usize);
    for k in 0..n_rows {
        let start = entry + i64::from(k) * u;
        let lo = (start - entry) as usize;
        let hi = ((start + u - 1).min(last_day) - entry) as usize;
        let days = &treated[lo..=hi];
        let a_treat = match cfg.exposure {
            ExposurePolicy::Any => days.iter().any(|&t| t),
            ExposurePolicy::FirstDay => days[0],
            ExposurePolicy::Majority => 2 * days.iter().filter(|&&t| t).count() > days.len(),
        };

        let mut covariates = vec![0.0; 2 * names.len()];
        for (j, s) in series.iter().enumerate() {
            while cursor[j] < s.len() && s[cursor[j]].0 <= start {
                cursor[j] += 1;
            }
            let imputed = if cursor[j] == 0 {
                true
            } else {
                let (day, value) = s[cursor[j] - 1];
                covariates[j] = value;
                day <= start - u
            };
            covariates[names.len() + j] = if imputed { 1.0 } else { 0.0 };
        }

        let (a_cens, y) = match (k + 1 == n_rows, terminal) {
            (true, Some(Stop::Failure)) => (CensorCause::None, Some(true)),
            (true, Some(Stop::Censored(c))) => (c, None),
            _ => (CensorCause::None, Some(false)),
        };
        rows.push(PersonTimeRow {
            subject_id: stream.subject_id.clone(),
            t: k,
            covariates,
            a_treat,
            a_cens,
            y,
        });
    }
    Ok(rows)
}

/// Covariate value columns followed by their imputation indicators.
pub fn coarsened_names(names: &[String]) -> Vec<String> {
    let mut out = names.to_vec();
    out.extend(names.iter().map(|n| format!("{n}_imputed")));
    out
}

fn covariate_order(streams: &[DailyEventStream], cfg: &CoarsenConfig) -> Vec<String> {
    match &cfg.covariates {
        Some(v) => v.clone(),
        None => {
            let set: BTreeSet<&str> = streams
                .iter()
                .flat_map(|s| s.observations.iter().map(|o| o.name.as_str()))
                .collect();
            set.into_iter().map(String::from).collect()
        }
    }
}

/// Coarsens every stream (in parallel) into a validated dataset.
pub fn coarsen_dataset(streams: &[DailyEventStream], cfg: &CoarsenConfig) -> Result<LongDataset> {
    cfg.check()?;
    if streams.is_empty() {
        return Err(Error::Config("no subjects to coarsen".into()));
    }
    let names = covariate_order(streams, cfg);
    let per_subject: Vec<Vec<PersonTimeRow>> = streams
        .par_iter()
        .map(|s| coarsen(s, cfg, &names))
        .collect::<Result<_>>()?;
    let rows = per_subject.into_iter().flatten().collect();
    LongDataset::from_rows_validated(coarsened_names(&names), rows)
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct DailyRecord {
    subject_id: String,
    record: String,
    day: i64,
    end_day: Option<i64>,
    name: Option<String>,
    value: Option<f64>,
    cause: Option<String>,
}

/// Reads the daily record format: columns
/// `subject_id,record,day,end_day,name,value,cause` with record types `span`
/// (entry and end day), `cov`, `treat`, `fail` and `cens`.
pub fn read_daily_csv<R: Read>(reader: R) -> Result<Vec<DailyEventStream>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut order: Vec<DailyEventStream> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut has_span: Vec<bool> = Vec::new();
    for (i, rec) in rdr.deserialize::<DailyRecord>().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let s = *index.entry(rec.subject_id.clone()).or_insert_with(|| {
            order.push(DailyEventStream {
                subject_id: rec.subject_id.clone(),
                ..Default::default()
            });
            has_span.push(false);
            order.len() - 1
        });
        let stream = &mut order[s];
        let missing = |what: &str| Error::Parse {
            line,
            message: format!("`{}` record needs {what}", rec.record),
        };
        match rec.record.as_str() {
            "span" => {
                stream.entry_day = rec.day;
                stream.end_day = rec.end_day.ok_or_else(|| missing("end_day"))?;
                has_span[s] = true;
            }
            "cov" => stream.observations.push(Observation {
                day: rec.day,
                name: rec.name.clone().ok_or_else(|| missing("name"))?,
                value: rec.value.ok_or_else(|| missing("value"))?,
            }),
            "treat" => stream
                .episodes
                .push((rec.day, rec.end_day.ok_or_else(|| missing("end_day"))?)),
            "fail" => stream.failure_day = Some(rec.day),
            "cens" => {
                let raw = rec.cause.as_deref().ok_or_else(|| missing("cause"))?;
                let cause = CensorCause::parse(raw)
                    .filter(|c| c.is_censored())
                    .ok_or_else(|| Error::Parse {
                        line,
                        message: format!("unknown censoring cause `{raw}`"),
                    })?;
                stream.censor = Some((rec.day, cause));
            }
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown record type `{other}`"),
                })
            }
        }
    }
    if let Some(s) = has_span.iter().position(|h| !h) {
        return Err(Error::Subject {
            subject: order[s].subject_id.clone(),
            message: "no span record".into(),
        });
    }
    Ok(order)
}

pub fn write_daily_csv<W: Write>(streams: &[DailyEventStream], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "subject_id",
        "record",
        "day",
        "end_day",
        "name",
        "value",
        "cause",
    ])?;
    for s in streams {
        let id = s.subject_id.as_str();
        w.write_record([
            id,
            "span",
            &s.entry_day.to_string(),
            &s.end_day.to_string(),
            "",
            "",
            "",
        ])?;
        for o in &s.observations {
            w.write_record([
                id,
                "cov",
                &o.day.to_string(),
                "",
                &o.name,
                &format_f64(o.value),
                "",
            ])?;
        }
        for (a, b) in &s.episodes {
            w.write_record([id, "treat", &a.to_string(), &b.to_string(), "", "", ""])?;
        }
        if let Some(d) = s.failure_day {
            w.write_record([id, "fail", &d.to_string(), "", "", "", ""])?;
        }
        if let Some((d, c)) = s.censor {
            w.write_record([id, "cens", &d.to_string(), "", "", "", c.name()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(end: i64) -> DailyEventStream {
        DailyEventStream {
            subject_id: "s".into(),
            entry_day: 0,
            end_day: end,
            ..Default::default()
        }
    }

    fn run(s: &DailyEventStream, u: u32, max: u32) -> Vec<PersonTimeRow> {
        coarsen(s, &CoarsenConfig::new(u, max), &["a1c".to_string()]).unwrap()
    }

    #[test]
    fn failure_lands_in_floor_interval() {
        let mut s = stream(400);
        s.failure_day = Some(17);
        let rows = run(&s, 5, 100);
        assert_eq!(rows.len(), 4);
        assert_eq!(rows[3].y, Some(true));
        assert!(rows[..3].iter().all(|r| r.y == Some(false)));
    }

    #[test]
    fn episode_overlap_marks_intervals() {
        let mut s = stream(400);
        s.episodes.push((100, 200));
        let rows = run(&s, 90, 3);
        let a: Vec<bool> = rows.iter().map(|r| r.a_treat).collect();
        assert_eq!(a, vec![false, true, true]);
    }

    #[test]
    fn administrative_end_censors_the_last_interval() {
        let rows = run(&stream(89), 90, 8);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].a_cens, CensorCause::Admin);
        assert_eq!(rows[0].y, None);
    }

    #[test]
    fn horizon_truncates_without_censoring() {
        let rows = run(&stream(10_000), 30, 8);
        assert_eq!(rows.len(), 8);
        assert!(rows
            .iter()
            .all(|r| r.a_cens == CensorCause::None && r.y == Some(false)));
    }

    #[test]
    fn same_day_failure_beats_censoring() {
        let mut s = stream(400);
        s.failure_day = Some(40);
        s.censor = Some((40, CensorCause::Death));
        assert_eq!(run(&s, 30, 10).last().unwrap().y, Some(true));
        s.censor = Some((35, CensorCause::Death));
        let rows = run(&s, 30, 10);
        assert_eq!(rows.last().unwrap().a_cens, CensorCause::Death);
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn carry_forward_and_indicators() {
        let mut s = stream(400);
        s.observations = vec![
            Observation {
                day: 0,
                name: "a1c".into(),
                value: 7.1,
            },
            Observation {
                day: 95,
                name: "a1c".into(),
                value: 8.3,
            },
        ];
        let rows = run(&s, 30, 6);
        let v: Vec<(f64, f64)> = rows
            .iter()
            .map(|r| (r.covariates[0], r.covariates[1]))
            .collect();
        // day 95 is first visible at the interval starting on day 120
        assert_eq!(
            v,
            vec![
                (7.1, 0.0),
                (7.1, 1.0),
                (7.1, 1.0),
                (7.1, 1.0),
                (8.3, 0.0),
                (8.3, 1.0)
            ]
        );
        let never = run(&stream(50), 30, 6);
        assert_eq!(never[0].covariates, vec![0.0, 1.0]);
    }

    #[test]
    fn exposure_policies() {
        let mut s = stream(400);
        s.episodes.push((3, 5));
        let cfg = |p| CoarsenConfig {
            exposure: p,
            ..CoarsenConfig::new(10, 2)
        };
        let first = |p| coarsen(&s, &cfg(p), &[]).unwrap()[0].a_treat;
        assert!(first(ExposurePolicy::Any));
        assert!(!first(ExposurePolicy::FirstDay));
        assert!(!first(ExposurePolicy::Majority));
    }

    #[test]
    fn empty_or_inconsistent_streams_are_rejected() {
        assert!(coarsen(&stream(-1), &CoarsenConfig::new(5, 3), &[]).is_err());
        let mut s = stream(10);
        s.failure_day = Some(11);
        assert!(matches!(
            coarsen(&s, &CoarsenConfig::new(5, 3), &[]),
            Err(Error::Subject { .. })
        ));
        assert!(coarsen_dataset(&[], &CoarsenConfig::new(5, 3)).is_err());
    }

    #[test]
    fn daily_csv_round_trip() {
        let mut s = stream(300);
        s.subject_id = "p1".into();
        s.observations.push(Observation {
            day: 3,
            name: "a1c".into(),
            value: 7.25,
        });
        s.episodes.push((50, 80));
        s.censor = Some((200, CensorCause::Disenroll));
        let mut t = stream(100);
        t.subject_id = "p2".into();
        t.failure_day = Some(12);
        let mut buf = Vec::new();
        write_daily_csv(&[s.clone(), t.clone()], &mut buf).unwrap();
        assert_eq!(read_daily_csv(buf.as_slice()).unwrap(), vec![s, t]);
        let bad = "subject_id,record,day,end_day,name,value,cause\nx,cov,1,,a1c,7,\n";
        assert!(read_daily_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn finer_units_grow_person_time() {
        let mut s = stream(700);
        s.failure_day = Some(500);
        let coarse = run(&s, 90, 100).len();
        let fine = run(&s, 5, 1000).len();
        assert_eq!(coarse, 6);
        assert!(fine > coarse);
    }

    prop_compose! {
        fn arb_stream()(end in 0i64..400, f in proptest::option::of(0i64..400), c in proptest::option::of((0i64..400, 1u8..=2)),
                        eps in proptest::collection::vec((0i64..400, 0i64..60), 0..4)) -> DailyEventStream {
            let mut s = stream(end);
            s.failure_day = f.filter(|d| *d <= end);
            s.censor = c.filter(|(d, _)| *d <= end).map(|(d, code)| (d, CensorCause::from_code(code).unwrap()));
            s.episodes = eps.into_iter().filter(|(a, _)| *a <= end).map(|(a, l)| (a, (a + l).min(end))).collect();
            s
        }
    }

    proptest! {
        #[test]
        fn nesting_under_or_and_max(s in arb_stream(), u in 1u32..10, m in 2u32..6) {
            let fine = run(&s, u, 10_000);
            let coarse = run(&s, u * m, 10_000);
            let mut agg: Vec<(bool, Option<bool>, CensorCause)> = Vec::new();
            for r in &fine {
                let k = (r.t / m) as usize;
                if agg.len() <= k {
                    agg.push((false, Some(false), CensorCause::None));
                }
                let e = &mut agg[k];
                e.0 |= r.a_treat;
                e.1 = match (e.1, r.y) { (Some(a), Some(b)) => Some(a || b), _ => None };
                e.2 = r.a_cens;
            }
            let direct: Vec<_> = coarse.iter().map(|r| (r.a_treat, r.y, r.a_cens)).collect();
            prop_assert_eq!(agg, direct);
        }

        #[test]
        fn interval_index_is_floor_and_monotone(d1 in 0i64..5000, gap in 1i64..500, u in 1u32..120) {
            prop_assert_eq!(interval_of(d1, 0, u) as i64, d1 / i64::from(u));
            prop_assert!(interval_of(d1, 0, u) <= interval_of(d1 + gap, 0, u));
        }
    }
}
