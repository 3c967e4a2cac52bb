//! Treatment and censoring mechanism, and cumulative inverse-probability
//! weights.
//!
//! Within an interval the treatment decision comes first, then the censoring
//! causes in the order disenrollment, death, administrative end. Each cause is
//! modelled as a discrete hazard among rows not already censored by an earlier
//! cause, so the probability of remaining uncensored is the product of
//! `1 - hazard` over causes. Censoring models condition on the interval's
//! treatment value.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{CensorCause, LongDataset, ResolvedMap, SummaryMap};
use crate::error::{Error, Result};
use crate::learners::{self, bound, LearnerSpec, P_MIN};
use crate::regimes::RulePath;
use crate::superlearner::{fit_nuisance, NuisanceFit, Strategy};

/// Time covariates appended to pooled-over-time designs: a linear term in k
/// and, optionally, indicators of coarse time blocks of `coarse_width`
/// intervals (the first block is the reference).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEncoding {
    pub linear: bool,
    pub coarse_width: Option<u32>,
    pub n_blocks: u32,
}

impl TimeEncoding {
    pub fn new(linear: bool, coarse_width: Option<u32>, max_t: u32) -> Self {
        let n_blocks = match coarse_width {
            Some(w) if w > 0 => max_t / w + 1,
            _ => 1,
        };
        TimeEncoding {
            linear,
            coarse_width: coarse_width.filter(|w| *w > 0),
            n_blocks,
        }
    }

    pub fn dim(&self) -> usize {
        usize::from(self.linear) + (self.n_blocks as usize - 1)
    }

    pub fn names(&self) -> Vec<String> {
        let mut n = Vec::new();
        if self.linear {
            n.push("k".to_string());
        }
        for b in 1..self.n_blocks {
            n.push(format!("block{b}"));
        }
        n
    }

    pub fn fill(&self, k: u32, out: &mut [f64]) {
        let mut c = 0;
        if self.linear {
            out[0] = f64::from(k);
            c = 1;
        }
        if let Some(w) = self.coarse_width {
            let block = (k / w).min(self.n_blocks - 1);
            for b in 1..self.n_blocks {
                out[c] = if block == b { 1.0 } else { 0.0 };
                c += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GConfig {
    pub map: SummaryMap,
    pub strategy: Strategy,
    #[serde(default = "yes")]
    pub time_linear: bool,
    #[serde(default)]
    pub coarse_width: Option<u32>,
}

fn yes() -> bool {
    true
}

impl GConfig {
    pub fn parametric(map: SummaryMap) -> Self {
        GConfig {
            map,
            strategy: Strategy::glm(),
            time_linear: true,
            coarse_width: None,
        }
    }
}

/// Fitted g components.
#[derive(Debug, Clone, Serialize)]
pub struct GModel {
    pub init: NuisanceFit,
    pub cont: NuisanceFit,
    pub disenroll: NuisanceFit,
    pub death: NuisanceFit,
    pub admin: NuisanceFit,
    pub map: SummaryMap,
    pub time: TimeEncoding,
}

/// Per-row probabilities under a treatment/censoring mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct GPredictions {
    /// P(A^T(k) = 1 | past), from the initiation or continuation model.
    pub p_treat: Vec<f64>,
    /// Discrete hazards of disenrollment, death and administrative censoring,
    /// evaluated at the observed treatment value.
    pub cause_hazard: [Vec<f64>; 3],
}

impl GPredictions {
    pub fn n_rows(&self) -> usize {
        self.p_treat.len()
    }

    pub fn p_uncensored(&self, r: usize) -> f64 {
        self.cause_hazard.iter().map(|h| 1.0 - h[r]).product()
    }
}

struct Designs {
    treat: Array2<f64>,
    cens: Array2<f64>,
}

fn designs(ds: &LongDataset, map: &ResolvedMap, time: &TimeEncoding) -> Designs {
    let d = map.dim();
    let td = time.dim();
    let n = ds.n_rows();
    let mut treat = Array2::zeros((n, d + td));
    let mut cens = Array2::zeros((n, d + 1 + td));
    for r in 0..n {
        let k = ds.t(r);
        {
            let mut row = treat.row_mut(r);
            let s = row.as_slice_mut().expect("standard layout");
            map.fill(ds, r, &mut s[..d]);
            time.fill(k, &mut s[d..]);
        }
        let mut row = cens.row_mut(r);
        let s = row.as_slice_mut().expect("standard layout");
        map.fill(ds, r, &mut s[..d]);
        s[d] = if ds.a_treat(r) { 1.0 } else { 0.0 };
        time.fill(k, &mut s[d + 1..]);
    }
    Designs { treat, cens }
}

fn fit_stratum(
    ds: &LongDataset,
    x: &Array2<f64>,
    rows: &[usize],
    response: impl Fn(usize) -> bool,
    strategy: &Strategy,
    what: &str,
) -> Result<NuisanceFit> {
    if rows.is_empty() {
        return Ok(NuisanceFit::Constant {
            p: 0.5,
            reason: format!("{what}: empty stratum"),
        });
    }
    let y: Vec<f64> = rows
        .iter()
        .map(|&r| if response(r) { 1.0 } else { 0.0 })
        .collect();
    let events = y.iter().sum::<f64>();
    if events == 0.0 || events == y.len() as f64 {
        let p = bound(events / y.len() as f64, P_MIN);
        return Ok(NuisanceFit::Constant {
            p,
            reason: format!(
                "{what}: degenerate stratum ({} events in {} rows)",
                events,
                y.len()
            ),
        });
    }
    let xs = x.select(ndarray::Axis(0), rows);
    let subjects: Vec<usize> = rows.iter().map(|&r| ds.row_subject(r)).collect();
    fit_nuisance(
        strategy,
        xs.view(),
        &y,
        &vec![1.0; y.len()],
        None,
        &subjects,
        ds.n_subjects(),
    )
}

/// Fits initiation, continuation and censoring-cause models, pooled over time.
pub fn fit_g(ds: &LongDataset, cfg: &GConfig) -> Result<GModel> {
    let map = cfg.map.resolve(ds)?;
    let time = TimeEncoding::new(cfg.time_linear, cfg.coarse_width, ds.max_t());
    let x = designs(ds, &map, &time);
    let all: Vec<usize> = (0..ds.n_rows()).collect();
    let (init_rows, cont_rows): (Vec<usize>, Vec<usize>) =
        all.iter().partition(|&&r| !ds.a_treat_prev(r));
    let not_disenrolled: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&r| ds.a_cens(r) != CensorCause::Disenroll)
        .collect();
    let admin_rows: Vec<usize> = not_disenrolled
        .iter()
        .copied()
        .filter(|&r| ds.a_cens(r) != CensorCause::Death)
        .collect();

    let init = fit_stratum(
        ds,
        &x.treat,
        &init_rows,
        |r| ds.a_treat(r),
        &cfg.strategy,
        "initiation",
    )?;
    let cont = fit_stratum(
        ds,
        &x.treat,
        &cont_rows,
        |r| ds.a_treat(r),
        &cfg.strategy,
        "continuation",
    )?;
    let disenroll = fit_stratum(
        ds,
        &x.cens,
        &all,
        |r| ds.a_cens(r) == CensorCause::Disenroll,
        &cfg.strategy,
        "disenrollment",
    )?;
    let death = fit_stratum(
        ds,
        &x.cens,
        &not_disenrolled,
        |r| ds.a_cens(r) == CensorCause::Death,
        &cfg.strategy,
        "death",
    )?;
    // administrative end of follow-up: completely at random, intercept only
    let icpt = Strategy::Parametric {
        learner: LearnerSpec::intercept_only("intercept"),
    };
    let admin = fit_stratum(
        ds,
        &x.cens,
        &admin_rows,
        |r| ds.a_cens(r) == CensorCause::Admin,
        &icpt,
        "admin",
    )?;
    Ok(GModel {
        init,
        cont,
        disenroll,
        death,
        admin,
        map: cfg.map.clone(),
        time,
    })
}

impl GModel {
    /// Predicted probabilities on every row of `ds` (same covariate schema as
    /// the fitting data).
    pub fn predict(&self, ds: &LongDataset) -> Result<GPredictions> {
        let map = self.map.resolve(ds)?;
        let x = designs(ds, &map, &self.time);
        let p_init = self.init.predict(x.treat.view(), None)?;
        let p_cont = self.cont.predict(x.treat.view(), None)?;
        let p_treat = (0..ds.n_rows())
            .map(|r| {
                if ds.a_treat_prev(r) {
                    p_cont[r]
                } else {
                    p_init[r]
                }
            })
            .collect();
        let cause_hazard = [
            self.disenroll.predict(x.cens.view(), None)?,
            self.death.predict(x.cens.view(), None)?,
            self.admin.predict(x.cens.view(), None)?,
        ];
        Ok(GPredictions {
            p_treat,
            cause_hazard,
        })
    }

    pub fn descriptions(&self) -> Vec<(String, String)> {
        vec![
            ("initiation".into(), self.init.description()),
            ("continuation".into(), self.cont.description()),
            ("disenroll".into(), self.disenroll.description()),
            ("death".into(), self.death.description()),
            ("admin".into(), self.admin.description()),
        ]
    }

    pub fn notes(&self) -> Vec<String> {
        [
            &self.init,
            &self.cont,
            &self.disenroll,
            &self.death,
            &self.admin,
        ]
        .iter()
        .flat_map(|f| f.notes())
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    /// Cap on the cumulative weight.
    pub truncation: Option<f64>,
    pub stabilize: bool,
    /// Time encoding of the stabilization numerator.
    #[serde(default = "yes")]
    pub time_linear: bool,
    #[serde(default)]
    pub coarse_width: Option<u32>,
}

impl WeightOptions {
    pub fn unstabilized(truncation: Option<f64>) -> Self {
        WeightOptions {
            truncation,
            stabilize: false,
            time_linear: true,
            coarse_width: None,
        }
    }

    pub fn stabilized(truncation: Option<f64>) -> Self {
        WeightOptions {
            truncation,
            stabilize: true,
            time_linear: true,
            coarse_width: None,
        }
    }
}

/// Row-aligned weights for one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTable {
    /// ĝ at each row: probability of the observed treatment times the
    /// probability of remaining uncensored.
    pub factor: Vec<f64>,
    /// Unstabilized, untruncated cumulative weight; 0 once the subject deviates
    /// from the rule or is censored.
    pub raw: Vec<f64>,
    /// Stabilization numerator (probability of following through k), if used.
    pub numerator: Option<Vec<f64>>,
    /// Weights to use downstream: stabilized if requested, then truncated.
    pub weight: Vec<f64>,
    pub truncation: Option<f64>,
    pub stabilized: bool,
    pub n_truncated: usize,
}

/// Cumulative weights ŵt(k) = ∏_{j≤k} I(Ā(j) = Ā^θ(j)) / ĝ_{A(j)}.
pub fn compute_weights(
    ds: &LongDataset,
    g: &GPredictions,
    path: &RulePath,
    opts: &WeightOptions,
) -> Result<WeightTable> {
    let n = ds.n_rows();
    if g.n_rows() != n || path.len() != n {
        return Err(Error::Mismatch(format!(
            "dataset has {n} rows, g predictions {}, rule path {}",
            g.n_rows(),
            path.len()
        )));
    }
    if let Some(t) = opts.truncation {
        if !(t > 0.0) {
            return Err(Error::Config(format!(
                "truncation bound must be positive, got {t}"
            )));
        }
    }
    let mut factor = vec![0.0; n];
    let mut raw = vec![0.0; n];
    for s in 0..ds.n_subjects() {
        let mut prod = 1.0;
        for r in ds.subject_range(s) {
            let pt = if ds.a_treat(r) {
                g.p_treat[r]
            } else {
                1.0 - g.p_treat[r]
            };
            factor[r] = pt * g.p_uncensored(r);
            prod *= factor[r];
            let active = path.follows[r] && !ds.a_cens(r).is_censored();
            raw[r] = if active { 1.0 / prod } else { 0.0 };
        }
    }
    let numerator = if opts.stabilize {
        Some(stabilization_numerator(ds, path, opts)?)
    } else {
        None
    };
    let mut n_truncated = 0;
    let weight = (0..n)
        .map(|r| {
            let w = raw[r] * numerator.as_ref().map_or(1.0, |m| m[r]);
            match opts.truncation {
                Some(t) if w > t => {
                    n_truncated += 1;
                    t
                }
                _ => w,
            }
        })
        .collect();
    Ok(WeightTable {
        factor,
        raw,
        numerator,
        weight,
        truncation: opts.truncation,
        stabilized: opts.stabilize,
        n_truncated,
    })
}

/// Marginal probability of still following the rule (and being uncensored)
/// at k, as a product of pooled time-only logistic hazards fitted among rule
/// followers. Constant across subjects at a given k.
fn stabilization_numerator(
    ds: &LongDataset,
    path: &RulePath,
    opts: &WeightOptions,
) -> Result<Vec<f64>> {
    let time = TimeEncoding::new(opts.time_linear, opts.coarse_width, ds.max_t());
    let rows: Vec<usize> = (0..ds.n_rows())
        .filter(|&r| ds.t(r) == 0 || path.follows[r - 1])
        .collect();
    let mut numerator = vec![1.0; ds.n_rows()];
    if rows.is_empty() {
        return Ok(numerator);
    }
    let mut x = Array2::zeros((rows.len(), time.dim()));
    let mut y = Vec::with_capacity(rows.len());
    for (i, &r) in rows.iter().enumerate() {
        let mut row = x.row_mut(i);
        time.fill(ds.t(r), row.as_slice_mut().expect("standard layout"));
        y.push(if path.follows[r] && !ds.a_cens(r).is_censored() {
            1.0
        } else {
            0.0
        });
    }
    let model = learners::fit(
        &LearnerSpec::glm("stabilization"),
        x.view(),
        &y,
        &vec![1.0; y.len()],
        None,
    )?;
    let max_t = ds.max_t();
    let mut grid = Array2::zeros((max_t as usize + 1, time.dim()));
    for k in 0..=max_t {
        let mut row = grid.row_mut(k as usize);
        time.fill(k, row.as_slice_mut().expect("standard layout"));
    }
    let q = model.predict(grid.view())?;
    let mut cum = Vec::with_capacity(q.len());
    let mut prod = 1.0;
    for v in q {
        prod *= v;
        cum.push(prod);
    }
    for (r, m) in numerator.iter_mut().enumerate() {
        *m = cum[ds.t(r) as usize];
    }
    Ok(numerator)
}

/// Mean over all subjects of the weight at min(k, T̃), i.e. carrying the last
/// weight forward past failure. Under the true mechanism and without
/// truncation its expectation is one at every k.
pub fn mean_carried_weight(ds: &LongDataset, weights: &[f64], k: u32) -> (f64, f64) {
    let vals: Vec<f64> = (0..ds.n_subjects())
        .map(|s| {
            let kk = k.min(ds.last_t(s));
            weights[ds.row_at(s, kk).expect("row within follow-up")]
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Distribution of positive weights at one interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub regime: String,
    pub kind: String,
    pub k: u32,
    pub n_rows: usize,
    pub n_positive: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize_weights(
    ds: &LongDataset,
    weights: &[f64],
    regime: &str,
    kind: &str,
) -> Vec<WeightSummary> {
    let max_t = ds.max_t();
    let mut by_k: Vec<Vec<f64>> = vec![Vec::new(); max_t as usize + 1];
    let mut counts = vec![0usize; max_t as usize + 1];
    for r in 0..ds.n_rows() {
        let k = ds.t(r) as usize;
        counts[k] += 1;
        if weights[r] > 0.0 {
            by_k[k].push(weights[r]);
        }
    }
    by_k.into_iter()
        .enumerate()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            let mean = if v.is_empty() {
                f64::NAN
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            };
            WeightSummary {
                regime: regime.to_string(),
                kind: kind.to_string(),
                k: k as u32,
                n_rows: counts[k],
                n_positive: v.len(),
                min: v.first().copied().unwrap_or(f64::NAN),
                q25: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q75: quantile(&v, 0.75),
                max: v.last().copied().unwrap_or(f64::NAN),
                mean,
            }
        })
        .collect()
}

/// Sample variance of the weights at each interval.
pub fn weight_variance_by_k(ds: &LongDataset, weights: &[f64]) -> Vec<f64> {
    let max_t = ds.max_t() as usize;
    let mut by_k: Vec<Vec<f64>> = vec![Vec::new(); max_t + 1];
    for r in 0..ds.n_rows() {
        by_k[ds.t(r) as usize].push(weights[r]);
    }
    by_k.iter()
        .map(|v| {
            if v.len() < 2 {
                return 0.0;
            }
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PersonTimeRow;
    use crate::regimes::{rule_path, Regime};

    fn two_point_subject(treat: [bool; 2], bio: [f64; 2]) -> LongDataset {
        let rows = (0..2)
            .map(|k| PersonTimeRow {
                subject_id: "a".into(),
                t: k as u32,
                covariates: vec![bio[k]],
                a_treat: treat[k],
                a_cens: CensorCause::None,
                y: Some(false),
            })
            .collect();
        LongDataset::from_rows_validated(vec!["a1c".into()], rows).unwrap()
    }

    fn flat_g(n: usize, p_treat: f64, hazard: f64) -> GPredictions {
        GPredictions {
            p_treat: vec![p_treat; n],
            cause_hazard: [vec![hazard; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    #[test]
    fn product_of_inverse_halves() {
        let ds = two_point_subject([false, true], [7.0, 9.0]);
        let path = rule_path(&ds, &Regime::new(8.0, "a1c")).unwrap();
        let w = compute_weights(
            &ds,
            &flat_g(2, 0.5, 0.0),
            &path,
            &WeightOptions::unstabilized(None),
        )
        .unwrap();
        assert_eq!(w.raw, vec![2.0, 4.0]);
        assert_eq!(w.weight, vec![2.0, 4.0]);
    }

    #[test]
    fn deviation_at_zero_kills_every_weight() {
        let ds = two_point_subject([true, true], [7.0, 9.0]);
        let path = rule_path(&ds, &Regime::new(8.0, "a1c")).unwrap();
        let w = compute_weights(
            &ds,
            &flat_g(2, 0.5, 0.0),
            &path,
            &WeightOptions::unstabilized(None),
        )
        .unwrap();
        assert_eq!(w.raw, vec![0.0, 0.0]);
    }

    #[test]
    fn truncation_caps_the_cumulative_weight() {
        let ds = two_point_subject([false, false], [7.0, 7.0]);
        let path = rule_path(&ds, &Regime::new(8.0, "a1c")).unwrap();
        // 1 / (1 - p)^2 = 350 at k = 1
        let p = 1.0 - (1.0f64 / 350.0).sqrt();
        let w = compute_weights(
            &ds,
            &flat_g(2, p, 0.0),
            &path,
            &WeightOptions::unstabilized(Some(200.0)),
        )
        .unwrap();
        assert!((w.raw[1] - 350.0).abs() < 1e-9);
        assert_eq!(w.weight[1], 200.0);
        assert_eq!(w.n_truncated, 1);
        let inactive = compute_weights(
            &ds,
            &flat_g(2, p, 0.0),
            &path,
            &WeightOptions::unstabilized(Some(400.0)),
        )
        .unwrap();
        let none = compute_weights(
            &ds,
            &flat_g(2, p, 0.0),
            &path,
            &WeightOptions::unstabilized(None),
        )
        .unwrap();
        assert_eq!(inactive.weight, none.weight);
    }

    #[test]
    fn censoring_factor_enters_the_product() {
        let ds = two_point_subject([false, false], [7.0, 7.0]);
        let path = rule_path(&ds, &Regime::new(8.0, "a1c")).unwrap();
        let w = compute_weights(
            &ds,
            &flat_g(2, 0.5, 0.2),
            &path,
            &WeightOptions::unstabilized(None),
        )
        .unwrap();
        assert!((w.factor[0] - 0.4).abs() < 1e-15);
        assert!((w.raw[1] - 1.0 / 0.16).abs() < 1e-12);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let ds = two_point_subject([false, false], [7.0, 7.0]);
        let path = rule_path(&ds, &Regime::new(8.0, "a1c")).unwrap();
        assert!(compute_weights(
            &ds,
            &flat_g(3, 0.5, 0.0),
            &path,
            &WeightOptions::unstabilized(None)
        )
        .is_err());
    }

    #[test]
    fn time_encoding_blocks() {
        let t = TimeEncoding::new(true, Some(2), 7);
        assert_eq!(t.dim(), 4);
        let mut out = vec![0.0; 4];
        t.fill(5, &mut out);
        assert_eq!(out, vec![5.0, 0.0, 1.0, 0.0]);
        t.fill(0, &mut out);
        assert_eq!(out, vec![0.0, 0.0, 0.0, 0.0]);
    }
}
