//! Long-format TMLE of ψ^θ(t₀) = P(Y^θ(t₀) = 1).
//!
//! The working outcome Q̃ lives on the rows: the response of row k is Y(k) if
//! the subject fails at k or k = t₀, and otherwise the targeted prediction
//! Q̂*_{k+1} written back from the subject's row k+1 (censored rows at k+1
//! included). Going backwards from t₀, each step fits Q̂_k on (A(k), f_k),
//! fluctuates it with a weighted intercept-only logistic regression using the
//! offset logit Q̂_k(A^θ(k), f_k), and overwrites Q̃ one row up.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LongDataset, SummaryMap};
use crate::error::{Error, Result};
use crate::learners::{bound, expit, fit_intercept, logit};
use crate::regimes::RulePath;
use crate::superlearner::{fit_nuisance, Strategy};

pub const Q_MIN: f64 = 1e-5;
const EPSILON_CAP: f64 = 10.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Initial fits among rule followers only.
    #[default]
    Stratified,
    /// Initial fits among all at-risk rows, with A(k) as a regressor.
    Pooled,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Stratified => "stratified",
            Mode::Pooled => "pooled",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConfig {
    pub map: SummaryMap,
    pub strategy: Strategy,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_q_min")]
    pub q_min: f64,
    /// Keep the final working-outcome column in the fit (row-aligned).
    #[serde(default)]
    pub keep_working: bool,
}

fn default_q_min() -> f64 {
    Q_MIN
}

impl QConfig {
    pub fn new(map: SummaryMap, strategy: Strategy) -> Self {
        QConfig {
            map,
            strategy,
            mode: Mode::Stratified,
            q_min: Q_MIN,
            keep_working: false,
        }
    }
}

/// What happened at one backward step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub k: u32,
    /// Rows at k (at risk, including censored at k).
    pub n_rows: usize,
    /// Rows used for the initial fit.
    pub n_fit: usize,
    /// Uncensored rows at k without a working outcome (follow-up ended
    /// without event before t₀).
    pub n_missing: usize,
    pub n_positive_weight: usize,
    pub epsilon: f64,
    /// (1/n) Σ ŵt(k)(Q̃ − Q̂*_k) after fluctuation.
    pub weighted_score: f64,
    pub q_model: String,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmleFit {
    pub regime: String,
    pub t0: u32,
    pub mode: Mode,
    pub psi: f64,
    /// Q̂*_0(A^θ(0), f_0) per subject.
    pub q0_star: Vec<f64>,
    /// Per step k (index k): nonzero weighted residuals ŵt(k)(Q̃ − Q̂*_k) as
    /// (subject, value).
    pub residuals: Vec<Vec<(usize, f64)>>,
    pub steps: Vec<StepDiagnostics>,
    /// Q̃ after the last overwrite, when requested.
    #[serde(skip)]
    pub working: Option<Vec<Option<f64>>>,
}

impl TmleFit {
    pub fn n_subjects(&self) -> usize {
        self.q0_star.len()
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.epsilon).collect()
    }

    pub fn survival(&self) -> f64 {
        1.0 - self.psi
    }
}

/// Design of (A(k), f_k) for `rows`, with A(k) taken from `treat`.
fn q_design(
    ds: &LongDataset,
    map: &crate::data::ResolvedMap,
    rows: &[usize],
    treat: impl Fn(usize) -> bool,
) -> Array2<f64> {
    let d = map.dim();
    let mut x = Array2::zeros((rows.len(), d + 1));
    for (i, &r) in rows.iter().enumerate() {
        let mut row = x.row_mut(i);
        let s = row.as_slice_mut().expect("standard layout");
        s[0] = if treat(r) { 1.0 } else { 0.0 };
        map.fill(ds, r, &mut s[1..]);
    }
    x
}

/// One TMLE run for horizon `t0`. `weights` are the row-aligned cumulative
/// weights ŵt (already truncated/stabilized as desired).
pub fn tmle_estimate(
    ds: &LongDataset,
    path: &RulePath,
    weights: &[f64],
    cfg: &QConfig,
    regime: &str,
    t0: u32,
) -> Result<TmleFit> {
    let n_rows = ds.n_rows();
    if path.len() != n_rows || weights.len() != n_rows {
        return Err(Error::Mismatch(format!(
            "dataset has {n_rows} rows, rule path {}, weights {}",
            path.len(),
            weights.len()
        )));
    }
    if t0 > ds.max_t() {
        return Err(Error::Config(format!(
            "t0 = {t0} beyond the last interval {}",
            ds.max_t()
        )));
    }
    if !(cfg.q_min > 0.0 && cfg.q_min < 0.5) {
        return Err(Error::Config(format!(
            "q_min must lie in (0, 0.5), got {}",
            cfg.q_min
        )));
    }
    let map = cfg.map.resolve(ds)?;
    let n = ds.n_subjects();

    let mut response: Vec<Option<f64>> = (0..n_rows)
        .map(|r| match ds.y(r) {
            Some(true) => Some(1.0),
            Some(false) if ds.t(r) == t0 => Some(0.0),
            _ => None,
        })
        .collect();
    let mut by_k: Vec<Vec<usize>> = vec![Vec::new(); t0 as usize + 1];
    for r in 0..n_rows {
        if ds.t(r) <= t0 {
            by_k[ds.t(r) as usize].push(r);
        }
    }

    let mut residuals = vec![Vec::new(); t0 as usize + 1];
    let mut steps = Vec::with_capacity(t0 as usize + 1);
    let mut q0_star = vec![f64::NAN; n];
    for k in (0..=t0).rev() {
        let rows = &by_k[k as usize];
        // positions within `rows` of uncensored rows with a working outcome
        let pos: Vec<usize> = (0..rows.len())
            .filter(|&i| !ds.a_cens(rows[i]).is_censored() && response[rows[i]].is_some())
            .collect();
        let observed: Vec<usize> = pos.iter().map(|&i| rows[i]).collect();
        let n_missing = rows
            .iter()
            .filter(|&&r| !ds.a_cens(r).is_censored() && response[r].is_none())
            .count();
        let fit_rows: Vec<usize> = match cfg.mode {
            Mode::Stratified => observed
                .iter()
                .copied()
                .filter(|&r| path.follows[r])
                .collect(),
            Mode::Pooled => observed.clone(),
        };
        if fit_rows.is_empty() {
            let who = if cfg.mode == Mode::Stratified {
                "rule-following "
            } else {
                ""
            };
            return Err(Error::Positivity(format!(
                "no uncensored {who}rows at k = {k} for regime {regime}"
            )));
        }
        let mut notes = Vec::new();

        let x_fit = q_design(ds, &map, &fit_rows, |r| ds.a_treat(r));
        let y_fit: Vec<f64> = fit_rows
            .iter()
            .map(|&r| response[r].expect("observed"))
            .collect();
        let subjects: Vec<usize> = fit_rows.iter().map(|&r| ds.row_subject(r)).collect();
        let model = fit_nuisance(
            &cfg.strategy,
            x_fit.view(),
            &y_fit,
            &vec![1.0; y_fit.len()],
            None,
            &subjects,
            n,
        )?;
        notes.extend(model.notes());

        let x_rule = q_design(ds, &map, rows, |r| path.a_theta[r]);
        let q_init = model.predict(x_rule.view(), None)?;
        let offset: Vec<f64> = q_init.iter().map(|q| logit(bound(*q, cfg.q_min))).collect();

        // fluctuation on uncensored rows with a working outcome
        let fy: Vec<f64> = observed
            .iter()
            .map(|&r| response[r].expect("observed"))
            .collect();
        let fw: Vec<f64> = observed.iter().map(|&r| weights[r]).collect();
        let fo: Vec<f64> = pos.iter().map(|&i| offset[i]).collect();
        let total_w: f64 = fw.iter().sum();
        // all weighted working outcomes 0 (or 1): the score is solved only in
        // the limit epsilon -> -inf (+inf) of the submodel, i.e. Q* = 0 (1)
        let weighted_outcomes = fy
            .iter()
            .zip(&fw)
            .filter(|(_, w)| **w > 0.0)
            .map(|(y, _)| *y);
        let boundary = if total_w > 0.0 {
            let (mut all0, mut all1) = (true, true);
            for y in weighted_outcomes {
                all0 &= y == 0.0;
                all1 &= y == 1.0;
            }
            if all0 {
                Some(0.0)
            } else if all1 {
                Some(1.0)
            } else {
                None
            }
        } else {
            None
        };
        let epsilon = match boundary {
            Some(v) => {
                notes.push(format!(
                    "k = {k}: every weighted working outcome is {v}; targeted values set to {v}"
                ));
                if v == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    f64::INFINITY
                }
            }
            None if total_w > 0.0 => fit_intercept(&fy, &fw, Some(&fo), EPSILON_CAP),
            None => {
                notes.push(format!("k = {k}: no positive weight; fluctuation skipped"));
                0.0
            }
        };
        if epsilon.is_finite() && epsilon.abs() >= EPSILON_CAP {
            notes.push(format!(
                "k = {k}: fluctuation hit the bound |epsilon| = {EPSILON_CAP}"
            ));
        }

        let q_star: Vec<f64> = match boundary {
            Some(v) => vec![v; offset.len()],
            None => offset.iter().map(|o| expit(o + epsilon)).collect(),
        };
        let mut score = 0.0;
        let mut n_positive_weight = 0;
        for (j, &i) in pos.iter().enumerate() {
            if fw[j] > 0.0 {
                let v = fw[j] * (fy[j] - q_star[i]);
                score += v;
                n_positive_weight += 1;
                if v != 0.0 {
                    residuals[k as usize].push((ds.row_subject(rows[i]), v));
                }
            }
        }
        for (i, &r) in rows.iter().enumerate() {
            if k > 0 {
                response[r - 1] = Some(q_star[i]);
            } else {
                q0_star[ds.row_subject(r)] = q_star[i];
            }
        }
        steps.push(StepDiagnostics {
            k,
            n_rows: rows.len(),
            n_fit: fit_rows.len(),
            n_missing,
            n_positive_weight,
            epsilon,
            weighted_score: score / n as f64,
            q_model: model.description(),
            notes,
        });
    }
    steps.reverse();
    let psi = q0_star.iter().sum::<f64>() / n as f64;
    let working = cfg.keep_working.then_some(response);
    Ok(TmleFit {
        regime: regime.to_string(),
        t0,
        mode: cfg.mode,
        psi,
        q0_star,
        residuals,
        steps,
        working,
    })
}

/// Independent TMLE runs over a grid of horizons; a failure at one horizon
/// leaves the others intact.
pub fn survival_curve(
    ds: &LongDataset,
    path: &RulePath,
    weights: &[f64],
    cfg: &QConfig,
    regime: &str,
    t0_grid: &[u32],
) -> Vec<Result<TmleFit>> {
    t0_grid
        .par_iter()
        .map(|&t0| tmle_estimate(ds, path, weights, cfg, regime, t0))
        .collect()
}
