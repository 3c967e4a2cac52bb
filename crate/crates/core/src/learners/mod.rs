//! Binary-regression learners ranked by the discrete super learner.
//!
//! Every learner minimizes a weighted Bernoulli quasi-log-likelihood, so
//! responses may be fractional, and accepts a fixed per-row logit offset.
//! Design matrices never carry a constant column; each family fits its own
//! intercept. Weights are rescaled to mean one before fitting, which makes
//! every family invariant to a common rescaling of the weights.

mod gbt;
mod glm;
mod linalg;
mod saturated;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use gbt::{GbtModel, GbtParams};
pub use glm::LinearModel;
pub use saturated::SaturatedModel;

use crate::error::{Error, Result};

/// Lower bound applied to every predicted probability.
pub const P_MIN: f64 = 1e-6;

pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn bound(p: f64, lo: f64) -> f64 {
    p.clamp(lo, 1.0 - lo)
}

/// −[y log p + (1 − y) log(1 − p)] with p bounded away from 0 and 1.
pub fn bernoulli_loss(y: f64, p: f64) -> f64 {
    let p = bound(p, 1e-15);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Weighted mean Bernoulli loss.
pub fn weighted_nll(y: &[f64], p: &[f64], w: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..y.len() {
        if w[i] > 0.0 {
            num += w[i] * bernoulli_loss(y[i], p[i]);
            den += w[i];
        }
    }
    if den > 0.0 {
        num / den
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    /// Main-terms logistic regression by IRLS.
    LogisticGlm,
    /// Ridge-penalized logistic regression; the intercept is not penalized.
    L2Logistic { lambda: f64 },
    /// Logistic-loss gradient boosting of depth-limited regression trees.
    Gbt(GbtParams),
    /// One free parameter per distinct design row (cell means on the logit
    /// scale); equivalent to a logistic GLM on the full set of cell indicators.
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub label: String,
    #[serde(flatten)]
    pub family: Family,
    /// Restrict the learner to these design columns. `Some(vec![])` gives an
    /// intercept-only model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<usize>>,
}

impl LearnerSpec {
    pub fn glm(label: impl Into<String>) -> Self {
        LearnerSpec {
            label: label.into(),
            family: Family::LogisticGlm,
            features: None,
        }
    }

    pub fn intercept_only(label: impl Into<String>) -> Self {
        LearnerSpec {
            label: label.into(),
            family: Family::LogisticGlm,
            features: Some(Vec::new()),
        }
    }

    pub fn l2(label: impl Into<String>, lambda: f64) -> Self {
        LearnerSpec {
            label: label.into(),
            family: Family::L2Logistic { lambda },
            features: None,
        }
    }

    pub fn gbt(label: impl Into<String>, params: GbtParams) -> Self {
        LearnerSpec {
            label: label.into(),
            family: Family::Gbt(params),
            features: None,
        }
    }

    pub fn saturated(label: impl Into<String>) -> Self {
        LearnerSpec {
            label: label.into(),
            family: Family::Saturated,
            features: None,
        }
    }

    pub fn with_features(mut self, features: Vec<usize>) -> Self {
        self.features = Some(features);
        self
    }

    pub fn check(&self) -> Result<()> {
        match &self.family {
            Family::L2Logistic { lambda } if !(*lambda >= 0.0) => Err(Error::Config(format!(
                "{}: lambda must be >= 0",
                self.label
            ))),
            Family::Gbt(p) => p
                .check()
                .map_err(|m| Error::Config(format!("{}: {m}", self.label))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ModelParams {
    Linear(LinearModel),
    Gbt(GbtModel),
    Saturated(SaturatedModel),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    /// Per-round weighted training loss (boosting) or per-iteration deviance (IRLS).
    pub loss_path: Vec<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedModel {
    pub spec: LearnerSpec,
    pub n_columns: usize,
    pub params: ModelParams,
    pub diagnostics: FitDiagnostics,
}

fn select_columns(
    x: ArrayView2<'_, f64>,
    features: &Option<Vec<usize>>,
) -> Result<Option<Array2<f64>>> {
    match features {
        None => Ok(None),
        Some(cols) => {
            if let Some(&bad) = cols.iter().find(|&&c| c >= x.ncols()) {
                return Err(Error::Dimension(format!(
                    "feature {bad} out of range for {} columns",
                    x.ncols()
                )));
            }
            Ok(Some(x.select(Axis(1), cols)))
        }
    }
}

/// Fits `spec` to weighted (possibly fractional) binary responses.
pub fn fit(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
) -> Result<FittedModel> {
    spec.check()?;
    let n = x.nrows();
    if y.len() != n || weights.len() != n || offset.is_some_and(|o| o.len() != n) {
        return Err(Error::Dimension(format!(
            "x has {n} rows, y {}, weights {}, offset {:?}",
            y.len(),
            weights.len(),
            offset.map(<[f64]>::len)
        )));
    }
    if let Some(bad) = y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Dimension(format!("response {bad} outside [0, 1]")));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::Dimension(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let scale = n as f64 / total;
    let w: Vec<f64> = weights.iter().map(|v| v * scale).collect();
    let selected = select_columns(x, &spec.features)?;
    let xs = match &selected {
        Some(a) => a.view(),
        None => x.view(),
    };

    let (params, diagnostics) = match &spec.family {
        Family::LogisticGlm => {
            let (m, d) = glm::fit_irls(xs, y, &w, offset, 0.0);
            (ModelParams::Linear(m), d)
        }
        Family::L2Logistic { lambda } => {
            let (m, d) = glm::fit_irls(xs, y, &w, offset, *lambda);
            (ModelParams::Linear(m), d)
        }
        Family::Gbt(p) => {
            let (m, d) = gbt::fit(p, xs, y, &w, offset);
            (ModelParams::Gbt(m), d)
        }
        Family::Saturated => {
            let (m, d) = saturated::fit(xs, y, &w, offset);
            (ModelParams::Saturated(m), d)
        }
    };
    Ok(FittedModel {
        spec: spec.clone(),
        n_columns: x.ncols(),
        params,
        diagnostics,
    })
}

impl FittedModel {
    /// Linear predictor (logit scale) without bounding.
    pub fn margin(&self, x: ArrayView2<'_, f64>, offset: Option<&[f64]>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_columns {
            return Err(Error::Dimension(format!(
                "model trained on {} columns, got {}",
                self.n_columns,
                x.ncols()
            )));
        }
        if let Some(o) = offset {
            if o.len() != x.nrows() {
                return Err(Error::Dimension(format!(
                    "offset has {} rows, x has {}",
                    o.len(),
                    x.nrows()
                )));
            }
        }
        let selected = select_columns(x, &self.spec.features)?;
        let xs = match &selected {
            Some(a) => a.view(),
            None => x.view(),
        };
        let mut m = match &self.params {
            ModelParams::Linear(l) => l.margin(xs),
            ModelParams::Gbt(g) => g.margin(xs),
            ModelParams::Saturated(s) => s.margin(xs),
        };
        if let Some(o) = offset {
            for (mi, oi) in m.iter_mut().zip(o) {
                *mi += oi;
            }
        }
        Ok(m)
    }

    /// Probabilities bounded into [P_MIN, 1 − P_MIN].
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.predict_with_offset(x, None)
    }

    pub fn predict_with_offset(
        &self,
        x: ArrayView2<'_, f64>,
        offset: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        Ok(self
            .margin(x, offset)?
            .into_iter()
            .map(|m| bound(expit(m), P_MIN))
            .collect())
    }
}

/// Intercept b minimizing the weighted loss of expit(offset + b), by Newton
/// with step-halving. Returns ±`cap` when the data sit on the boundary.
pub(crate) fn fit_intercept(y: &[f64], w: &[f64], offset: Option<&[f64]>, cap: f64) -> f64 {
    let off = |i: usize| offset.map_or(0.0, |o| o[i]);
    let (mut sw, mut swy) = (0.0, 0.0);
    for i in 0..y.len() {
        sw += w[i];
        swy += w[i] * y[i];
    }
    if sw <= 0.0 {
        return 0.0;
    }
    let ybar = swy / sw;
    if ybar <= 0.0 {
        return -cap;
    }
    if ybar >= 1.0 {
        return cap;
    }
    if offset.is_none() {
        return logit(ybar).clamp(-cap, cap);
    }
    // the score is increasing in b: Newton steps safeguarded by a bracket
    let score = |b: f64| -> (f64, f64) {
        let (mut g, mut h) = (0.0, 0.0);
        for i in 0..y.len() {
            if w[i] > 0.0 {
                let p = expit(off(i) + b);
                g += w[i] * (p - y[i]);
                h += w[i] * p * (1.0 - p);
            }
        }
        (g, h)
    };
    let (mut lo, mut hi) = (-cap, cap);
    let mut b = 0.0;
    for _ in 0..200 {
        let (g, h) = score(b);
        if g == 0.0 {
            break;
        }
        if g > 0.0 {
            hi = b;
        } else {
            lo = b;
        }
        let mut next = if h > 0.0 { b - g / h } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == b || hi - lo < 1e-15 {
            break;
        }
        b = next;
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn intercept_only_predicts_mean() {
        let x = Array2::<f64>::zeros((4, 0));
        let m = fit(
            &LearnerSpec::glm("icpt"),
            x.view(),
            &[1.0, 1.0, 0.0, 0.0],
            &[1.0; 4],
            None,
        )
        .unwrap();
        for p in m.predict(x.view()).unwrap() {
            assert!((p - 0.5).abs() < 1e-12);
        }
        let z = Array2::<f64>::zeros((3, 0));
        assert!(m
            .predict(z.view())
            .unwrap()
            .iter()
            .all(|p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn calibrated_offset_gives_zero_intercept() {
        let x = Array2::<f64>::zeros((4, 0));
        let off = vec![logit(0.25); 4];
        let m = fit(
            &LearnerSpec::glm("eps"),
            x.view(),
            &[1.0, 0.0, 0.0, 0.0],
            &[1.0; 4],
            Some(&off),
        )
        .unwrap();
        let ModelParams::Linear(l) = &m.params else {
            panic!()
        };
        assert!(l.intercept.abs() < 1e-10, "epsilon = {}", l.intercept);
    }

    #[test]
    fn zero_coefficient_glm_predicts_half() {
        let lm = LinearModel {
            intercept: 0.0,
            coefficients: vec![0.0, 0.0],
            aliased: vec![false, false],
        };
        let m = FittedModel {
            spec: LearnerSpec::glm("z"),
            n_columns: 2,
            params: ModelParams::Linear(lm),
            diagnostics: FitDiagnostics::default(),
        };
        let p = m.predict(array![[3.0, -1.0]].view()).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn rejects_zero_weights_and_bad_dims() {
        let x = array![[1.0], [2.0]];
        let spec = LearnerSpec::glm("g");
        assert!(matches!(
            fit(&spec, x.view(), &[0.0, 1.0], &[0.0, 0.0], None),
            Err(Error::ZeroWeights)
        ));
        assert!(matches!(
            fit(&spec, x.view(), &[0.0], &[1.0, 1.0], None),
            Err(Error::Dimension(_))
        ));
        assert!(fit(&spec, x.view(), &[0.0, 1.5], &[1.0, 1.0], None).is_err());
        let m = fit(&spec, x.view(), &[0.0, 1.0], &[1.0, 1.0], None).unwrap();
        assert!(matches!(
            m.predict(array![[1.0, 2.0]].view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn predictions_are_bounded() {
        let x = array![[0.0], [0.0], [1.0], [1.0]];
        let m = fit(
            &LearnerSpec::saturated("s"),
            x.view(),
            &[0.0, 0.0, 1.0, 1.0],
            &[1.0; 4],
            None,
        )
        .unwrap();
        let p = m.predict(x.view()).unwrap();
        assert_eq!(p[0], P_MIN);
        assert_eq!(p[3], 1.0 - P_MIN);
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = LearnerSpec::gbt("gbt_a", GbtParams::default()).with_features(vec![0, 2]);
        let s = serde_json::to_string(&spec).unwrap();
        let back: LearnerSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
        let l2: LearnerSpec =
            serde_json::from_str(r#"{"label":"r","family":"l2-logistic","lambda":0.5}"#).unwrap();
        assert_eq!(l2.family, Family::L2Logistic { lambda: 0.5 });
    }
}
