//! Discrete super learner: V-fold cross-validated choice of one learner
//! under weighted negative log-likelihood, with folds assigned by subject.

use ndarray::{ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{self, FittedModel, LearnerSpec};

/// Subject-level fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CvPlan {
    pub folds: usize,
    pub seed: u64,
    assignment: Vec<usize>,
}

impl CvPlan {
    pub fn new(n_subjects: usize, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
        }
        if n_subjects < folds {
            return Err(Error::Config(format!(
                "{n_subjects} subjects cannot fill {folds} folds"
            )));
        }
        let mut order: Vec<usize> = (0..n_subjects).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut assignment = vec![0; n_subjects];
        for (pos, s) in order.into_iter().enumerate() {
            assignment[s] = pos % folds;
        }
        Ok(CvPlan {
            folds,
            seed,
            assignment,
        })
    }

    pub fn fold_of(&self, subject: usize) -> usize {
        self.assignment[subject]
    }

    pub fn n_subjects(&self) -> usize {
        self.assignment.len()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DslResult {
    pub labels: Vec<String>,
    pub cv_risks: Vec<f64>,
    pub selected: usize,
    pub final_model: FittedModel,
    pub notes: Vec<String>,
}

impl DslResult {
    pub fn selected_label(&self) -> &str {
        &self.labels[self.selected]
    }
}

fn take_rows<T: Copy>(v: &[T], rows: &[usize]) -> Vec<T> {
    rows.iter().map(|&r| v[r]).collect()
}

/// Held-out risk of one candidate on one fold; `None` if the fold carries no
/// validation weight.
fn fold_risk(
    spec: &LearnerSpec,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    train: &[usize],
    valid: &[usize],
) -> std::result::Result<Option<f64>, String> {
    let vw = take_rows(w, valid);
    if !(vw.iter().sum::<f64>() > 0.0) {
        return Ok(None);
    }
    let xt = x.select(Axis(0), train);
    let yt = take_rows(y, train);
    let wt = take_rows(w, train);
    let ot = offset.map(|o| take_rows(o, train));
    let model =
        learners::fit(spec, xt.view(), &yt, &wt, ot.as_deref()).map_err(|e| e.to_string())?;
    let xv = x.select(Axis(0), valid);
    let ov = offset.map(|o| take_rows(o, valid));
    let p = model
        .predict_with_offset(xv.view(), ov.as_deref())
        .map_err(|e| e.to_string())?;
    let risk = learners::weighted_nll(&take_rows(y, valid), &p, &vw);
    if risk.is_finite() {
        Ok(Some(risk))
    } else {
        Err("non-finite held-out loss".into())
    }
}

/// Cross-validates every candidate, selects the minimum-risk one (earliest on
/// ties) and refits it on all rows. `row_subjects[i]` is the subject of row i.
pub fn dsl_fit(
    candidates: &[LearnerSpec],
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
    row_subjects: &[usize],
    plan: &CvPlan,
) -> Result<DslResult> {
    if candidates.is_empty() {
        return Err(Error::Config(
            "discrete super learner needs at least one candidate".into(),
        ));
    }
    if row_subjects.len() != x.nrows() {
        return Err(Error::Dimension(format!(
            "{} subject labels for {} rows",
            row_subjects.len(),
            x.nrows()
        )));
    }
    if let Some(&s) = row_subjects.iter().find(|&&s| s >= plan.n_subjects()) {
        return Err(Error::Dimension(format!(
            "subject {s} not covered by the CV plan"
        )));
    }
    let folds: Vec<(Vec<usize>, Vec<usize>)> = (0..plan.folds)
        .map(|v| (0..x.nrows()).partition(|&r| plan.fold_of(row_subjects[r]) != v))
        .collect();

    let tasks: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..plan.folds).map(move |v| (c, v)))
        .collect();
    let results: Vec<std::result::Result<Option<f64>, String>> = tasks
        .par_iter()
        .map(|&(c, v)| {
            fold_risk(
                &candidates[c],
                x,
                y,
                weights,
                offset,
                &folds[v].0,
                &folds[v].1,
            )
        })
        .collect();

    let mut notes = Vec::new();
    let mut cv_risks = Vec::with_capacity(candidates.len());
    for (c, spec) in candidates.iter().enumerate() {
        let mut sum = 0.0;
        let mut used = 0usize;
        let mut failed = false;
        for v in 0..plan.folds {
            match &results[c * plan.folds + v] {
                Ok(Some(r)) => {
                    sum += r;
                    used += 1;
                }
                Ok(None) => {}
                Err(e) => {
                    notes.push(format!("{}: fold {v} failed: {e}", spec.label));
                    failed = true;
                }
            }
        }
        cv_risks.push(if failed || used == 0 {
            f64::INFINITY
        } else {
            sum / used as f64
        });
    }
    let mut selected = 0;
    for c in 1..cv_risks.len() {
        if cv_risks[c] < cv_risks[selected] {
            selected = c;
        }
    }
    if !cv_risks[selected].is_finite() {
        return Err(Error::Config(format!(
            "no candidate could be cross-validated: {}",
            notes.join("; ")
        )));
    }
    let final_model = learners::fit(&candidates[selected], x, y, weights, offset)?;
    Ok(DslResult {
        labels: candidates.iter().map(|c| c.label.clone()).collect(),
        cv_risks,
        selected,
        final_model,
        notes,
    })
}

/// How a nuisance regression is estimated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum Strategy {
    Parametric {
        learner: LearnerSpec,
    },
    Dsl {
        candidates: Vec<LearnerSpec>,
        folds: usize,
        seed: u64,
    },
}

impl Strategy {
    pub fn glm() -> Self {
        Strategy::Parametric {
            learner: LearnerSpec::glm("glm"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Parametric { .. } => "parametric",
            Strategy::Dsl { .. } => "dsl",
        }
    }
}

/// A fitted nuisance regression.
#[derive(Debug, Clone, Serialize)]
pub enum NuisanceFit {
    Single(FittedModel),
    Dsl(DslResult),
    /// Degenerate stratum: constant probability.
    Constant {
        p: f64,
        reason: String,
    },
}

impl NuisanceFit {
    pub fn predict(&self, x: ArrayView2<'_, f64>, offset: Option<&[f64]>) -> Result<Vec<f64>> {
        match self {
            NuisanceFit::Single(m) => m.predict_with_offset(x, offset),
            NuisanceFit::Dsl(d) => d.final_model.predict_with_offset(x, offset),
            NuisanceFit::Constant { p, .. } => Ok(vec![*p; x.nrows()]),
        }
    }

    pub fn description(&self) -> String {
        match self {
            NuisanceFit::Single(m) => m.spec.label.clone(),
            NuisanceFit::Dsl(d) => format!("dsl:{}", d.selected_label()),
            NuisanceFit::Constant { p, .. } => format!("constant:{p}"),
        }
    }

    pub fn notes(&self) -> Vec<String> {
        match self {
            NuisanceFit::Single(m) => m.diagnostics.notes.clone(),
            NuisanceFit::Dsl(d) => {
                let mut n = d.notes.clone();
                n.extend(d.final_model.diagnostics.notes.iter().cloned());
                n
            }
            NuisanceFit::Constant { reason, .. } => vec![reason.clone()],
        }
    }
}

/// Fits according to `strategy`. Rows carry subject indices into a dataset of
/// `n_subjects` subjects so that folds stay subject-level.
pub fn fit_nuisance(
    strategy: &Strategy,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    weights: &[f64],
    offset: Option<&[f64]>,
    row_subjects: &[usize],
    n_subjects: usize,
) -> Result<NuisanceFit> {
    match strategy {
        Strategy::Parametric { learner } => Ok(NuisanceFit::Single(learners::fit(
            learner, x, y, weights, offset,
        )?)),
        Strategy::Dsl {
            candidates,
            folds,
            seed,
        } => {
            let distinct = {
                let mut s: Vec<usize> = row_subjects.to_vec();
                s.sort_unstable();
                s.dedup();
                s.len()
            };
            if distinct < *folds {
                // too few subjects in this stratum to cross-validate
                let learner = &candidates[0];
                let mut m = learners::fit(learner, x, y, weights, offset)?;
                m.diagnostics.notes.push(format!(
                    "only {distinct} subjects; used first candidate without cross-validation"
                ));
                return Ok(NuisanceFit::Single(m));
            }
            let plan = CvPlan::new(n_subjects, *folds, *seed)?;
            Ok(NuisanceFit::Dsl(dsl_fit(
                candidates,
                x,
                y,
                weights,
                offset,
                row_subjects,
                &plan,
            )?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::{expit, GbtParams};
    use ndarray::Array2;
    use rand::Rng;

    fn planted(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 1));
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let v: f64 = rng.sample(rand_distr::StandardNormal);
            x[[i, 0]] = v;
            y.push(if rng.gen::<f64>() < expit(2.0 * v) {
                1.0
            } else {
                0.0
            });
        }
        (x, y)
    }

    #[test]
    fn plan_is_subject_level_and_covers_every_fold() {
        let plan = CvPlan::new(103, 10, 9).unwrap();
        let mut counts = [0; 10];
        for s in 0..103 {
            counts[plan.fold_of(s)] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10 || c == 11));
        assert_eq!(plan, CvPlan::new(103, 10, 9).unwrap());
        assert!(CvPlan::new(5, 10, 0).is_err());
    }

    #[test]
    fn single_candidate_refit_equals_plain_fit() {
        let (x, y) = planted(300, 1);
        let w = vec![1.0; 300];
        let subjects: Vec<usize> = (0..300).collect();
        let plan = CvPlan::new(300, 5, 2).unwrap();
        let spec = LearnerSpec::glm("glm");
        let r = dsl_fit(
            std::slice::from_ref(&spec),
            x.view(),
            &y,
            &w,
            None,
            &subjects,
            &plan,
        )
        .unwrap();
        assert_eq!(r.selected, 0);
        assert!(r.cv_risks[0].is_finite());
        let plain = learners::fit(&spec, x.view(), &y, &w, None).unwrap();
        assert_eq!(r.final_model, plain);
    }

    #[test]
    fn duplicate_candidate_picks_first() {
        let (x, y) = planted(300, 3);
        let w = vec![1.0; 300];
        let subjects: Vec<usize> = (0..300).collect();
        let plan = CvPlan::new(300, 5, 2).unwrap();
        let c = vec![LearnerSpec::glm("a"), LearnerSpec::glm("b")];
        let r = dsl_fit(&c, x.view(), &y, &w, None, &subjects, &plan).unwrap();
        assert_eq!(r.cv_risks[0], r.cv_risks[1]);
        assert_eq!(r.selected_label(), "a");
    }

    #[test]
    fn failing_candidate_gets_infinite_risk() {
        let (x, y) = planted(200, 4);
        let w = vec![1.0; 200];
        let subjects: Vec<usize> = (0..200).collect();
        let plan = CvPlan::new(200, 4, 2).unwrap();
        let c = vec![
            LearnerSpec::glm("bad").with_features(vec![7]),
            LearnerSpec::glm("ok"),
        ];
        let r = dsl_fit(&c, x.view(), &y, &w, None, &subjects, &plan).unwrap();
        assert!(r.cv_risks[0].is_infinite());
        assert_eq!(r.selected, 1);
        assert!(!r.notes.is_empty());
    }

    #[test]
    fn folds_never_share_subjects() {
        // several rows per subject; a leak would let the saturated learner
        // memorize each subject's id column
        let n_subj = 60;
        let mut x = Array2::zeros((n_subj * 4, 1));
        let mut y = Vec::new();
        let mut subj = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for s in 0..n_subj {
            let ys = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            for r in 0..4 {
                x[[s * 4 + r, 0]] = s as f64;
                y.push(ys);
                subj.push(s);
            }
        }
        let plan = CvPlan::new(n_subj, 5, 1).unwrap();
        for v in 0..5 {
            let (train, valid): (Vec<usize>, Vec<usize>) =
                (0..subj.len()).partition(|&r| plan.fold_of(subj[r]) != v);
            for &a in &valid {
                assert!(train.iter().all(|&b| subj[b] != subj[a]));
            }
        }
        let c = vec![
            LearnerSpec::intercept_only("icpt"),
            LearnerSpec::saturated("memo"),
        ];
        let r = dsl_fit(&c, x.view(), &y, &vec![1.0; y.len()], None, &subj, &plan).unwrap();
        // unseen cells fall back to the pooled rate, so without a leak the two
        // candidates tie up to rounding
        assert!(
            (r.cv_risks[1] - r.cv_risks[0]).abs() < 1e-9,
            "{:?}",
            r.cv_risks
        );
        assert!(r.cv_risks[1] > 0.5);
    }

    #[test]
    fn selection_is_reproducible_and_minimal() {
        let (x, y) = planted(500, 6);
        let w = vec![1.0; 500];
        let subjects: Vec<usize> = (0..500).collect();
        let plan = CvPlan::new(500, 10, 8).unwrap();
        let c = vec![
            LearnerSpec::intercept_only("icpt"),
            LearnerSpec::glm("glm"),
            LearnerSpec::gbt(
                "gbt",
                GbtParams {
                    n_trees: 30,
                    subsample_rate: 0.8,
                    ..Default::default()
                },
            ),
        ];
        let a = dsl_fit(&c, x.view(), &y, &w, None, &subjects, &plan).unwrap();
        let b = dsl_fit(&c, x.view(), &y, &w, None, &subjects, &plan).unwrap();
        assert_eq!(a.cv_risks, b.cv_risks);
        assert_eq!(a.selected, b.selected);
        assert!(a.cv_risks.iter().all(|r| a.cv_risks[a.selected] <= *r));
    }
}
