//! Dynamic threshold regimes: intensify treatment the first time the
//! biomarker crosses θ and stay intensified afterwards.

use serde::{Deserialize, Serialize};

use crate::data::LongDataset;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub theta: f64,
    pub biomarker: String,
    /// Intensify on `biomarker >= theta` instead of `biomarker > theta`.
    #[serde(default)]
    pub threshold_inclusive: bool,
}

impl Regime {
    pub fn new(theta: f64, biomarker: impl Into<String>) -> Self {
        Regime {
            theta,
            biomarker: biomarker.into(),
            threshold_inclusive: false,
        }
    }

    /// θ = −∞: treat from the first interval.
    pub fn always_treat(biomarker: impl Into<String>) -> Self {
        Self::new(f64::NEG_INFINITY, biomarker)
    }

    /// θ = +∞: never intensify.
    pub fn never_treat(biomarker: impl Into<String>) -> Self {
        Self::new(f64::INFINITY, biomarker)
    }

    pub fn label(&self) -> String {
        if self.theta == f64::NEG_INFINITY {
            "always".into()
        } else if self.theta == f64::INFINITY {
            "never".into()
        } else {
            format!("d{}", self.theta)
        }
    }

    /// The rule's decision given the current biomarker and the rule's own
    /// previous decision.
    pub fn decide(&self, biomarker: f64, previous: bool) -> bool {
        previous
            || if self.threshold_inclusive {
                biomarker >= self.theta
            } else {
                biomarker > self.theta
            }
    }

    /// The four default thresholds θ ∈ {7, 7.5, 8, 8.5}.
    pub fn default_set(biomarker: &str) -> Vec<Regime> {
        [7.0, 7.5, 8.0, 8.5]
            .iter()
            .map(|&t| Regime::new(t, biomarker))
            .collect()
    }
}

/// Row-aligned rule paths for one regime.
#[derive(Debug, Clone, PartialEq)]
pub struct RulePath {
    /// A^θ(k) at each row.
    pub a_theta: Vec<bool>,
    /// I(Ā^T(k) = Ā^θ(k)); treatment only, censoring is handled by the weights.
    pub follows: Vec<bool>,
}

impl RulePath {
    pub fn len(&self) -> usize {
        self.a_theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_theta.is_empty()
    }
}

pub fn rule_path(ds: &LongDataset, regime: &Regime) -> Result<RulePath> {
    let j = ds.covariate_index(&regime.biomarker)?;
    let n = ds.n_rows();
    let mut a_theta = vec![false; n];
    let mut follows = vec![false; n];
    for s in 0..ds.n_subjects() {
        let mut prev = false;
        let mut ok = true;
        for r in ds.subject_range(s) {
            let a = regime.decide(ds.covariate(r, j), prev);
            ok = ok && a == ds.a_treat(r);
            a_theta[r] = a;
            follows[r] = ok;
            prev = a;
        }
    }
    Ok(RulePath { a_theta, follows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CensorCause, PersonTimeRow};
    use proptest::prelude::*;

    fn subject(bio: &[f64], treat: &[bool]) -> LongDataset {
        let rows = bio
            .iter()
            .zip(treat)
            .enumerate()
            .map(|(k, (&b, &a))| PersonTimeRow {
                subject_id: "s".into(),
                t: k as u32,
                covariates: vec![b],
                a_treat: a,
                a_cens: CensorCause::None,
                y: Some(false),
            })
            .collect();
        LongDataset::from_rows(vec!["a1c".into()], rows).unwrap()
    }

    #[test]
    fn rule_reproduced_exactly() {
        let ds = subject(&[7.2, 6.8, 9.0], &[false, false, true]);
        let p = rule_path(&ds, &Regime::new(8.5, "a1c")).unwrap();
        assert_eq!(p.a_theta, vec![false, false, true]);
        assert_eq!(p.follows, vec![true, true, true]);
    }

    #[test]
    fn immediate_deviation() {
        let ds = subject(&[9.0, 9.1, 9.2], &[false, false, false]);
        let p = rule_path(&ds, &Regime::new(7.0, "a1c")).unwrap();
        assert_eq!(p.follows, vec![false, false, false]);
    }

    #[test]
    fn always_treat_is_followed_by_treated_subject() {
        let ds = subject(&[5.0, 6.0, 7.0], &[true, true, true]);
        let p = rule_path(&ds, &Regime::always_treat("a1c")).unwrap();
        assert_eq!(p.follows, vec![true, true, true]);
        let never = rule_path(&ds, &Regime::never_treat("a1c")).unwrap();
        assert_eq!(never.follows, vec![false, false, false]);
    }

    #[test]
    fn inclusive_flag_changes_boundary() {
        let ds = subject(&[8.0], &[true]);
        assert!(!rule_path(&ds, &Regime::new(8.0, "a1c")).unwrap().a_theta[0]);
        let inc = Regime {
            threshold_inclusive: true,
            ..Regime::new(8.0, "a1c")
        };
        assert!(rule_path(&ds, &inc).unwrap().a_theta[0]);
    }

    #[test]
    fn missing_biomarker_is_error() {
        let ds = subject(&[8.0], &[true]);
        assert!(rule_path(&ds, &Regime::new(8.0, "hba1c")).is_err());
    }

    proptest! {
        #[test]
        fn paths_are_monotone(
            bio in prop::collection::vec(5.0f64..11.0, 1..12),
            treat_seed in prop::collection::vec(any::<bool>(), 12),
            t1 in 5.0f64..11.0,
            dt in 0.0f64..3.0,
        ) {
            let treat = &treat_seed[..bio.len()];
            let ds = subject(&bio, treat);
            let low = rule_path(&ds, &Regime::new(t1, "a1c")).unwrap();
            let high = rule_path(&ds, &Regime::new(t1 + dt, "a1c")).unwrap();
            for k in 1..bio.len() {
                prop_assert!(low.a_theta[k] >= low.a_theta[k - 1]);
                prop_assert!(low.follows[k] <= low.follows[k - 1]);
            }
            for k in 0..bio.len() {
                prop_assert!(low.a_theta[k] >= high.a_theta[k]);
            }
        }
    }
}
