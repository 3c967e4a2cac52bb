//! Bounded IPW comparator: one weighted discrete hazard per interval, mapped
//! to the cumulative risk 1 − ∏(1 − ĥ(k)).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LongDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpwFit {
    pub regime: String,
    pub t0: u32,
    /// ĥ(k) for k = 0..=t0.
    pub hazards: Vec<f64>,
    /// Cumulative risk through each k.
    pub risks: Vec<f64>,
    pub risk: f64,
    /// Weighted at-risk mass per k.
    pub mass: Vec<f64>,
}

/// ĥ(k) = Σ ŵt(k)·Y(k) / Σ ŵt(k) over uncensored rows at k.
pub fn ipw_estimate(ds: &LongDataset, weights: &[f64], regime: &str, t0: u32) -> Result<IpwFit> {
    if weights.len() != ds.n_rows() {
        return Err(Error::Mismatch(format!(
            "{} weights for {} rows",
            weights.len(),
            ds.n_rows()
        )));
    }
    if t0 > ds.max_t() {
        return Err(Error::Config(format!(
            "t0 = {t0} beyond the last interval {}",
            ds.max_t()
        )));
    }
    let m = t0 as usize + 1;
    let mut num = vec![0.0; m];
    let mut den = vec![0.0; m];
    for r in 0..ds.n_rows() {
        let k = ds.t(r) as usize;
        if k >= m {
            continue;
        }
        if let Some(y) = ds.y(r) {
            den[k] += weights[r];
            if y {
                num[k] += weights[r];
            }
        }
    }
    let mut hazards = Vec::with_capacity(m);
    let mut risks = Vec::with_capacity(m);
    let mut surv = 1.0;
    for k in 0..m {
        if !(den[k] > 0.0) {
            return Err(Error::Positivity(format!(
                "no weighted at-risk mass at k = {k} for regime {regime}"
            )));
        }
        let h = num[k] / den[k];
        surv *= 1.0 - h;
        hazards.push(h);
        risks.push(1.0 - surv);
    }
    Ok(IpwFit {
        regime: regime.to_string(),
        t0,
        risk: risks[m - 1],
        hazards,
        risks,
        mass: den,
    })
}

/// Nonparametric bootstrap over subjects. `estimate` maps a resampled
/// dataset to a vector of statistics (typically every (regime, t₀) risk,
/// refitting g inside); returns the per-statistic standard deviation across
/// successful replicates and the replicate matrix.
pub fn bootstrap<F>(ds: &LongDataset, reps: usize, seed: u64, estimate: F) -> Result<Bootstrap>
where
    F: Fn(&LongDataset) -> Result<Vec<f64>> + Sync,
{
    if reps < 2 {
        return Err(Error::Config(
            "bootstrap needs at least two replicates".into(),
        ));
    }
    let n = ds.n_subjects();
    let draws: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            estimate(&ds.resample_subjects(&idx)?)
        })
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for d in draws {
        match d {
            Ok(v) => replicates.push(v),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if replicates.len() < 2 {
        return Err(Error::Config(format!(
            "only {} bootstrap replicates succeeded; first failure: {}",
            replicates.len(),
            failures.first().cloned().unwrap_or_default()
        )));
    }
    Ok(Bootstrap {
        replicates,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub replicates: Vec<Vec<f64>>,
    pub failures: Vec<String>,
}

impl Bootstrap {
    /// Standard deviation of statistic `j` across replicates.
    pub fn se(&self, j: usize) -> f64 {
        self.se_of(|v| v[j])
    }

    /// Standard deviation of any function of a replicate.
    pub fn se_of(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        let v: Vec<f64> = self.replicates.iter().map(|r| f(r)).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CensorCause, PersonTimeRow};

    fn cohort(paths: &[(usize, bool)]) -> LongDataset {
        let mut rows = Vec::new();
        for (i, &(len, fail)) in paths.iter().enumerate() {
            for t in 0..len {
                let last = t + 1 == len;
                rows.push(PersonTimeRow {
                    subject_id: format!("{i}"),
                    t: t as u32,
                    covariates: vec![],
                    a_treat: false,
                    a_cens: CensorCause::None,
                    y: Some(last && fail),
                });
            }
        }
        LongDataset::from_rows_validated(vec![], rows).unwrap()
    }

    #[test]
    fn unit_weights_give_empirical_hazards() {
        let ds = cohort(&[(1, true), (2, true), (3, false), (3, false)]);
        let f = ipw_estimate(&ds, &vec![1.0; ds.n_rows()], "never", 2).unwrap();
        assert_eq!(f.hazards, vec![0.25, 1.0 / 3.0, 0.0]);
        assert!((f.risk - 0.5).abs() < 1e-15);
        assert!(f.risks.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_mass_is_a_positivity_failure() {
        let ds = cohort(&[(2, false), (2, false)]);
        let w: Vec<f64> = (0..ds.n_rows())
            .map(|r| if ds.t(r) == 0 { 1.0 } else { 0.0 })
            .collect();
        assert!(matches!(
            ipw_estimate(&ds, &w, "x", 1),
            Err(Error::Positivity(_))
        ));
    }

    #[test]
    fn risk_is_bounded_for_any_weights() {
        let ds = cohort(&[(1, true), (2, true), (3, false), (2, false)]);
        let w: Vec<f64> = (0..ds.n_rows())
            .map(|r| 1.0 + 97.0 * (r % 3) as f64)
            .collect();
        let f = ipw_estimate(&ds, &w, "x", 2).unwrap();
        assert!((0.0..=1.0).contains(&f.risk));
    }

    #[test]
    fn bootstrap_is_reproducible() {
        let ds = cohort(&[
            (1, true),
            (2, true),
            (3, false),
            (3, false),
            (2, true),
            (1, false),
        ]);
        let stat =
            |d: &LongDataset| Ok(vec![ipw_estimate(d, &vec![1.0; d.n_rows()], "x", 0)?.risk]);
        let a = bootstrap(&ds, 50, 3, stat).unwrap();
        let b = bootstrap(&ds, 50, 3, stat).unwrap();
        assert_eq!(a, b);
        assert!(a.se(0) > 0.0);
    }
}
