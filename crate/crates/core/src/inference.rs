//! Influence-curve inference: EIC assembly, plug-in variance, Wald intervals
//! and risk differences, plus the report types shared by all estimators.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::propensity::WeightSummary;
use crate::tmle::TmleFit;

/// Per-subject efficient influence curve of one TMLE fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EicVector {
    /// Q̂*_0(A^θ(0), f_0) − ψ̂.
    pub d0: Vec<f64>,
    /// Σ_k ŵt(k)(Q̃_{k+1} − Q̂*_k).
    pub residual: Vec<f64>,
    pub total: Vec<f64>,
}

impl EicVector {
    pub fn mean(&self) -> f64 {
        self.total.iter().sum::<f64>() / self.total.len() as f64
    }
}

pub fn eic(fit: &TmleFit) -> EicVector {
    let d0: Vec<f64> = fit.q0_star.iter().map(|q| q - fit.psi).collect();
    let mut residual = vec![0.0; d0.len()];
    for step in &fit.residuals {
        for &(s, v) in step {
            residual[s] += v;
        }
    }
    let total = d0.iter().zip(&residual).map(|(a, b)| a + b).collect();
    EicVector {
        d0,
        residual,
        total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wald {
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Standard normal quantile for a two-sided interval at `level`.
pub fn z_value(level: f64) -> f64 {
    Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0)
}

/// se = sqrt(mean(D²) / n) and estimate ± z·se.
pub fn wald(estimate: f64, eic: &[f64], level: f64) -> Result<Wald> {
    if eic.len() < 2 {
        return Err(Error::Config(
            "need at least two subjects for a variance".into(),
        ));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let n = eic.len() as f64;
    let sigma2 = eic.iter().map(|d| d * d).sum::<f64>() / n;
    let se = (sigma2 / n).sqrt();
    let z = z_value(level);
    Ok(Wald {
        se,
        lo: estimate - z * se,
        hi: estimate + z * se,
    })
}

/// One risk estimate with its interval, clipped to [0, 1] and raw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimator: String,
    pub regime: String,
    pub t0: u32,
    pub risk: f64,
    pub survival: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub ci_lo_raw: f64,
    pub ci_hi_raw: f64,
}

impl Estimate {
    pub fn new(estimator: &str, regime: &str, t0: u32, risk: f64, w: Wald) -> Self {
        Estimate {
            estimator: estimator.to_string(),
            regime: regime.to_string(),
            t0,
            risk,
            survival: 1.0 - risk,
            se: w.se,
            ci_lo: w.lo.clamp(0.0, 1.0),
            ci_hi: w.hi.clamp(0.0, 1.0),
            ci_lo_raw: w.lo,
            ci_hi_raw: w.hi,
        }
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_lo <= truth && truth <= self.ci_hi
    }
}

/// ψ̂₁ − ψ̂₂; intervals are never clipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskDifference {
    pub estimator: String,
    pub regime1: String,
    pub regime2: String,
    pub t0: u32,
    pub rd: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

pub fn tmle_estimate_report(fit: &TmleFit, eic: &EicVector, level: f64) -> Result<Estimate> {
    Ok(Estimate::new(
        "tmle",
        &fit.regime,
        fit.t0,
        fit.psi,
        wald(fit.psi, &eic.total, level)?,
    ))
}

/// Delta-method risk difference from paired EICs on the same cohort.
pub fn risk_difference(
    fit1: &TmleFit,
    fit2: &TmleFit,
    eic1: &EicVector,
    eic2: &EicVector,
    level: f64,
) -> Result<RiskDifference> {
    if fit1.t0 != fit2.t0 || eic1.total.len() != eic2.total.len() {
        return Err(Error::Mismatch(format!(
            "risk difference needs the same cohort and horizon (t0 {} vs {}, n {} vs {})",
            fit1.t0,
            fit2.t0,
            eic1.total.len(),
            eic2.total.len()
        )));
    }
    let rd = fit1.psi - fit2.psi;
    let d: Vec<f64> = eic1
        .total
        .iter()
        .zip(&eic2.total)
        .map(|(a, b)| a - b)
        .collect();
    let w = wald(rd, &d, level)?;
    Ok(RiskDifference {
        estimator: "tmle".into(),
        regime1: fit1.regime.clone(),
        regime2: fit2.regime.clone(),
        t0: fit1.t0,
        rd,
        se: w.se,
        ci_lo: w.lo,
        ci_hi: w.hi,
    })
}

/// Everything an analysis run reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub metadata: serde_json::Value,
    pub estimates: Vec<Estimate>,
    pub risk_differences: Vec<RiskDifference>,
    pub weight_summaries: Vec<WeightSummary>,
    pub diagnostics: serde_json::Value,
}

impl EstimateReport {
    pub fn write_estimates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.estimates {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_risk_differences_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.risk_differences {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_weights_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for e in &self.weight_summaries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Plot-ready curve (t0, estimate, lo, hi) for one estimator and regime.
    pub fn write_curve<W: Write>(&self, estimator: &str, regime: &str, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t0", "estimate", "lo", "hi"])?;
        let mut rows: Vec<&Estimate> = self
            .estimates
            .iter()
            .filter(|e| e.estimator == estimator && e.regime == regime)
            .collect();
        rows.sort_by_key(|e| e.t0);
        for e in rows {
            w.write_record([
                e.t0.to_string(),
                e.risk.to_string(),
                e.ci_lo.to_string(),
                e.ci_hi.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Curve of one risk difference (t0, rd, lo, hi).
    pub fn write_rd_curve<W: Write>(
        &self,
        estimator: &str,
        regime1: &str,
        regime2: &str,
        writer: W,
    ) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t0", "estimate", "lo", "hi"])?;
        let mut rows: Vec<&RiskDifference> = self
            .risk_differences
            .iter()
            .filter(|e| e.estimator == estimator && e.regime1 == regime1 && e.regime2 == regime2)
            .collect();
        rows.sort_by_key(|e| e.t0);
        for e in rows {
            w.write_record([
                e.t0.to_string(),
                e.rd.to_string(),
                e.ci_lo.to_string(),
                e.ci_hi.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tmle::Mode;

    fn fit_with(psi: f64, q0: Vec<f64>, residuals: Vec<Vec<(usize, f64)>>) -> TmleFit {
        TmleFit {
            regime: "d7".into(),
            t0: 1,
            mode: Mode::Stratified,
            psi,
            q0_star: q0,
            residuals,
            steps: vec![],
            working: None,
        }
    }

    #[test]
    fn zero_eic_gives_point_interval() {
        let w = wald(0.3, &[0.0; 10], 0.95).unwrap();
        assert_eq!((w.se, w.lo, w.hi), (0.0, 0.3, 0.3));
    }

    #[test]
    fn unit_eic_gives_tenth() {
        let d: Vec<f64> = (0..100)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let w = wald(0.5, &d, 0.95).unwrap();
        assert!((w.se - 0.1).abs() < 1e-15);
        assert!((w.hi - 0.5 - 1.959963984540054 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn residual_free_eic_is_centered_q0() {
        let f = fit_with(0.25, vec![0.1, 0.2, 0.3, 0.4], vec![vec![], vec![]]);
        let e = eic(&f);
        assert_eq!(
            e.total,
            vec![0.1 - 0.25, 0.2 - 0.25, 0.3 - 0.25, 0.4 - 0.25]
        );
        let w = wald(f.psi, &e.total, 0.95).unwrap();
        let var = e.total.iter().map(|d| d * d).sum::<f64>() / 4.0;
        assert!((w.se - (var / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn risk_difference_with_itself_is_exactly_zero() {
        let f = fit_with(
            0.3,
            vec![0.1, 0.5, 0.3],
            vec![vec![(0, 0.2)], vec![(2, -0.1)]],
        );
        let e = eic(&f);
        let rd = risk_difference(&f, &f, &e, &e, 0.95).unwrap();
        assert_eq!((rd.rd, rd.se), (0.0, 0.0));
    }

    #[test]
    fn risk_difference_obeys_cauchy_schwarz() {
        let a = fit_with(
            0.3,
            vec![0.1, 0.5, 0.3, 0.3],
            vec![vec![(0, 0.2), (3, -0.3)]],
        );
        let b = fit_with(0.2, vec![0.2, 0.1, 0.4, 0.1], vec![vec![(1, 0.4)]]);
        let (ea, eb) = (eic(&a), eic(&b));
        let rd = risk_difference(&a, &b, &ea, &eb, 0.95).unwrap();
        let va = wald(a.psi, &ea.total, 0.95).unwrap().se.powi(2);
        let vb = wald(b.psi, &eb.total, 0.95).unwrap().se.powi(2);
        assert!(rd.se.powi(2) <= va + vb + 2.0 * (va * vb).sqrt() + 1e-15);
        assert!((rd.rd - 0.1).abs() < 1e-15);
        let short = fit_with(0.2, vec![0.2, 0.1], vec![]);
        assert!(risk_difference(&a, &short, &ea, &eic(&short), 0.95).is_err());
    }

    #[test]
    fn clipped_and_raw_intervals() {
        let e = Estimate::new(
            "tmle",
            "d7",
            0,
            0.01,
            Wald {
                se: 0.02,
                lo: -0.03,
                hi: 0.05,
            },
        );
        assert_eq!((e.ci_lo, e.ci_lo_raw), (0.0, -0.03));
        assert!(e.covers(0.0));
    }
}
