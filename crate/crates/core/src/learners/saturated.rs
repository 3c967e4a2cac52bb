use std::collections::HashMap;

use ndarray::ArrayView2;
use serde::Serialize;

use super::{fit_intercept, FitDiagnostics};

const CAP: f64 = 40.0;

/// Logit-scale parameter per distinct design row. Rows whose cell was not seen
/// in training fall back to the pooled intercept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaturatedModel {
    #[serde(skip)]
    cells: HashMap<Vec<u64>, f64>,
    pub n_cells: usize,
    pub fallback: f64,
}

fn key(row: ndarray::ArrayView1<'_, f64>) -> Vec<u64> {
    // -0.0 and 0.0 share a cell
    row.iter()
        .map(|v| if *v == 0.0 { 0u64 } else { v.to_bits() })
        .collect()
}

pub(super) fn fit(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
) -> (SaturatedModel, FitDiagnostics) {
    let mut members: HashMap<Vec<u64>, Vec<usize>> = HashMap::new();
    let mut order = Vec::new();
    for (i, row) in x.rows().into_iter().enumerate() {
        if w[i] <= 0.0 {
            continue;
        }
        let k = key(row);
        let entry = members.entry(k.clone()).or_default();
        if entry.is_empty() {
            order.push(k);
        }
        entry.push(i);
    }
    let mut cells = HashMap::with_capacity(members.len());
    for k in order {
        let idx = &members[&k];
        let yc: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let wc: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
        let oc: Option<Vec<f64>> = offset.map(|o| idx.iter().map(|&i| o[i]).collect());
        cells.insert(k, fit_intercept(&yc, &wc, oc.as_deref(), CAP));
    }
    let fallback = fit_intercept(y, w, offset, CAP);
    let mut diag = FitDiagnostics {
        iterations: 1,
        converged: true,
        ..Default::default()
    };
    let margin: Vec<f64> = x
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            cells.get(&key(r)).copied().unwrap_or(fallback) + offset.map_or(0.0, |o| o[i])
        })
        .collect();
    let p: Vec<f64> = margin.iter().map(|m| super::expit(*m)).collect();
    diag.final_loss = super::weighted_nll(y, &p, w);
    let n_cells = cells.len();
    (
        SaturatedModel {
            cells,
            n_cells,
            fallback,
        },
        diag,
    )
}

impl SaturatedModel {
    pub fn margin(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| self.cells.get(&key(r)).copied().unwrap_or(self.fallback))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{expit, fit, LearnerSpec};
    use ndarray::array;

    #[test]
    fn reproduces_weighted_cell_means() {
        let x = array![[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]];
        let y = [1.0, 0.0, 1.0, 1.0, 0.0];
        let w = [3.0, 1.0, 1.0, 1.0, 2.0];
        let m = fit(&LearnerSpec::saturated("s"), x.view(), &y, &w, None).unwrap();
        let p = m.predict(x.view()).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
        assert!((p[2] - 0.5).abs() < 1e-12);
        // unseen cell -> pooled weighted mean
        let q = m.predict(array![[5.0, 5.0]].view()).unwrap();
        assert!((q[0] - 5.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn offset_cells_solve_their_score() {
        let x = array![[0.0], [0.0], [0.0], [1.0], [1.0]];
        let y = [1.0, 0.0, 0.4, 1.0, 0.3];
        let w = [1.0; 5];
        let off = [0.2, -0.5, 1.0, 0.0, 0.7];
        let m = fit(&LearnerSpec::saturated("s"), x.view(), &y, &w, Some(&off)).unwrap();
        let margin = m.margin(x.view(), Some(&off)).unwrap();
        let s0: f64 = (0..3).map(|i| y[i] - expit(margin[i])).sum();
        let s1: f64 = (3..5).map(|i| y[i] - expit(margin[i])).sum();
        assert!(s0.abs() < 1e-12 && s1.abs() < 1e-12);
    }
}
