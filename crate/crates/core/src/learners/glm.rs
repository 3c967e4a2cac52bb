use ndarray::ArrayView2;
use serde::Serialize;

use super::linalg::solve_psd_aliased;
use super::{bernoulli_loss, expit, fit_intercept, FitDiagnostics};

const MAX_ITER: usize = 50;
const REL_TOL: f64 = 1e-8;
const ALIAS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    /// Columns found linearly dependent on earlier ones; their coefficient is 0.
    pub aliased: Vec<bool>,
}

impl LinearModel {
    pub fn margin(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                self.intercept
                    + row
                        .iter()
                        .zip(&self.coefficients)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }
}

struct Problem<'a, 'x> {
    x: ArrayView2<'x, f64>,
    y: &'a [f64],
    w: &'a [f64],
    offset: Option<&'a [f64]>,
    /// Penalty multiplier on the non-intercept coefficients (n * lambda).
    penalty: f64,
}

impl Problem<'_, '_> {
    fn eta(&self, beta: &[f64]) -> Vec<f64> {
        let mut eta = Vec::with_capacity(self.y.len());
        for (i, row) in self.x.rows().into_iter().enumerate() {
            let mut e = beta[0] + self.offset.map_or(0.0, |o| o[i]);
            for (xj, bj) in row.iter().zip(&beta[1..]) {
                e += xj * bj;
            }
            eta.push(e);
        }
        eta
    }

    fn objective(&self, beta: &[f64], eta: &[f64]) -> f64 {
        let mut obj = 0.0;
        for i in 0..self.y.len() {
            if self.w[i] > 0.0 {
                obj += self.w[i] * bernoulli_loss(self.y[i], expit(eta[i]));
            }
        }
        obj + 0.5 * self.penalty * beta[1..].iter().map(|b| b * b).sum::<f64>()
    }

    /// One Newton step from `beta`: returns the full-step solution.
    fn newton(&self, beta: &[f64], eta: &[f64]) -> (Vec<f64>, Vec<bool>) {
        let p1 = beta.len();
        let mut a = vec![0.0; p1 * p1];
        let mut rhs = vec![0.0; p1];
        let mut xt = vec![0.0; p1];
        xt[0] = 1.0;
        for (i, row) in self.x.rows().into_iter().enumerate() {
            let wi = self.w[i];
            if wi <= 0.0 {
                continue;
            }
            for (j, v) in row.iter().enumerate() {
                xt[j + 1] = *v;
            }
            let mu = expit(eta[i]);
            let v = (wi * mu * (1.0 - mu)).max(wi * 1e-12);
            let lin = eta[i] - self.offset.map_or(0.0, |o| o[i]);
            // X̃'W z with z = lin + (y − μ)/(μ(1 − μ))
            let zr = v * lin + wi * (self.y[i] - mu);
            for r in 0..p1 {
                let vr = v * xt[r];
                rhs[r] += zr * xt[r];
                for c in r..p1 {
                    a[r * p1 + c] += vr * xt[c];
                }
            }
        }
        for r in 0..p1 {
            for c in 0..r {
                a[r * p1 + c] = a[c * p1 + r];
            }
            if r > 0 {
                a[r * p1 + r] += self.penalty;
            }
        }
        solve_psd_aliased(&a, &rhs, p1, ALIAS_TOL)
    }
}

/// IRLS for (optionally ridge-penalized) logistic regression with offset.
/// Weights are expected to be normalized to mean one.
pub(super) fn fit_irls(
    x: ArrayView2<'_, f64>,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
    lambda: f64,
) -> (LinearModel, FitDiagnostics) {
    let p = x.ncols();
    let problem = Problem {
        x,
        y,
        w,
        offset,
        penalty: lambda * y.len() as f64,
    };
    let mut beta = vec![0.0; p + 1];
    beta[0] = fit_intercept(y, w, offset, 30.0);
    let mut eta = problem.eta(&beta);
    let mut obj = problem.objective(&beta, &eta);
    let mut aliased = vec![false; p + 1];
    let mut diag = FitDiagnostics {
        loss_path: vec![obj],
        ..Default::default()
    };
    let mut polished = false;

    for iter in 1..=MAX_ITER {
        diag.iterations = iter;
        let (mut next, al) = problem.newton(&beta, &eta);
        aliased = al;
        let mut next_eta = problem.eta(&next);
        let mut next_obj = problem.objective(&next, &next_eta);
        let mut halvings = 0;
        while !(next_obj <= obj * (1.0 + 1e-14) + 1e-300) && halvings < 30 {
            for (n, b) in next.iter_mut().zip(&beta) {
                *n = 0.5 * (*n + b);
            }
            next_eta = problem.eta(&next);
            next_obj = problem.objective(&next, &next_eta);
            halvings += 1;
        }
        if !(next_obj <= obj * (1.0 + 1e-14) + 1e-300) {
            // no descent possible from here
            diag.converged = true;
            break;
        }
        let change = (obj - next_obj).abs() / (next_obj.abs() + 0.1);
        beta = next;
        eta = next_eta;
        obj = next_obj;
        diag.loss_path.push(obj);
        if change < REL_TOL {
            if polished {
                diag.converged = true;
                break;
            }
            // one more Newton step to tighten the score equations
            polished = true;
        }
    }
    if !diag.converged {
        diag.notes.push(format!(
            "IRLS did not converge in {MAX_ITER} iterations; returning last iterate"
        ));
    }
    let total_w: f64 = w.iter().sum();
    diag.final_loss =
        (obj - 0.5 * problem.penalty * beta[1..].iter().map(|b| b * b).sum::<f64>()) / total_w;
    let model = LinearModel {
        intercept: beta[0],
        coefficients: beta[1..].to_vec(),
        aliased: aliased[1..].to_vec(),
    };
    (model, diag)
}

#[cfg(test)]
mod tests {
    use super::super::{fit, LearnerSpec, ModelParams};
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simulated(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((n, 3));
        let mut y = Vec::with_capacity(n);
        let mut w = Vec::with_capacity(n);
        for i in 0..n {
            let a: f64 = rng.gen::<f64>() * 2.0 - 1.0;
            let b: f64 = if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 };
            let c: f64 = rng.gen::<f64>();
            x[[i, 0]] = a;
            x[[i, 1]] = b;
            x[[i, 2]] = c;
            let p = expit(-0.3 + 1.2 * a - 0.8 * b + 0.5 * c);
            y.push(if rng.gen::<f64>() < p { 1.0 } else { 0.0 });
            w.push(0.5 + rng.gen::<f64>());
        }
        (x, y, w)
    }

    fn score(x: &Array2<f64>, y: &[f64], w: &[f64], p: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; x.ncols() + 1];
        for i in 0..y.len() {
            let r = w[i] * (y[i] - p[i]);
            s[0] += r;
            for j in 0..x.ncols() {
                s[j + 1] += r * x[[i, j]];
            }
        }
        s
    }

    #[test]
    fn irls_solves_weighted_score_equations() {
        let (x, y, w) = simulated(2000, 7);
        let off: Vec<f64> = (0..2000).map(|i| 0.1 * ((i % 5) as f64 - 2.0)).collect();
        let m = fit(&LearnerSpec::glm("g"), x.view(), &y, &w, Some(&off)).unwrap();
        assert!(m.diagnostics.converged);
        let p = m.predict_with_offset(x.view(), Some(&off)).unwrap();
        for s in score(&x, &y, &w, &p) {
            assert!(s.abs() < 1e-6, "score component {s}");
        }
    }

    #[test]
    fn fractional_responses_are_accepted() {
        let (x, y, w) = simulated(500, 3);
        let yf: Vec<f64> = y
            .iter()
            .enumerate()
            .map(|(i, v)| 0.5 * v + 0.25 * ((i % 3) as f64 / 2.0))
            .collect();
        let m = fit(&LearnerSpec::glm("g"), x.view(), &yf, &w, None).unwrap();
        let p = m.predict(x.view()).unwrap();
        for s in score(&x, &yf, &w, &p) {
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn weight_scaling_leaves_fit_unchanged() {
        let (x, y, w) = simulated(800, 11);
        let w2: Vec<f64> = w.iter().map(|v| v * 37.5).collect();
        for spec in [LearnerSpec::glm("g"), LearnerSpec::l2("r", 0.05)] {
            let a = fit(&spec, x.view(), &y, &w, None)
                .unwrap()
                .predict(x.view())
                .unwrap();
            let b = fit(&spec, x.view(), &y, &w2, None)
                .unwrap()
                .predict(x.view())
                .unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn huge_ridge_penalty_shrinks_coefficients() {
        let (x, y, w) = simulated(1000, 5);
        let coef_norm = |spec: &LearnerSpec| {
            let m = fit(spec, x.view(), &y, &w, None).unwrap();
            let ModelParams::Linear(l) = m.params else {
                panic!()
            };
            l.coefficients.iter().map(|c| c * c).sum::<f64>().sqrt()
        };
        let free = coef_norm(&LearnerSpec::glm("g"));
        let shrunk = coef_norm(&LearnerSpec::l2("r", 1e6));
        assert!(free > 0.5);
        assert!(shrunk < 1e-4 * free, "{shrunk} vs {free}");
    }

    #[test]
    fn collinear_columns_are_aliased() {
        let (x, y, w) = simulated(300, 9);
        let mut xd = Array2::zeros((300, 5));
        for i in 0..300 {
            xd[[i, 0]] = x[[i, 0]];
            xd[[i, 1]] = x[[i, 0]];
            xd[[i, 2]] = 0.0;
            xd[[i, 3]] = x[[i, 1]];
            xd[[i, 4]] = x[[i, 2]];
        }
        let full = fit(&LearnerSpec::glm("g"), x.view(), &y, &w, None).unwrap();
        let dup = fit(&LearnerSpec::glm("g"), xd.view(), &y, &w, None).unwrap();
        let ModelParams::Linear(l) = &dup.params else {
            panic!()
        };
        assert_eq!(l.aliased, vec![false, true, true, false, false]);
        let a = full.predict(x.view()).unwrap();
        let b = dup.predict(xd.view()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-9);
        }
    }
}
