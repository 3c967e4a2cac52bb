//! Second-order gradient boosting of regression trees under logistic loss.
//!
//! Features are bucketed into at most `n_bins` quantile bins once per fit and
//! splits are searched over bin boundaries. The offset, when given, is the
//! base margin; the fitted base score sits on top of it.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{expit, fit_intercept, weighted_nll, FitDiagnostics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub subsample_rate: f64,
    pub column_subsample_rate: f64,
    pub min_child_weight: f64,
    /// Cap on |leaf value| before shrinkage; 0 disables the cap.
    pub max_delta_step: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            subsample_rate: 1.0,
            column_subsample_rate: 1.0,
            min_child_weight: 1.0,
            max_delta_step: 0.0,
            lambda: 1.0,
            n_bins: 64,
            seed: 0,
        }
    }
}

impl GbtParams {
    pub(super) fn check(&self) -> Result<(), String> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.learning_rate) {
            return Err(format!(
                "learning_rate {} not in (0, 1]",
                self.learning_rate
            ));
        }
        if !unit(self.subsample_rate) || !unit(self.column_subsample_rate) {
            return Err("subsample rates must lie in (0, 1]".into());
        }
        if !(self.min_child_weight >= 0.0) || !(self.max_delta_step >= 0.0) || !(self.lambda >= 0.0)
        {
            return Err("min_child_weight, max_delta_step and lambda must be >= 0".into());
        }
        if self.max_depth == 0 || self.max_depth > 16 {
            return Err(format!("max_depth {} not in 1..=16", self.max_depth));
        }
        if self.n_bins < 2 || self.n_bins > 1024 {
            return Err(format!("n_bins {} not in 2..=1024", self.n_bins));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn eval(&self, row: impl Fn(usize) -> f64) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row(*feature) <= *threshold {
                        *left
                    } else {
                        *right
                    };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf(_)))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn margin(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| self.base_score + self.trees.iter().map(|t| t.eval(|j| row[j])).sum::<f64>())
            .collect()
    }
}

/// Per-feature bin edges; value v falls in the first bin whose edge is >= v,
/// or in the overflow bin `edges.len()`.
struct Binned {
    edges: Vec<Vec<f64>>,
    /// Column-major bin codes.
    codes: Vec<Vec<u16>>,
}

fn bin_features(x: ArrayView2<'_, f64>, n_bins: usize) -> Binned {
    let p = x.ncols();
    let cols: Vec<(Vec<f64>, Vec<u16>)> = (0..p)
        .into_par_iter()
        .map(|j| {
            let col = x.column(j);
            let mut sorted: Vec<f64> = col.iter().copied().collect();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            let edges: Vec<f64> = if sorted.len() <= n_bins {
                sorted[..sorted.len().saturating_sub(1)].to_vec()
            } else {
                let mut e: Vec<f64> = (1..n_bins)
                    .map(|b| sorted[(b * sorted.len()) / n_bins - 1])
                    .collect();
                e.dedup();
                e
            };
            let codes = col
                .iter()
                .map(|v| edges.partition_point(|e| e < v) as u16)
                .collect();
            (edges, codes)
        })
        .collect();
    let (edges, codes) = cols.into_iter().unzip();
    Binned { edges, codes }
}

struct Grower<'a> {
    params: &'a GbtParams,
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    features: Vec<usize>,
}

impl Grower<'_> {
    fn leaf_value(&self, g: f64, h: f64) -> f64 {
        let mut v = -g / (h + self.params.lambda);
        if self.params.max_delta_step > 0.0 {
            v = v.clamp(-self.params.max_delta_step, self.params.max_delta_step);
        }
        v * self.params.learning_rate
    }

    fn best_split(&self, rows: &[usize], g: f64, h: f64) -> Option<(usize, usize, f64)> {
        let lambda = self.params.lambda;
        let parent = g * g / (h + lambda);
        self.features
            .par_iter()
            .filter_map(|&j| {
                let n_bins = self.binned.edges[j].len() + 1;
                if n_bins < 2 {
                    return None;
                }
                let codes = &self.binned.codes[j];
                let mut hg = vec![0.0; n_bins];
                let mut hh = vec![0.0; n_bins];
                for &r in rows {
                    let b = codes[r] as usize;
                    hg[b] += self.grad[r];
                    hh[b] += self.hess[r];
                }
                let (mut gl, mut hl) = (0.0, 0.0);
                let mut best: Option<(usize, f64)> = None;
                for b in 0..n_bins - 1 {
                    gl += hg[b];
                    hl += hh[b];
                    let (gr, hr) = (g - gl, h - hl);
                    if hl < self.params.min_child_weight || hr < self.params.min_child_weight {
                        continue;
                    }
                    if hl <= 0.0 || hr <= 0.0 {
                        continue;
                    }
                    let gain = gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent;
                    if gain > 1e-12 && best.is_none_or(|(_, bg)| gain > bg) {
                        best = Some((b, gain));
                    }
                }
                best.map(|(b, gain)| (j, b, gain))
            })
            .reduce_with(|a, b| {
                // deterministic: larger gain, then smaller feature index
                if b.2 > a.2 || (b.2 == a.2 && b.0 < a.0) {
                    b
                } else {
                    a
                }
            })
    }

    fn grow(&self, rows: Vec<usize>, depth: usize, nodes: &mut Vec<Node>) -> usize {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        let id = nodes.len();
        nodes.push(Node::Leaf(self.leaf_value(g, h)));
        if depth >= self.params.max_depth || rows.len() < 2 {
            return id;
        }
        let Some((feature, bin, _)) = self.best_split(&rows, g, h) else {
            return id;
        };
        let codes = &self.binned.codes[feature];
        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
            rows.into_iter().partition(|&r| (codes[r] as usize) <= bin);
        let left = self.grow(left_rows, depth + 1, nodes);
        let right = self.grow(right_rows, depth + 1, nodes);
        nodes[id] = Node::Split {
            feature,
            threshold: self.binned.edges[feature][bin],
            left,
            right,
        };
        id
    }
}

pub(super) fn fit(
    params: &GbtParams,
    x: ArrayView2<'_, f64>,
    y: &[f64],
    w: &[f64],
    offset: Option<&[f64]>,
) -> (GbtModel, FitDiagnostics) {
    let n = x.nrows();
    let p = x.ncols();
    let base_score = fit_intercept(y, w, offset, 30.0);
    let mut margin: Vec<f64> = (0..n)
        .map(|i| base_score + offset.map_or(0.0, |o| o[i]))
        .collect();
    let loss = |m: &[f64]| -> f64 {
        let prob: Vec<f64> = m.iter().map(|v| expit(*v)).collect();
        weighted_nll(y, &prob, w)
    };
    let mut diag = FitDiagnostics {
        converged: true,
        ..Default::default()
    };
    diag.loss_path.push(loss(&margin));

    let binned = bin_features(x, params.n_bins);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut trees = Vec::with_capacity(params.n_trees);
    let positive: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];

    for _ in 0..params.n_trees {
        for i in 0..n {
            let pr = expit(margin[i]);
            grad[i] = w[i] * (pr - y[i]);
            hess[i] = w[i] * pr * (1.0 - pr);
        }
        let rows: Vec<usize> = if params.subsample_rate < 1.0 {
            let k = ((positive.len() as f64 * params.subsample_rate).ceil() as usize).max(1);
            let mut r: Vec<usize> = positive.choose_multiple(&mut rng, k).copied().collect();
            r.sort_unstable();
            r
        } else {
            positive.clone()
        };
        let features: Vec<usize> = if params.column_subsample_rate < 1.0 && p > 0 {
            let k = ((p as f64 * params.column_subsample_rate).ceil() as usize).max(1);
            let mut f: Vec<usize> = (0..p)
                .collect::<Vec<_>>()
                .choose_multiple(&mut rng, k)
                .copied()
                .collect();
            f.sort_unstable();
            f
        } else {
            (0..p).collect()
        };
        let grower = Grower {
            params,
            binned: &binned,
            grad: &grad,
            hess: &hess,
            features,
        };
        let mut nodes = Vec::new();
        grower.grow(rows, 0, &mut nodes);
        let tree = Tree { nodes };
        for (i, row) in x.rows().into_iter().enumerate() {
            margin[i] += tree.eval(|j| row[j]);
        }
        trees.push(tree);
        diag.loss_path.push(loss(&margin));
    }
    diag.iterations = trees.len();
    diag.final_loss = *diag.loss_path.last().unwrap_or(&f64::NAN);
    (GbtModel { base_score, trees }, diag)
}
