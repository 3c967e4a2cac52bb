//! Synthetic data with known counterfactual truth.
//!
//! Each subject carries a binary baseline covariate `u` and a biomarker
//! `a1c`. Within an interval k the biomarker is drawn first, then treatment,
//! then the censoring causes in order, then the outcome; every law is a
//! logistic function of the measured past, so sequential randomization holds
//! by construction. Treatment and censoring probabilities are clamped to
//! `[delta, 1 - delta]` (censoring only from above) to guarantee positivity.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coarsen::{DailyEventStream, Observation};
use crate::data::{CensorCause, LongDataset, PersonTimeRow};
use crate::error::{Error, Result};
use crate::learners::expit;
use crate::propensity::GPredictions;
use crate::regimes::Regime;

pub const U_COLUMN: &str = "u";
pub const BIOMARKER_COLUMN: &str = "a1c";

/// expit(intercept + u·U + biomarker·(L − center) + treat·A + time·k).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Logistic {
    pub intercept: f64,
    #[serde(default)]
    pub u: f64,
    #[serde(default)]
    pub biomarker: f64,
    #[serde(default)]
    pub treat: f64,
    #[serde(default)]
    pub time: f64,
}

impl Logistic {
    pub fn constant(intercept: f64) -> Self {
        Logistic {
            intercept,
            ..Default::default()
        }
    }

    fn linear(&self, u: f64, centered: f64, a: bool, k: u32) -> f64 {
        self.intercept
            + self.u * u
            + self.biomarker * centered
            + if a { self.treat } else { 0.0 }
            + self.time * f64::from(k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BiomarkerLaw {
    /// Gaussian random walk: L(0) ~ N(mean0 + u_shift·U, sd0²),
    /// L(k) = L(k−1) + drift − treat_drop·A(k−1) + N(0, sd²).
    Continuous {
        mean0: f64,
        u_shift: f64,
        sd0: f64,
        drift: f64,
        treat_drop: f64,
        sd: f64,
    },
    /// Finite ladder of levels. The initial level is drawn from `init[U]`;
    /// afterwards the level moves up one step with probability `up`,
    /// otherwise down one step with probability `down`, otherwise stays
    /// (moves off the ladder stay put). Both laws see A(k−1) as treatment.
    Discrete {
        levels: Vec<f64>,
        init: [Vec<f64>; 2],
        up: Logistic,
        down: Logistic,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dgp {
    pub name: String,
    /// Last interval index τ.
    pub horizon: u32,
    pub p_u: f64,
    pub center: f64,
    pub biomarker: BiomarkerLaw,
    pub init: Logistic,
    pub cont: Logistic,
    pub disenroll: Option<Logistic>,
    pub death: Option<Logistic>,
    /// Constant hazard of administrative end of follow-up.
    pub admin: f64,
    pub outcome: Logistic,
    pub delta: f64,
}

impl Dgp {
    /// Study-shaped scenario on a coarse (90-day) unit, τ = 7: continuous
    /// biomarker that drives initiation and failure, treatment lowers the
    /// biomarker and the hazard, so delaying treatment is harmful.
    pub fn default_scenario() -> Self {
        Dgp {
            name: "default".into(),
            horizon: 7,
            p_u: 0.4,
            center: 7.5,
            biomarker: BiomarkerLaw::Continuous {
                mean0: 7.4,
                u_shift: 0.4,
                sd0: 0.8,
                drift: 0.12,
                treat_drop: 0.35,
                sd: 0.35,
            },
            init: Logistic {
                intercept: -1.4,
                u: -0.5,
                biomarker: 1.2,
                treat: 0.0,
                time: 0.05,
            },
            cont: Logistic {
                intercept: 2.5,
                u: 0.0,
                biomarker: 0.3,
                treat: 0.0,
                time: 0.0,
            },
            disenroll: Some(Logistic {
                intercept: -3.0,
                u: 0.4,
                biomarker: 0.0,
                treat: 0.3,
                time: 0.0,
            }),
            death: Some(Logistic {
                intercept: -4.5,
                u: 0.3,
                biomarker: 0.4,
                treat: 0.0,
                time: 0.0,
            }),
            admin: 0.03,
            outcome: Logistic {
                intercept: -3.0,
                u: 0.5,
                biomarker: 0.6,
                treat: -0.6,
                time: 0.05,
            },
            delta: 0.005,
        }
    }

    /// Finite-support scenario (three biomarker levels, τ = 3) with strong
    /// confounding by `u`; iterated outcome regressions are saturated in
    /// (u, a1c(k), A(k−1), A(k)), so exact truth and correctly specified
    /// outcome models are both available.
    pub fn discrete_scenario() -> Self {
        Dgp {
            name: "discrete".into(),
            horizon: 3,
            p_u: 0.5,
            center: 7.5,
            biomarker: BiomarkerLaw::Discrete {
                levels: vec![6.5, 7.5, 8.5],
                init: [vec![0.4, 0.4, 0.2], vec![0.2, 0.4, 0.4]],
                up: Logistic {
                    intercept: -1.2,
                    u: 0.6,
                    biomarker: 0.0,
                    treat: -1.0,
                    time: 0.0,
                },
                down: Logistic {
                    intercept: -1.5,
                    u: 0.0,
                    biomarker: 0.0,
                    treat: 1.2,
                    time: 0.0,
                },
            },
            init: Logistic {
                intercept: 0.0,
                u: -0.8,
                biomarker: 1.0,
                treat: 0.0,
                time: 0.1,
            },
            cont: Logistic {
                intercept: 2.2,
                u: -0.5,
                biomarker: 0.3,
                treat: 0.0,
                time: 0.0,
            },
            disenroll: Some(Logistic {
                intercept: -3.0,
                u: 0.5,
                biomarker: 0.0,
                treat: 0.3,
                time: 0.0,
            }),
            death: Some(Logistic {
                intercept: -3.5,
                u: 0.0,
                biomarker: 0.5,
                treat: 0.0,
                time: 0.0,
            }),
            admin: 0.03,
            outcome: Logistic {
                intercept: -2.2,
                u: 1.2,
                biomarker: 0.7,
                treat: -0.8,
                time: 0.1,
            },
            delta: 0.005,
        }
    }

    /// Smallest world: binary baseline, binary time-varying biomarker,
    /// τ = 2, no censoring.
    pub fn binary_world() -> Self {
        Dgp {
            name: "binary".into(),
            horizon: 2,
            p_u: 0.5,
            center: 7.5,
            biomarker: BiomarkerLaw::Discrete {
                levels: vec![7.0, 8.0],
                init: [vec![0.6, 0.4], vec![0.4, 0.6]],
                up: Logistic {
                    intercept: 0.0,
                    u: 0.5,
                    biomarker: 0.0,
                    treat: -1.0,
                    time: 0.0,
                },
                down: Logistic {
                    intercept: 0.0,
                    u: 0.0,
                    biomarker: 0.0,
                    treat: 1.0,
                    time: 0.0,
                },
            },
            init: Logistic {
                intercept: -0.4,
                u: -0.5,
                biomarker: 1.5,
                treat: 0.0,
                time: 0.0,
            },
            cont: Logistic {
                intercept: 2.0,
                u: 0.0,
                biomarker: 0.5,
                treat: 0.0,
                time: 0.0,
            },
            disenroll: None,
            death: None,
            admin: 0.0,
            outcome: Logistic {
                intercept: -1.5,
                u: 0.5,
                biomarker: 0.8,
                treat: -0.7,
                time: 0.1,
            },
            delta: 0.005,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default_scenario()),
            "discrete" => Ok(Self::discrete_scenario()),
            "binary" => Ok(Self::binary_world()),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (default, discrete, binary)"
            ))),
        }
    }

    /// The same scenario on intervals `factor` times shorter: hazards are
    /// rescaled on the log scale, random-walk increments are shrunk, and the
    /// horizon covers the same calendar span.
    pub fn refined(&self, factor: u32) -> Self {
        let r = f64::from(factor);
        let shift = -r.ln();
        let mut d = self.clone();
        d.name = format!("{}/{factor}", self.name);
        d.horizon = (self.horizon + 1) * factor - 1;
        let hazard = |l: &Logistic| Logistic {
            intercept: l.intercept + shift,
            time: l.time / r,
            ..*l
        };
        d.init = hazard(&self.init);
        d.cont = Logistic {
            intercept: self.cont.intercept - shift,
            time: self.cont.time / r,
            ..self.cont
        };
        d.disenroll = self.disenroll.as_ref().map(hazard);
        d.death = self.death.as_ref().map(hazard);
        d.admin = 1.0 - (1.0 - self.admin).powf(1.0 / r);
        d.outcome = hazard(&self.outcome);
        if let BiomarkerLaw::Continuous {
            mean0,
            u_shift,
            sd0,
            drift,
            treat_drop,
            sd,
        } = self.biomarker
        {
            d.biomarker = BiomarkerLaw::Continuous {
                mean0,
                u_shift,
                sd0,
                drift: drift / r,
                treat_drop: treat_drop / r,
                sd: sd / r.sqrt(),
            };
        }
        d
    }

    pub fn check(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 0.5) {
            return Err(Error::Config("delta must lie in (0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_u) || !(0.0..1.0).contains(&self.admin) {
            return Err(Error::Config(
                "p_u and admin must be probabilities (admin < 1)".into(),
            ));
        }
        if let BiomarkerLaw::Discrete { levels, init, .. } = &self.biomarker {
            if levels.is_empty() || init.iter().any(|p| p.len() != levels.len()) {
                return Err(Error::Config(
                    "discrete biomarker: init laws must match the level count".into(),
                ));
            }
            if init
                .iter()
                .any(|p| (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 || p.iter().any(|v| *v < 0.0))
            {
                return Err(Error::Config(
                    "discrete biomarker: init laws must be probability vectors".into(),
                ));
            }
        }
        Ok(())
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.delta, 1.0 - self.delta)
    }

    /// P(A^T(k) = 1 | U, L(k), A(k−1)).
    pub fn p_treat(&self, u: f64, l: f64, prev: bool, k: u32) -> f64 {
        let law = if prev { &self.cont } else { &self.init };
        self.clamp(expit(law.linear(u, l - self.center, false, k)))
    }

    /// Discrete hazards of disenrollment, death and administrative end.
    pub fn cause_hazards(&self, u: f64, l: f64, a: bool, k: u32) -> [f64; 3] {
        let h = |law: &Option<Logistic>| {
            law.as_ref().map_or(0.0, |m| {
                expit(m.linear(u, l - self.center, a, k)).min(1.0 - self.delta)
            })
        };
        [
            h(&self.disenroll),
            h(&self.death),
            self.admin.min(1.0 - self.delta),
        ]
    }

    pub fn hazard(&self, u: f64, l: f64, a: bool, k: u32) -> f64 {
        expit(self.outcome.linear(u, l - self.center, a, k))
    }

    fn draw_initial(&self, u: f64, rng: &mut ChaCha8Rng) -> (f64, usize) {
        match &self.biomarker {
            BiomarkerLaw::Continuous {
                mean0,
                u_shift,
                sd0,
                ..
            } => {
                let z: f64 = rng.sample(StandardNormal);
                (mean0 + u_shift * u + sd0 * z, 0)
            }
            BiomarkerLaw::Discrete { levels, init, .. } => {
                let law = &init[usize::from(u > 0.5)];
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                let mut idx = law.len() - 1;
                for (i, p) in law.iter().enumerate() {
                    acc += p;
                    if r < acc {
                        idx = i;
                        break;
                    }
                }
                (levels[idx], idx)
            }
        }
    }

    /// Transition law of the level index: (probability, next index) pairs.
    fn level_moves(&self, u: f64, idx: usize, prev: bool, k: u32) -> Vec<(f64, usize)> {
        let BiomarkerLaw::Discrete {
            levels, up, down, ..
        } = &self.biomarker
        else {
            unreachable!("level moves on a continuous biomarker")
        };
        let l = levels[idx] - self.center;
        let p_up = expit(up.linear(u, l, prev, k));
        let p_down = (1.0 - p_up) * expit(down.linear(u, l, prev, k));
        let top = levels.len() - 1;
        let mut moves: Vec<(f64, usize)> = Vec::with_capacity(3);
        let mut push = |p: f64, j: usize| match moves.iter_mut().find(|m| m.1 == j) {
            Some(m) => m.0 += p,
            None => moves.push((p, j)),
        };
        push(p_up, if idx < top { idx + 1 } else { idx });
        push(p_down, idx.saturating_sub(1));
        push(1.0 - p_up - p_down, idx);
        moves
    }

    fn draw_next(
        &self,
        u: f64,
        l: f64,
        idx: usize,
        prev: bool,
        k: u32,
        rng: &mut ChaCha8Rng,
    ) -> (f64, usize) {
        match &self.biomarker {
            BiomarkerLaw::Continuous {
                drift,
                treat_drop,
                sd,
                ..
            } => {
                let z: f64 = rng.sample(StandardNormal);
                (l + drift - if prev { *treat_drop } else { 0.0 } + sd * z, 0)
            }
            BiomarkerLaw::Discrete { levels, .. } => {
                let r: f64 = rng.gen();
                let mut acc = 0.0;
                let moves = self.level_moves(u, idx, prev, k);
                let mut next = moves[moves.len() - 1].1;
                for (p, j) in moves {
                    acc += p;
                    if r < acc {
                        next = j;
                        break;
                    }
                }
                (levels[next], next)
            }
        }
    }
}

fn subject_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Observed-data trajectory of one subject.
#[derive(Debug, Clone, PartialEq)]
struct Trajectory {
    u: f64,
    biomarker: Vec<f64>,
    treat: Vec<bool>,
    /// Interval of the terminal event and its kind, if any.
    end: Option<(u32, Terminal)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Terminal {
    Failure,
    Censored(CensorCause),
}

fn simulate_subject(dgp: &Dgp, rng: &mut ChaCha8Rng) -> Trajectory {
    let u = if rng.gen::<f64>() < dgp.p_u { 1.0 } else { 0.0 };
    let (mut l, mut idx) = dgp.draw_initial(u, rng);
    let mut prev = false;
    let mut tr = Trajectory {
        u,
        biomarker: Vec::new(),
        treat: Vec::new(),
        end: None,
    };
    for k in 0..=dgp.horizon {
        if k > 0 {
            (l, idx) = dgp.draw_next(u, l, idx, prev, k, rng);
        }
        let a = rng.gen::<f64>() < dgp.p_treat(u, l, prev, k);
        tr.biomarker.push(l);
        tr.treat.push(a);
        let hz = dgp.cause_hazards(u, l, a, k);
        for (c, h) in CensorCause::CAUSES.iter().zip(hz) {
            if rng.gen::<f64>() < h {
                tr.end = Some((k, Terminal::Censored(*c)));
                return tr;
            }
        }
        if rng.gen::<f64>() < dgp.hazard(u, l, a, k) {
            tr.end = Some((k, Terminal::Failure));
            return tr;
        }
        prev = a;
    }
    tr
}

fn subject_id(i: usize) -> String {
    format!("s{i}")
}

fn trajectories(dgp: &Dgp, n: usize, seed: u64) -> Vec<Trajectory> {
    (0..n)
        .into_par_iter()
        .map(|i| simulate_subject(dgp, &mut subject_rng(seed, i as u64)))
        .collect()
}

/// Interval-native sample with columns `u` and `a1c`.
pub fn simulate(dgp: &Dgp, n: usize, seed: u64) -> Result<LongDataset> {
    dgp.check()?;
    if n == 0 {
        return Err(Error::Config("need at least one subject".into()));
    }
    let mut rows = Vec::new();
    for (i, tr) in trajectories(dgp, n, seed).into_iter().enumerate() {
        let id = subject_id(i);
        for k in 0..tr.biomarker.len() {
            let last = k + 1 == tr.biomarker.len();
            let (a_cens, y) = match tr.end {
                Some((_, Terminal::Failure)) if last => (CensorCause::None, Some(true)),
                Some((_, Terminal::Censored(c))) if last => (c, None),
                _ => (CensorCause::None, Some(false)),
            };
            rows.push(PersonTimeRow {
                subject_id: id.clone(),
                t: k as u32,
                covariates: vec![tr.u, tr.biomarker[k]],
                a_treat: tr.treat[k],
                a_cens,
                y,
            });
        }
    }
    LongDataset::from_rows_validated(vec![U_COLUMN.into(), BIOMARKER_COLUMN.into()], rows)
}

/// Daily-resolution version of [`simulate`] for intervals of `unit_days`
/// days: the biomarker is recorded on an interval's first day with
/// probability `obs_prob` (always at entry), treated intervals become
/// treatment episodes, and events fall on a uniformly drawn day of their
/// interval. Coarsening at `unit_days` with `max_intervals = horizon + 1`
/// recovers the interval-native sample whenever `obs_prob = 1`.
pub fn simulate_daily(
    dgp: &Dgp,
    n: usize,
    seed: u64,
    unit_days: u32,
    obs_prob: f64,
) -> Result<Vec<DailyEventStream>> {
    dgp.check()?;
    if unit_days == 0 {
        return Err(Error::Config("time unit must be at least one day".into()));
    }
    let u = i64::from(unit_days);
    let streams = trajectories(dgp, n, seed)
        .into_par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let mut rng = subject_rng(seed ^ 0x5eed_da11, i as u64);
            let n_int = tr.biomarker.len() as i64;
            let mut s = DailyEventStream {
                subject_id: subject_id(i),
                entry_day: 0,
                // one day past the horizon: coarsening truncates instead of censoring
                end_day: (i64::from(dgp.horizon) + 1) * u,
                ..Default::default()
            };
            let event_day = |k: u32, rng: &mut ChaCha8Rng| i64::from(k) * u + rng.gen_range(0..u);
            match tr.end {
                Some((k, Terminal::Failure)) => {
                    let d = event_day(k, &mut rng);
                    s.failure_day = Some(d);
                    s.end_day = d;
                }
                Some((k, Terminal::Censored(CensorCause::Admin))) => {
                    s.end_day = event_day(k, &mut rng)
                }
                Some((k, Terminal::Censored(c))) => {
                    let d = event_day(k, &mut rng);
                    s.censor = Some((d, c));
                    s.end_day = d;
                }
                None => {}
            }
            s.observations.push(Observation {
                day: 0,
                name: U_COLUMN.into(),
                value: tr.u,
            });
            for k in 0..n_int {
                if k == 0 || rng.gen::<f64>() < obs_prob {
                    s.observations.push(Observation {
                        day: k * u,
                        name: BIOMARKER_COLUMN.into(),
                        value: tr.biomarker[k as usize],
                    });
                }
            }
            let mut k = 0;
            while k < n_int {
                if tr.treat[k as usize] {
                    let start = k;
                    while k + 1 < n_int && tr.treat[k as usize + 1] {
                        k += 1;
                    }
                    s.episodes
                        .push((start * u, ((k + 1) * u - 1).min(s.end_day)));
                }
                k += 1;
            }
            s
        })
        .collect();
    Ok(streams)
}

/// Analyst-facing covariate sets used to build misspecified analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalystView {
    Full,
    /// Drops the baseline confounder `u`.
    OmitConfounder,
    /// Adds `a1c_exp` = exp(a1c − 7.5); a misspecified analysis models it in
    /// place of `a1c` while the rule keeps reading `a1c`.
    Transformed,
}

/// Rewrites the covariates of a simulated dataset for `view`.
pub fn analyst_view(ds: &LongDataset, view: AnalystView) -> Result<LongDataset> {
    let u = ds.covariate_index(U_COLUMN)?;
    let l = ds.covariate_index(BIOMARKER_COLUMN)?;
    let n = ds.n_rows();
    match view {
        AnalystView::Full => Ok(ds.clone()),
        AnalystView::OmitConfounder => {
            let x = ndarray::Array2::from_shape_fn((n, 1), |(r, _)| ds.covariate(r, l));
            ds.with_covariates(vec![BIOMARKER_COLUMN.into()], x)
        }
        AnalystView::Transformed => {
            let x = ndarray::Array2::from_shape_fn((n, 3), |(r, j)| match j {
                0 => ds.covariate(r, u),
                1 => ds.covariate(r, l),
                _ => (ds.covariate(r, l) - 7.5).exp(),
            });
            ds.with_covariates(
                vec![U_COLUMN.into(), BIOMARKER_COLUMN.into(), "a1c_exp".into()],
                x,
            )
        }
    }
}

/// The data-generating treatment and censoring probabilities on every row of
/// a full-view simulated dataset.
pub fn true_g(dgp: &Dgp, ds: &LongDataset) -> Result<GPredictions> {
    let u = ds.covariate_index(U_COLUMN)?;
    let l = ds.covariate_index(BIOMARKER_COLUMN)?;
    let n = ds.n_rows();
    let mut p_treat = Vec::with_capacity(n);
    let mut hz: [Vec<f64>; 3] = [
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    ];
    for r in 0..n {
        let (uv, lv, k) = (ds.covariate(r, u), ds.covariate(r, l), ds.t(r));
        p_treat.push(dgp.p_treat(uv, lv, ds.a_treat_prev(r), k));
        for (c, h) in dgp
            .cause_hazards(uv, lv, ds.a_treat(r), k)
            .into_iter()
            .enumerate()
        {
            hz[c].push(h);
        }
    }
    Ok(GPredictions {
        p_treat,
        cause_hazard: hz,
    })
}

/// Default bound on the number of enumerated histories.
pub const ENUMERATION_BUDGET: u128 = 50_000_000;

/// Exact counterfactual risk P(Y^θ(t₀) = 1) by iterated conditional
/// expectations over every biomarker history, censoring forced off.
pub fn gcomp_exact(dgp: &Dgp, regime: &Regime, t0: u32, budget: u128) -> Result<f64> {
    dgp.check()?;
    let BiomarkerLaw::Discrete { levels, init, .. } = &dgp.biomarker else {
        return Err(Error::StateSpaceOverflow {
            states: u128::MAX,
            budget,
        });
    };
    let states = 2u128.saturating_mul((levels.len() as u128).saturating_pow(t0 + 1));
    if states > budget {
        return Err(Error::StateSpaceOverflow { states, budget });
    }
    fn q(dgp: &Dgp, regime: &Regime, t0: u32, k: u32, u: f64, idx: usize, prev: bool) -> f64 {
        let BiomarkerLaw::Discrete { levels, .. } = &dgp.biomarker else {
            unreachable!()
        };
        let a = regime.decide(levels[idx], prev);
        let h = dgp.hazard(u, levels[idx], a, k);
        if k == t0 {
            return h;
        }
        let rest: f64 = dgp
            .level_moves(u, idx, a, k + 1)
            .into_iter()
            .map(|(p, j)| p * q(dgp, regime, t0, k + 1, u, j, a))
            .sum();
        h + (1.0 - h) * rest
    }
    let mut risk = 0.0;
    for (ui, pu) in [(0usize, 1.0 - dgp.p_u), (1, dgp.p_u)] {
        for (idx, p0) in init[ui].iter().enumerate() {
            if *p0 > 0.0 && pu > 0.0 {
                risk += pu * p0 * q(dgp, regime, t0, 0, ui as f64, idx, false);
            }
        }
    }
    Ok(risk)
}

/// Monte-Carlo counterfactual risk with its binomial standard error.
pub fn gcomp_mc(dgp: &Dgp, regime: &Regime, t0: u32, reps: usize, seed: u64) -> Result<(f64, f64)> {
    dgp.check()?;
    if reps == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    let failures: usize = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = subject_rng(seed, i as u64);
            let u = if rng.gen::<f64>() < dgp.p_u { 1.0 } else { 0.0 };
            let (mut l, mut idx) = dgp.draw_initial(u, &mut rng);
            let mut prev = false;
            for k in 0..=t0 {
                if k > 0 {
                    (l, idx) = dgp.draw_next(u, l, idx, prev, k, &mut rng);
                }
                let a = regime.decide(l, prev);
                if rng.gen::<f64>() < dgp.hazard(u, l, a, k) {
                    return 1;
                }
                prev = a;
            }
            0
        })
        .sum();
    let p = failures as f64 / reps as f64;
    Ok((p, (p * (1.0 - p) / reps as f64).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum TruthMethod {
    ExactEnumeration,
    MonteCarlo { reps: usize, mc_se: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub regime: String,
    pub theta: f64,
    pub t0: u32,
    pub risk: f64,
    #[serde(flatten)]
    pub method: TruthMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthTable {
    pub scenario: String,
    pub entries: Vec<TruthEntry>,
}

impl TruthTable {
    /// Exact values where the world is enumerable, Monte Carlo otherwise.
    pub fn compute(
        dgp: &Dgp,
        regimes: &[Regime],
        t0s: &[u32],
        mc_reps: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut entries = Vec::new();
        for regime in regimes {
            for &t0 in t0s {
                let (risk, method) = match gcomp_exact(dgp, regime, t0, ENUMERATION_BUDGET) {
                    Ok(r) => (r, TruthMethod::ExactEnumeration),
                    Err(Error::StateSpaceOverflow { .. }) => {
                        let (r, se) = gcomp_mc(dgp, regime, t0, mc_reps, seed)?;
                        (
                            r,
                            TruthMethod::MonteCarlo {
                                reps: mc_reps,
                                mc_se: se,
                            },
                        )
                    }
                    Err(e) => return Err(e),
                };
                entries.push(TruthEntry {
                    regime: regime.label(),
                    theta: regime.theta,
                    t0,
                    risk,
                    method,
                });
            }
        }
        Ok(TruthTable {
            scenario: dgp.name.clone(),
            entries,
        })
    }

    pub fn risk(&self, regime: &str, t0: u32) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.regime == regime && e.t0 == t0)
            .map(|e| e.risk)
    }
}

/// Nonparametric g-computation on the empirical distribution: iterated means
/// of the outcome over rule followers grouped by their full observed history
/// of `columns` (and treatment). Fails if a history required by the rule has
/// no followers.
pub fn empirical_ice(
    ds: &LongDataset,
    regime: &Regime,
    t0: u32,
    columns: &[String],
) -> Result<f64> {
    if t0 > ds.max_t() {
        return Err(Error::Config(format!(
            "t0 = {t0} beyond the last interval {}",
            ds.max_t()
        )));
    }
    let cols: Vec<usize> = columns
        .iter()
        .map(|c| ds.covariate_index(c))
        .collect::<Result<_>>()?;
    let path = crate::regimes::rule_path(ds, regime)?;
    let key = |s: usize, k: u32| -> Vec<u64> {
        let mut h = Vec::new();
        for j in 0..=k {
            let r = ds.row_at(s, j).expect("history within follow-up");
            h.extend(cols.iter().map(|&c| ds.covariate(r, c).to_bits()));
            h.push(u64::from(path.a_theta[r]));
        }
        h
    };
    // Q_{k+1} evaluated at each subject's history with the rule's action
    let mut next: Vec<Option<f64>> = vec![None; ds.n_subjects()];
    for k in (0..=t0).rev() {
        let mut cells: HashMap<Vec<u64>, (f64, f64)> = HashMap::new();
        let mut values: Vec<Option<f64>> = vec![None; ds.n_subjects()];
        for s in 0..ds.n_subjects() {
            let Some(r) = ds.row_at(s, k) else { continue };
            if !path.follows[r] || ds.a_cens(r).is_censored() {
                continue;
            }
            let v = match ds.y(r) {
                Some(true) => 1.0,
                _ if k == t0 => 0.0,
                _ => match next[s] {
                    Some(v) => v,
                    None => continue,
                },
            };
            let c = cells.entry(key(s, k)).or_insert((0.0, 0.0));
            c.0 += v;
            c.1 += 1.0;
            values[s] = Some(v);
        }
        // every subject reaching k gets Q_k at its history under the rule
        let mut q = vec![None; ds.n_subjects()];
        for (s, qs) in q.iter_mut().enumerate() {
            if ds.row_at(s, k).is_none() {
                continue;
            }
            let h = key(s, k);
            match cells.get(&h) {
                Some((sum, cnt)) => *qs = Some(sum / cnt),
                None => {
                    return Err(Error::Positivity(format!(
                        "no rule followers share the history of subject `{}` at k = {k}",
                        ds.subject_id(s)
                    )))
                }
            }
        }
        next = q;
    }
    let total: f64 = next
        .iter()
        .map(|v| v.expect("every subject has a row at 0"))
        .sum();
    Ok(total / ds.n_subjects() as f64)
}
