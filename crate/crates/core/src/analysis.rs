//! Config-driven analysis runs: load → (coarsen) → fit g → weights → TMLE and
//! IPW over every (regime, t₀) → report, flat tables, curves and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::coarsen::{
    coarsen_dataset, read_daily_csv, CoarsenConfig, DailyEventStream, ExposurePolicy,
};
use crate::data::{read_long_csv, LongDataset, SummaryMap};
use crate::error::{Error, Result};
use crate::inference::{
    eic, risk_difference, tmle_estimate_report, z_value, Estimate, EstimateReport, RiskDifference,
    Wald,
};
use crate::ipw::{bootstrap, ipw_estimate};
use crate::learners::{GbtParams, LearnerSpec};
use crate::propensity::{
    compute_weights, fit_g, summarize_weights, GConfig, TimeEncoding, WeightOptions,
};
use crate::regimes::{rule_path, Regime};
use crate::superlearner::Strategy;
use crate::tmle::{tmle_estimate, Mode, QConfig, Q_MIN};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Long,
    Daily,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: InputFormat,
    /// Daily input only.
    #[serde(default)]
    pub time_unit_days: Option<u32>,
    #[serde(default)]
    pub max_intervals: Option<u32>,
    #[serde(default)]
    pub exposure: ExposurePolicy,
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
}

/// A threshold, or `"always"` / `"never"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegimeSpec {
    Threshold(f64),
    Named(String),
}

impl RegimeSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "always" | "never" => Ok(RegimeSpec::Named(s.trim().to_string())),
            t => t
                .trim_start_matches('d')
                .parse()
                .map(RegimeSpec::Threshold)
                .map_err(|_| {
                    Error::Config(format!(
                        "regime `{s}` is neither a threshold nor always/never"
                    ))
                }),
        }
    }

    fn build(&self, biomarker: &str, inclusive: bool) -> Result<Regime> {
        let mut r = match self {
            RegimeSpec::Threshold(t) if t.is_finite() => Regime::new(*t, biomarker),
            RegimeSpec::Named(n) if n == "always" => Regime::always_treat(biomarker),
            RegimeSpec::Named(n) if n == "never" => Regime::never_treat(biomarker),
            other => return Err(Error::Config(format!("invalid regime {other:?}"))),
        };
        r.threshold_inclusive = inclusive;
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Tmle,
    Ipw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    Parametric,
    Dsl,
}

/// Cartesian grid over one learner family's parameters, e.g.
/// `{ family = "l2-logistic", lambda = [0.01, 0.1] }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerGrid {
    pub family: String,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub features: Option<Vec<usize>>,
    #[serde(flatten)]
    pub params: BTreeMap<String, Value>,
}

impl LearnerGrid {
    pub fn expand(&self) -> Result<Vec<LearnerSpec>> {
        let mut combos: Vec<Vec<(String, Value)>> = vec![vec![]];
        for (name, values) in &self.params {
            let values = match values {
                Value::Array(v) => v.clone(),
                v => vec![v.clone()],
            };
            if values.is_empty() {
                return Err(Error::Config(format!(
                    "grid for `{}` has no values for `{name}`",
                    self.family
                )));
            }
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((name.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|c| {
                let base = self.label.clone().unwrap_or_else(|| self.family.clone());
                let label = if c.is_empty() {
                    base
                } else {
                    let parts: Vec<String> = c.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    format!("{base}[{}]", parts.join(","))
                };
                let mut obj = serde_json::Map::new();
                obj.insert("label".into(), Value::String(label));
                obj.insert("family".into(), Value::String(self.family.clone()));
                if let Some(f) = &self.features {
                    obj.insert("features".into(), json!(f));
                }
                obj.extend(c);
                let spec: LearnerSpec = serde_json::from_value(Value::Object(obj))
                    .map_err(|e| Error::Config(format!("learner grid `{}`: {e}", self.family)))?;
                spec.check()?;
                Ok(spec)
            })
            .collect()
    }
}

fn ten() -> usize {
    10
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NuisanceConfig {
    #[serde(default)]
    pub strategy: StrategyKind,
    /// Parametric learner (default: main-terms logistic regression).
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
    /// Explicit dSL candidates.
    #[serde(default)]
    pub library: Vec<LearnerSpec>,
    /// dSL candidates generated from parameter grids.
    #[serde(default)]
    pub grid: Vec<LearnerGrid>,
    #[serde(default = "ten")]
    pub folds: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the analysis-wide summary map.
    #[serde(default)]
    pub summary: Option<SummaryMap>,
    #[serde(default = "yes")]
    pub time_linear: bool,
    #[serde(default)]
    pub coarse_width: Option<u32>,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            strategy: StrategyKind::Parametric,
            learner: None,
            library: Vec::new(),
            grid: Vec::new(),
            folds: 10,
            seed: 0,
            summary: None,
            time_linear: true,
            coarse_width: None,
        }
    }
}

/// Candidates used by the dSL when no library or grid is configured.
pub fn default_library() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec::glm("glm"),
        LearnerSpec::l2("l2[0.01]", 0.01),
        LearnerSpec::l2("l2[0.1]", 0.1),
        LearnerSpec::gbt(
            "gbt",
            GbtParams {
                n_trees: 50,
                max_depth: 2,
                ..GbtParams::default()
            },
        ),
    ]
}

impl NuisanceConfig {
    pub fn strategy(&self) -> Result<Strategy> {
        match self.strategy {
            StrategyKind::Parametric => {
                let learner = self
                    .learner
                    .clone()
                    .unwrap_or_else(|| LearnerSpec::glm("glm"));
                learner.check()?;
                Ok(Strategy::Parametric { learner })
            }
            StrategyKind::Dsl => {
                let mut candidates = self.library.clone();
                for g in &self.grid {
                    candidates.extend(g.expand()?);
                }
                if candidates.is_empty() {
                    candidates = default_library();
                }
                for c in &candidates {
                    c.check()?;
                }
                if self.folds < 2 {
                    return Err(Error::Config(format!(
                        "dSL needs at least 2 folds, got {}",
                        self.folds
                    )));
                }
                Ok(Strategy::Dsl {
                    candidates,
                    folds: self.folds,
                    seed: self.seed,
                })
            }
        }
    }
}

fn truncation_default() -> Option<f64> {
    Some(200.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    /// Cap on the cumulative weight; `inf` disables truncation.
    #[serde(default = "truncation_default")]
    pub truncation: Option<f64>,
    #[serde(default)]
    pub stabilize: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        WeightConfig {
            truncation: truncation_default(),
            stabilize: false,
        }
    }
}

fn reps_default() -> usize {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpwConfig {
    /// Bootstrap replicates for IPW standard errors; 0 skips them.
    #[serde(default = "reps_default")]
    pub bootstrap: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for IpwConfig {
    fn default() -> Self {
        IpwConfig {
            bootstrap: reps_default(),
            seed: 0,
        }
    }
}

fn default_biomarker() -> String {
    "a1c".into()
}

fn default_regimes() -> Vec<RegimeSpec> {
    [7.0, 7.5, 8.0, 8.5]
        .into_iter()
        .map(RegimeSpec::Threshold)
        .collect()
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Tmle, EstimatorKind::Ipw]
}

fn default_level() -> f64 {
    0.95
}

fn default_q_min() -> f64 {
    Q_MIN
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub input: InputConfig,
    #[serde(default = "default_biomarker")]
    pub biomarker: String,
    #[serde(default = "default_regimes")]
    pub regimes: Vec<RegimeSpec>,
    #[serde(default)]
    pub threshold_inclusive: bool,
    /// Empty means every interval of the data.
    #[serde(default)]
    pub t0_grid: Vec<u32>,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Summary map shared by g and Q unless overridden there; defaults to
    /// (L(0), L(k), A(k − 1)) over every covariate.
    #[serde(default)]
    pub summary: Option<SummaryMap>,
    #[serde(default)]
    pub g: NuisanceConfig,
    #[serde(default)]
    pub q: NuisanceConfig,
    #[serde(default)]
    pub weights: WeightConfig,
    #[serde(default)]
    pub ipw: IpwConfig,
    #[serde(default = "default_q_min")]
    pub q_min: f64,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        toml::from_str("").expect("every field has a default")
    }
}

impl AnalysisConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // relative paths are relative to the config file
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input.path, &mut cfg.output_dir]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form.
    /// SHA-256 of the settings that determine the results; thread count and
    /// output location are left out.
    pub fn hash(&self) -> String {
        let hashed = AnalysisConfig { threads: None, output_dir: None, ..self.clone() };
        let canonical = serde_json::to_vec(&hashed).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical))
    }

    fn weight_options(&self) -> Result<WeightOptions> {
        let truncation = match self.weights.truncation {
            Some(t) if t.is_infinite() => None,
            Some(t) if !(t > 0.0) => {
                return Err(Error::Config(format!(
                    "truncation must be positive, got {t}"
                )))
            }
            t => t,
        };
        Ok(WeightOptions {
            truncation,
            stabilize: self.weights.stabilize,
            time_linear: self.g.time_linear,
            coarse_width: self.g.coarse_width,
        })
    }

    pub fn build_regimes(&self) -> Result<Vec<Regime>> {
        if self.regimes.is_empty() {
            return Err(Error::Config("no regimes configured".into()));
        }
        let regimes: Vec<Regime> = self
            .regimes
            .iter()
            .map(|r| r.build(&self.biomarker, self.threshold_inclusive))
            .collect::<Result<_>>()?;
        let mut labels: Vec<String> = regimes.iter().map(Regime::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate regimes".into()));
        }
        Ok(regimes)
    }

    /// Checks everything that can be checked against the data before fitting.
    pub fn check(&self, ds: &LongDataset) -> Result<()> {
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        ds.covariate_index(&self.biomarker)?;
        for map in [self.g_map(ds), self.q_map(ds)] {
            map.resolve(ds)?;
        }
        if let Some(&t) = self.t0_grid.iter().find(|&&t| t > ds.max_t()) {
            return Err(Error::Config(format!(
                "t0 = {t} beyond the last interval {}",
                ds.max_t()
            )));
        }
        self.build_regimes()?;
        self.weight_options()?;
        self.g.strategy()?;
        self.q.strategy()?;
        Ok(())
    }

    fn base_map(&self, ds: &LongDataset) -> SummaryMap {
        self.summary
            .clone()
            .unwrap_or_else(|| SummaryMap::default_for(ds))
    }

    fn g_map(&self, ds: &LongDataset) -> SummaryMap {
        self.g.summary.clone().unwrap_or_else(|| self.base_map(ds))
    }

    fn q_map(&self, ds: &LongDataset) -> SummaryMap {
        self.q.summary.clone().unwrap_or_else(|| self.base_map(ds))
    }

    fn grid(&self, ds: &LongDataset) -> Vec<u32> {
        let mut g = if self.t0_grid.is_empty() {
            (0..=ds.max_t()).collect()
        } else {
            self.t0_grid.clone()
        };
        g.sort_unstable();
        g.dedup();
        g
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        s.insert("g.seed".into(), self.g.seed);
        s.insert("q.seed".into(), self.q.seed);
        s.insert("ipw.seed".into(), self.ipw.seed);
        for (who, n) in [("g", &self.g), ("q", &self.q)] {
            let learners = match n.strategy() {
                Ok(Strategy::Parametric { learner }) => vec![learner],
                Ok(Strategy::Dsl { candidates, .. }) => candidates,
                Err(_) => Vec::new(),
            };
            for l in learners {
                if let crate::learners::Family::Gbt(p) = &l.family {
                    s.insert(format!("{who}.{}.seed", l.label), p.seed);
                }
            }
        }
        s
    }
}

/// In-memory input, bypassing `input.path`.
#[derive(Debug, Clone)]
pub enum Input {
    Long(LongDataset),
    Daily(Vec<DailyEventStream>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

/// Row accounting showing the run stayed in long format: every design matrix
/// has at most one row per person-time row and a column count that does not
/// grow with the horizon.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RowAccounting {
    pub input_records: usize,
    pub n_subjects: usize,
    pub n_rows: usize,
    pub max_t: u32,
    pub rows_by_k: Vec<usize>,
    pub max_design_rows: usize,
    pub max_design_cols: usize,
    /// Cells of a subject × interval × covariate wide layout, for comparison.
    pub wide_cells: u128,
    pub long_format_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub status: String,
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub timings: Vec<PhaseTiming>,
    pub rows: RowAccounting,
    pub timestamp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<Value>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EstimateReport,
    pub manifest: Manifest,
}

struct Clock {
    timings: Vec<PhaseTiming>,
    started: Instant,
}

impl Clock {
    fn new() -> Self {
        Clock {
            timings: Vec::new(),
            started: Instant::now(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push(PhaseTiming {
            phase: phase.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        out
    }

    fn finish(mut self) -> Vec<PhaseTiming> {
        self.timings.push(PhaseTiming {
            phase: "total".into(),
            seconds: self.started.elapsed().as_secs_f64(),
        });
        self.timings
    }
}

fn load(cfg: &AnalysisConfig, input: Option<Input>) -> Result<(LongDataset, usize)> {
    let input = match input {
        Some(i) => i,
        None => {
            let path = cfg
                .input
                .path
                .as_ref()
                .ok_or_else(|| Error::Config("no input path configured".into()))?;
            let file = fs::File::open(path)
                .map_err(|e| Error::Config(format!("cannot open input {}: {e}", path.display())))?;
            match cfg.input.format {
                InputFormat::Long => Input::Long(read_long_csv(std::io::BufReader::new(file))?),
                InputFormat::Daily => Input::Daily(read_daily_csv(std::io::BufReader::new(file))?),
            }
        }
    };
    match input {
        Input::Long(ds) => {
            ds.ensure_valid()?;
            let n = ds.n_rows();
            Ok((ds, n))
        }
        Input::Daily(streams) => {
            let unit = cfg
                .input
                .time_unit_days
                .ok_or_else(|| Error::Config("daily input needs input.time_unit_days".into()))?;
            let max = cfg
                .input
                .max_intervals
                .ok_or_else(|| Error::Config("daily input needs input.max_intervals".into()))?;
            let cc = CoarsenConfig {
                time_unit_days: unit,
                max_intervals: max,
                exposure: cfg.input.exposure,
                covariates: cfg.input.covariates.clone(),
            };
            let records = streams
                .iter()
                .map(|s| {
                    1 + s.observations.len()
                        + s.episodes.len()
                        + usize::from(s.failure_day.is_some())
                        + usize::from(s.censor.is_some())
                })
                .sum();
            Ok((coarsen_dataset(&streams, &cc)?, records))
        }
    }
}

fn accounting(ds: &LongDataset, records: usize, g_cols: usize, q_cols: usize) -> RowAccounting {
    let mut rows_by_k = vec![0usize; ds.max_t() as usize + 1];
    for r in 0..ds.n_rows() {
        rows_by_k[ds.t(r) as usize] += 1;
    }
    let max_design_rows = ds.n_rows();
    let max_design_cols = g_cols.max(q_cols);
    RowAccounting {
        input_records: records,
        n_subjects: ds.n_subjects(),
        n_rows: ds.n_rows(),
        max_t: ds.max_t(),
        max_design_rows,
        max_design_cols,
        wide_cells: ds.n_subjects() as u128
            * rows_by_k.len() as u128
            * (ds.n_covariates() as u128 + 2),
        long_format_only: max_design_rows <= ds.n_rows(),
        rows_by_k,
    }
}

fn run_inner(
    cfg: &AnalysisConfig,
    input: Option<Input>,
    clock: &mut Clock,
    rows: &mut RowAccounting,
) -> Result<EstimateReport> {
    let (ds, records) = clock.time("load", || load(cfg, input))?;
    cfg.check(&ds)?;
    let regimes = cfg.build_regimes()?;
    let grid = cfg.grid(&ds);
    let opts = cfg.weight_options()?;
    let g_cfg = GConfig {
        map: cfg.g_map(&ds),
        strategy: cfg.g.strategy()?,
        time_linear: cfg.g.time_linear,
        coarse_width: cfg.g.coarse_width,
    };
    let q_cfg = QConfig {
        mode: cfg.mode,
        q_min: cfg.q_min,
        ..QConfig::new(cfg.q_map(&ds), cfg.q.strategy()?)
    };
    let time_dim = TimeEncoding::new(g_cfg.time_linear, g_cfg.coarse_width, ds.max_t()).dim();
    *rows = accounting(
        &ds,
        records,
        g_cfg.map.dim() + 1 + time_dim,
        q_cfg.map.dim() + 1,
    );

    let g_model = clock.time("fit_g", || fit_g(&ds, &g_cfg))?;
    let g_pred = g_model.predict(&ds)?;
    let kind = format!(
        "{}{}",
        if opts.stabilize {
            "stabilized"
        } else {
            "unstabilized"
        },
        opts.truncation
            .map_or(String::new(), |t| format!(", truncated at {t}"))
    );
    let (paths, tables) = clock.time("weights", || -> Result<_> {
        let paths: Vec<_> = regimes
            .iter()
            .map(|r| rule_path(&ds, r))
            .collect::<Result<_>>()?;
        let tables: Vec<_> = paths
            .iter()
            .map(|p| compute_weights(&ds, &g_pred, p, &opts))
            .collect::<Result<_>>()?;
        Ok((paths, tables))
    })?;
    let mut report = EstimateReport::default();
    for (r, t) in regimes.iter().zip(&tables) {
        report
            .weight_summaries
            .extend(summarize_weights(&ds, &t.weight, &r.label(), &kind));
    }

    let do_tmle = cfg.estimators.contains(&EstimatorKind::Tmle);
    let do_ipw = cfg.estimators.contains(&EstimatorKind::Ipw);
    let mut fit_diag = Vec::new();
    if do_tmle {
        let tasks: Vec<(usize, u32)> = (0..regimes.len())
            .flat_map(|i| grid.iter().map(move |&t| (i, t)))
            .collect();
        let fits = clock.time("tmle", || {
            tasks
                .par_iter()
                .map(|&(i, t0)| {
                    tmle_estimate(
                        &ds,
                        &paths[i],
                        &tables[i].weight,
                        &q_cfg,
                        &regimes[i].label(),
                        t0,
                    )
                })
                .collect::<Vec<_>>()
        });
        let fits: Vec<_> = fits.into_iter().collect::<Result<_>>()?;
        let eics: Vec<_> = fits.iter().map(eic).collect();
        for (f, e) in fits.iter().zip(&eics) {
            report
                .estimates
                .push(tmle_estimate_report(f, e, cfg.level)?);
            fit_diag.push(json!({
                "regime": f.regime,
                "t0": f.t0,
                "mean_eic": e.mean(),
                "epsilon": f.epsilons(),
                "steps": f.steps,
            }));
        }
        let at = |i: usize, t: u32| {
            tasks
                .iter()
                .position(|&x| x == (i, t))
                .expect("task exists")
        };
        for &t0 in &grid {
            for i in 0..regimes.len() {
                for j in i + 1..regimes.len() {
                    let (a, b) = (at(i, t0), at(j, t0));
                    report.risk_differences.push(risk_difference(
                        &fits[a], &fits[b], &eics[a], &eics[b], cfg.level,
                    )?);
                }
            }
        }
    }

    let mut ipw_diag = Value::Null;
    if do_ipw {
        let last = *grid.last().expect("nonempty grid");
        let point: Vec<Vec<f64>> = clock.time("ipw", || {
            regimes
                .iter()
                .zip(&tables)
                .map(|(r, t)| ipw_estimate(&ds, &t.weight, &r.label(), last).map(|f| f.risks))
                .collect::<Result<_>>()
        })?;
        let flat = |risks: &[Vec<f64>]| -> Vec<f64> {
            risks
                .iter()
                .flat_map(|v| grid.iter().map(|&t| v[t as usize]))
                .collect()
        };
        let boot = if cfg.ipw.bootstrap > 0 {
            Some(clock.time("ipw_bootstrap", || {
                bootstrap(&ds, cfg.ipw.bootstrap, cfg.ipw.seed, |d| {
                    let pred = fit_g(d, &g_cfg)?.predict(d)?;
                    let mut risks = Vec::with_capacity(regimes.len());
                    for r in &regimes {
                        let w = compute_weights(d, &pred, &rule_path(d, r)?, &opts)?;
                        risks.push(ipw_estimate(d, &w.weight, &r.label(), last)?.risks);
                    }
                    Ok(flat(&risks))
                })
            })?)
        } else {
            None
        };
        let est = flat(&point);
        let z = z_value(cfg.level);
        let m = grid.len();
        let se_of = |f: &dyn Fn(&[f64]) -> f64| boot.as_ref().map_or(f64::NAN, |b| b.se_of(f));
        for (i, r) in regimes.iter().enumerate() {
            for (j, &t0) in grid.iter().enumerate() {
                let v = est[i * m + j];
                let se = se_of(&|x: &[f64]| x[i * m + j]);
                report.estimates.push(Estimate::new(
                    "ipw",
                    &r.label(),
                    t0,
                    v,
                    Wald {
                        se,
                        lo: v - z * se,
                        hi: v + z * se,
                    },
                ));
            }
        }
        for (j, &t0) in grid.iter().enumerate() {
            for a in 0..regimes.len() {
                for b in a + 1..regimes.len() {
                    let rd = est[a * m + j] - est[b * m + j];
                    let se = se_of(&|x: &[f64]| x[a * m + j] - x[b * m + j]);
                    report.risk_differences.push(RiskDifference {
                        estimator: "ipw".into(),
                        regime1: regimes[a].label(),
                        regime2: regimes[b].label(),
                        t0,
                        rd,
                        se,
                        ci_lo: rd - z * se,
                        ci_hi: rd + z * se,
                    });
                }
            }
        }
        ipw_diag = json!({
            "bootstrap_replicates": boot.as_ref().map_or(0, |b| b.replicates.len()),
            "bootstrap_failures": boot.as_ref().map_or(Vec::new(), |b| b.failures.clone()),
        });
    }

    report.metadata = json!({
        "tool": "longtmle",
        "version": VERSION,
        "config_hash": cfg.hash(),
        "n_subjects": ds.n_subjects(),
        "n_rows": ds.n_rows(),
        "max_t": ds.max_t(),
        "covariates": ds.covariate_names(),
        "regimes": regimes.iter().map(Regime::label).collect::<Vec<_>>(),
        "t0_grid": grid,
        "mode": cfg.mode.name(),
        "level": cfg.level,
        "estimators": cfg.estimators,
    });
    report.diagnostics = json!({
        "g": {
            "models": g_model.descriptions().into_iter().collect::<BTreeMap<_, _>>(),
            "notes": g_model.notes(),
        },
        "weights": regimes.iter().zip(&tables).map(|(r, t)| json!({
            "regime": r.label(),
            "n_truncated": t.n_truncated,
        })).collect::<Vec<_>>(),
        "tmle": fit_diag,
        "ipw": ipw_diag,
    });
    Ok(report)
}

fn timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Runs an analysis. On failure the error is returned together with the
/// manifest of the aborted run.
pub fn run_with(
    cfg: &AnalysisConfig,
    input: Option<Input>,
) -> std::result::Result<RunOutput, (Error, Manifest)> {
    let threads = cfg
        .threads
        .unwrap_or_else(rayon::current_num_threads)
        .max(1);
    let mut clock = Clock::new();
    let mut rows = RowAccounting::default();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run_inner(cfg, input, &mut clock, &mut rows)),
        Err(e) => Err(Error::Config(format!(
            "cannot start {threads} worker threads: {e}"
        ))),
    };
    let mut manifest = Manifest {
        tool: "longtmle".into(),
        version: VERSION.into(),
        status: "ok".into(),
        config_hash: cfg.hash(),
        config: serde_json::to_value(cfg).expect("config serializes"),
        seeds: cfg.seeds(),
        threads,
        timings: clock.finish(),
        rows,
        timestamp: timestamp(),
        error: None,
    };
    match result {
        Ok(report) => Ok(RunOutput { report, manifest }),
        Err(e) => {
            manifest.status = "failed".into();
            manifest.error = Some(error_record(&e));
            Err((e, manifest))
        }
    }
}

pub fn run(cfg: &AnalysisConfig) -> std::result::Result<RunOutput, (Error, Manifest)> {
    run_with(cfg, None)
}

/// Structured record of an aborted run.
pub fn error_record(e: &Error) -> Value {
    json!({ "status": "failed", "kind": e.kind(), "message": e.to_string() })
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes report.json, flat tables, curves and manifest.json into `dir`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir.join("curves"))?;
    let report = &out.report;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)? + "\n",
    )?;
    report.write_estimates_csv(fs::File::create(dir.join("estimates.csv"))?)?;
    report.write_risk_differences_csv(fs::File::create(dir.join("risk_differences.csv"))?)?;
    report.write_weights_csv(fs::File::create(dir.join("weights.csv"))?)?;
    let mut curves = BTreeMap::new();
    for e in &report.estimates {
        curves.insert((e.estimator.clone(), e.regime.clone()), ());
    }
    for (est, regime) in curves.keys() {
        let f = fs::File::create(
            dir.join("curves")
                .join(format!("{est}_{}.csv", file_safe(regime))),
        )?;
        report.write_curve(est, regime, f)?;
    }
    let mut pairs = BTreeMap::new();
    for d in &report.risk_differences {
        pairs.insert(
            (d.estimator.clone(), d.regime1.clone(), d.regime2.clone()),
            (),
        );
    }
    for (est, a, b) in pairs.keys() {
        let name = format!("{est}_rd_{}_vs_{}.csv", file_safe(a), file_safe(b));
        report.write_rd_curve(est, a, b, fs::File::create(dir.join("curves").join(name))?)?;
    }
    write_manifest(dir, &out.manifest)
}

pub fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

/// Writes error.json and the failed run's manifest. Nothing else is written,
/// so a directory holding error.json has no partial estimates.
pub fn write_failure(dir: &Path, e: &Error, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("error.json"),
        serde_json::to_string_pretty(&error_record(e))? + "\n",
    )?;
    write_manifest(dir, manifest)
}

pub fn read_report(dir: &Path) -> Result<EstimateReport> {
    let text = fs::read_to_string(dir.join("report.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Plain-text risk and risk-difference tables of a finished run.
pub fn render_report(report: &EstimateReport) -> String {
    let mut out = String::new();
    let mut estimators: Vec<&str> = report
        .estimates
        .iter()
        .map(|e| e.estimator.as_str())
        .collect();
    estimators.dedup();
    for est in estimators {
        out.push_str(&format!(
            "{est}: cumulative risk\n{:<8} {:>4} {:>8} {:>8} {:>8} {:>8}\n",
            "regime", "t0", "risk", "se", "lo", "hi"
        ));
        for e in report.estimates.iter().filter(|e| e.estimator == est) {
            out.push_str(&format!(
                "{:<8} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                e.regime, e.t0, e.risk, e.se, e.ci_lo, e.ci_hi
            ));
        }
        out.push('\n');
    }
    let mut rd_estimators: Vec<&str> = report
        .risk_differences
        .iter()
        .map(|e| e.estimator.as_str())
        .collect();
    rd_estimators.dedup();
    for est in rd_estimators {
        out.push_str(&format!(
            "{est}: risk differences\n{:<16} {:>4} {:>8} {:>8} {:>8} {:>8}\n",
            "contrast", "t0", "rd", "se", "lo", "hi"
        ));
        for d in report
            .risk_differences
            .iter()
            .filter(|d| d.estimator == est)
        {
            out.push_str(&format!(
                "{:<16} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
                format!("{}-{}", d.regime1, d.regime2),
                d.t0,
                d.rd,
                d.se,
                d.ci_lo,
                d.ci_hi
            ));
        }
        out.push('\n');
    }
    out
}
