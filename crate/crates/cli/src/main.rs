use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use longtmle::analysis::{
    read_report, render_report, run, write_failure, write_outputs, AnalysisConfig, InputFormat, RegimeSpec,
};
use longtmle::coarsen::{coarsen_dataset, read_daily_csv, write_daily_csv, CoarsenConfig, ExposurePolicy};
use longtmle::data::write_long_csv;
use longtmle::oracle::{simulate, simulate_daily, Dgp, TruthTable, BIOMARKER_COLUMN};
use longtmle::regimes::Regime;
use longtmle::tmle::Mode;
use longtmle::{Error, Result};

#[derive(Parser)]
#[command(name = "longtmle", version, about = "Long-format TMLE for dynamic threshold regimes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bin daily follow-up into person-time intervals.
    Coarsen(CoarsenArgs),
    /// Draw a synthetic cohort (and optionally its counterfactual truth).
    Simulate(SimulateArgs),
    /// Run an analysis described by a TOML config.
    Estimate(EstimateArgs),
    /// Print risk and risk-difference tables of a finished run.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Exposure {
    Any,
    FirstDay,
    Majority,
}

impl From<Exposure> for ExposurePolicy {
    fn from(e: Exposure) -> Self {
        match e {
            Exposure::Any => ExposurePolicy::Any,
            Exposure::FirstDay => ExposurePolicy::FirstDay,
            Exposure::Majority => ExposurePolicy::Majority,
        }
    }
}

#[derive(Args)]
struct CoarsenArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Interval width in days.
    #[arg(long)]
    unit: u32,
    #[arg(long)]
    max_intervals: u32,
    #[arg(long, value_enum, default_value = "any")]
    exposure: Exposure,
}

#[derive(Args)]
struct SimulateArgs {
    /// default, discrete or binary.
    #[arg(long, default_value = "default")]
    scenario: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Emit daily event records instead of intervals.
    #[arg(long, conflicts_with = "interval")]
    daily: bool,
    /// Emit person-time intervals (the default).
    #[arg(long)]
    interval: bool,
    /// Split each interval into this many shorter ones.
    #[arg(long, default_value_t = 1)]
    refine: u32,
    /// Interval width in days for daily output.
    #[arg(long, default_value_t = 90)]
    unit_days: u32,
    /// Probability that the biomarker is measured in an interval (daily output).
    #[arg(long, default_value_t = 1.0)]
    obs_prob: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write the counterfactual truth for the default regimes as JSON.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Monte-Carlo draws where exact enumeration is infeasible.
    #[arg(long, default_value_t = 200_000)]
    truth_reps: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides input.path.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Replaces the configured regimes (threshold, d<threshold>, always or never).
    #[arg(long = "regime")]
    regimes: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    t0_grid: Vec<u32>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Output directory of a previous `estimate` run.
    #[arg(long = "in")]
    input: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn coarsen_cmd(a: CoarsenArgs) -> Result<()> {
    let streams = read_daily_csv(BufReader::new(File::open(&a.input)?))?;
    let cfg = CoarsenConfig { exposure: a.exposure.into(), ..CoarsenConfig::new(a.unit, a.max_intervals) };
    let ds = coarsen_dataset(&streams, &cfg)?;
    write_long_csv(&ds, create(&a.out)?)?;
    eprintln!("{} subjects, {} person-time rows", ds.n_subjects(), ds.n_rows());
    Ok(())
}

fn simulate_cmd(a: SimulateArgs) -> Result<()> {
    let mut dgp = Dgp::by_name(&a.scenario)?;
    if a.refine > 1 {
        dgp = dgp.refined(a.refine);
    }
    if a.daily {
        let streams = simulate_daily(&dgp, a.n, a.seed, a.unit_days, a.obs_prob)?;
        write_daily_csv(&streams, create(&a.out)?)?;
    } else {
        write_long_csv(&simulate(&dgp, a.n, a.seed)?, create(&a.out)?)?;
    }
    if let Some(path) = a.truth {
        let t0s: Vec<u32> = (0..=dgp.horizon).collect();
        let table = TruthTable::compute(&dgp, &Regime::default_set(BIOMARKER_COLUMN), &t0s, a.truth_reps, a.seed)?;
        let mut w = create(&path)?;
        serde_json::to_writer_pretty(&mut w, &table)?;
        writeln!(w)?;
    }
    Ok(())
}

fn estimate_cmd(a: EstimateArgs) -> Result<bool> {
    let mut cfg = AnalysisConfig::load(&a.config)?;
    if let Some(p) = a.input {
        cfg.input.path = Some(p);
    }
    if let Some(d) = a.out_dir {
        cfg.output_dir = Some(d);
    }
    if !a.regimes.is_empty() {
        cfg.regimes = a.regimes.iter().map(|r| RegimeSpec::parse(r)).collect::<Result<_>>()?;
    }
    if !a.t0_grid.is_empty() {
        cfg.t0_grid = a.t0_grid;
    }
    if let Some(m) = a.mode {
        cfg.mode = match m.as_str() {
            "stratified" => Mode::Stratified,
            "pooled" => Mode::Pooled,
            other => return Err(Error::Config(format!("unknown mode `{other}` (stratified, pooled)"))),
        };
    }
    if a.threads.is_some() {
        cfg.threads = a.threads;
    }
    if let Some(b) = a.bootstrap {
        cfg.ipw.bootstrap = b;
    }
    let dir = cfg.output_dir.clone().ok_or_else(|| Error::Config("no output directory (output_dir or --out-dir)".into()))?;
    if cfg.input.format == InputFormat::Daily && cfg.input.time_unit_days.is_none() {
        return Err(Error::Config("daily input needs input.time_unit_days".into()));
    }
    match run(&cfg) {
        Ok(out) => {
            write_outputs(&dir, &out)?;
            let _ = std::fs::remove_file(dir.join("error.json"));
            eprintln!(
                "{} estimates, {} risk differences written to {}",
                out.report.estimates.len(),
                out.report.risk_differences.len(),
                dir.display()
            );
            Ok(true)
        }
        Err((e, manifest)) => {
            write_failure(&dir, &e, &manifest)?;
            eprintln!("{}", serde_json::to_string(&longtmle::analysis::error_record(&e))?);
            Ok(false)
        }
    }
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    print!("{}", render_report(&read_report(&a.input)?));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Coarsen(a) => coarsen_cmd(a).map(|_| true),
        Command::Simulate(a) => simulate_cmd(a).map(|_| true),
        Command::Estimate(a) => estimate_cmd(a),
        Command::Report(a) => report_cmd(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", longtmle::analysis::error_record(&e));
            ExitCode::FAILURE
        }
    }
}
