//! Command-line surface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 infeasible
//! calibration, 4 I/O failure. All CSV outputs start with the schema line
//! `# dp-noise-ledger v1`.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::accountant::Conversion;
use crate::calibration::{
    calibrate_sigma_with, contour, steps_from_epochs, sweep_grid_with, AccountingRule, CalibrationTarget, Horizon,
    DEFAULT_SIGMA_HI, DEFAULT_SIGMA_LO, DEFAULT_SIGMA_TOL,
};
use crate::data::{subset_split, synthetic_blobs};
use crate::dpsgd::{self, gap_experiment, ClipConfig, GapSettings, MetricsRow, Regime};
use crate::error::Error;

pub use config::RunConfig;

pub const SCHEMA_LINE: &str = "# dp-noise-ledger v1";
pub const SWEEP_HEADER: &str = "q,sigma,steps,delta,epsilon,best_order";
pub const METRICS_HEADER: &str =
    "step,epoch,eps_spent,train_loss,test_acc,inherent_noise,additive_noise,accounted_fraction";
pub const CONTOUR_HEADER: &str = "target_eps,q,steps,sigma,status";
pub const GAP_HEADER: &str = "regime,seed,accuracy";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dp-noise-ledger", version, about = "Privacy accounting and gradient-noise analysis for DP-SGD")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// ε of the subsampled Gaussian mechanism after a number of steps.
    Account(AccountArgs),
    /// Smallest σ meeting a target ε.
    Calibrate(CalibrateArgs),
    /// ε over a (q, σ) grid, written as CSV.
    Sweep(SweepArgs),
    /// Calibrated σ per (target ε, q), written as CSV.
    Contour(ContourArgs),
    /// Train a model from a config file and log metrics as CSV.
    Train(TrainArgs),
    /// Noise decomposition at a given training step, as JSON.
    NoiseReport(NoiseReportArgs),
    /// GD vs. SGD vs. DP-GD test accuracy over seeds on synthetic blobs.
    Gap(GapArgs),
}

#[derive(Debug, Args)]
pub struct AccountArgs {
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, conflicts_with = "epochs")]
    pub steps: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    /// With --batch-size, sets q = batch size / dataset size.
    #[arg(long, requires = "batch_size")]
    pub dataset_size: Option<u64>,
    #[arg(long, requires = "dataset_size")]
    pub batch_size: Option<u64>,
    #[arg(long, default_value = "improved")]
    pub conversion: String,
    /// Also write the result as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub target_eps: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long)]
    pub q: f64,
    #[arg(long, required_unless_present = "steps", conflicts_with = "steps")]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_SIGMA_LO)]
    pub sigma_lo: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_HI)]
    pub sigma_hi: f64,
    #[arg(long, default_value_t = DEFAULT_SIGMA_TOL)]
    pub tolerance: f64,
    #[arg(long, default_value = "improved")]
    pub conversion: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Comma-separated sampling rates.
    #[arg(long, value_delimiter = ',', required = true)]
    pub q_grid: Vec<f64>,
    /// Comma-separated noise multipliers.
    #[arg(long, value_delimiter = ',', required = true)]
    pub sigma_grid: Vec<f64>,
    #[arg(long)]
    pub epochs: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long, default_value = "improved")]
    pub conversion: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ContourArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub targets: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub q_grid: Vec<f64>,
    #[arg(long)]
    pub epochs: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub delta: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Overrides `seed` from the config and the environment.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct NoiseReportArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub at_step: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the JSON report to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GapArgs {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    /// DP-GD noise multipliers to choose from on a validation split.
    #[arg(long, value_delimiter = ',', default_value = "3,10,30")]
    pub sigma_candidates: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1.0)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long, default_value_t = 7)]
    pub data_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::BadMagic { .. } | Error::TruncatedFile { .. } | Error::CountMismatch { .. } => {
                EXIT_IO
            }
            Error::Bracket { .. } => EXIT_INFEASIBLE,
            _ => EXIT_USAGE,
        };
        let message = match e {
            Error::Bracket { .. } => format!("infeasible: {e}"),
            _ => e.to_string(),
        };
        Self { code, message }
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Account(a) => cmd_account(&a, out),
        Command::Calibrate(a) => cmd_calibrate(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
        Command::Contour(a) => cmd_contour(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::NoiseReport(a) => cmd_noise_report(&a, out),
        Command::Gap(a) => cmd_gap(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e).into())
}

fn print(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> CmdResult {
    out.write_fmt(text)
        .map_err(|e| Error::io("<stdout>", e).into())
}

fn conversion(raw: &str) -> Result<Conversion, Failure> {
    raw.parse().map_err(|e: Error| Failure::usage(e.to_string()))
}

#[derive(Debug, Serialize)]
struct AccountOutput {
    q: f64,
    sigma: f64,
    delta: f64,
    steps: u64,
    conversion: Conversion,
    epsilon: f64,
    best_order: f64,
}

fn cmd_account(a: &AccountArgs, out: &mut dyn Write) -> CmdResult {
    let q = match (a.q, a.dataset_size, a.batch_size) {
        (Some(q), None, None) => q,
        (None, Some(n), Some(b)) => {
            if n == 0 || b == 0 || b > n {
                return Err(Failure::usage(format!("batch size {b} must lie in [1, dataset size {n}]")));
            }
            b as f64 / n as f64
        }
        (Some(_), _, _) => return Err(Failure::usage("give either --q or --dataset-size/--batch-size, not both")),
        _ => return Err(Failure::usage("one of --q or --dataset-size with --batch-size is required")),
    };
    let steps = match (a.steps, a.epochs) {
        (Some(s), None) => s,
        (None, Some(e)) => steps_from_epochs(e, q)?,
        _ => return Err(Failure::usage("exactly one of --steps or --epochs is required")),
    };
    let conversion = conversion(&a.conversion)?;
    let e = AccountingRule::with_conversion(conversion).eps(q, a.sigma, steps, a.delta)?;
    print(out, format_args!("epsilon = {:.6}\nbest_order = {}\nsteps = {steps}\n", e.eps, e.best_order))?;
    if let Some(path) = &a.json {
        let doc = AccountOutput {
            q,
            sigma: a.sigma,
            delta: a.delta,
            steps,
            conversion,
            epsilon: e.eps,
            best_order: e.best_order,
        };
        write_file(path, &(serde_json::to_string_pretty(&doc).expect("plain struct serializes") + "\n"))?;
    }
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs, out: &mut dyn Write) -> CmdResult {
    let horizon = match (a.epochs, a.steps) {
        (Some(e), None) => Horizon::Epochs(e),
        (None, Some(s)) => Horizon::Steps(s),
        _ => return Err(Failure::usage("exactly one of --epochs or --steps is required")),
    };
    let target = CalibrationTarget {
        target_eps: a.target_eps,
        delta: a.delta,
        q: a.q,
        horizon,
        sigma_lo: a.sigma_lo,
        sigma_hi: a.sigma_hi,
        tolerance: a.tolerance,
    };
    let sigma = calibrate_sigma_with(&target, &AccountingRule::with_conversion(conversion(&a.conversion)?))?;
    print(out, format_args!("{sigma:.4}\n"))
}

/// Renders the sweep CSV.
pub fn sweep_csv(rows: &[crate::calibration::SweepRow]) -> String {
    let mut s = format!("{SCHEMA_LINE}\n{SWEEP_HEADER}\n");
    for r in rows {
        s += &format!("{},{},{},{},{},{}\n", r.q, r.sigma, r.steps, r.delta, r.epsilon, r.best_order);
    }
    s
}

fn cmd_sweep(a: &SweepArgs, out: &mut dyn Write) -> CmdResult {
    let rule = AccountingRule::with_conversion(conversion(&a.conversion)?);
    let result = sweep_grid_with(&a.q_grid, &a.sigma_grid, a.epochs, a.delta, &rule)?;
    write_file(&a.out, &sweep_csv(&result.rows))?;
    print(out, format_args!("wrote {} rows to {}\n", result.rows.len(), a.out.display()))
}

fn cmd_contour(a: &ContourArgs, out: &mut dyn Write) -> CmdResult {
    let lines = contour(&a.targets, &a.q_grid, a.epochs, a.delta)?;
    let mut s = format!("{SCHEMA_LINE}\n{CONTOUR_HEADER}\n");
    let mut n = 0;
    for line in &lines {
        for p in &line.points {
            let sigma = p.sigma.map_or(String::new(), |v| v.to_string());
            s += &format!("{},{},{},{},{}\n", p.target_eps, p.q, p.steps, sigma, p.status.as_str());
            n += 1;
        }
    }
    write_file(&a.out, &s)?;
    print(out, format_args!("wrote {n} rows to {}\n", a.out.display()))
}

/// Renders the training metrics CSV.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{SCHEMA_LINE}\n{METRICS_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step,
            r.epoch,
            r.eps_spent,
            r.train_loss,
            r.test_acc,
            r.inherent_noise,
            r.additive_noise,
            r.accounted_fraction
        );
    }
    s
}

fn load_run_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = RunConfig::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CmdResult {
    let mut cfg = load_run_config(&a.config, a.seed)?;
    if a.out_dir.is_some() {
        cfg.out_dir = a.out_dir.clone();
    }
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Failure::usage("no output directory: set `out_dir` or pass --out-dir"))?;
    let (train, test) = cfg.load_data()?;
    cfg.train.validate(&train, &test)?;

    let metrics = dpsgd::train(&cfg.train, &train, &test)?;
    write_file(&out_dir.join("resolved_config.txt"), &cfg.to_text())?;
    write_file(&out_dir.join("metrics.csv"), &metrics_csv(&metrics.rows))?;
    let last = metrics.last();
    print(
        out,
        format_args!(
            "steps={} epoch={} eps_spent={:.6} train_loss={:.6} test_acc={:.4} accounted_fraction={:.4}\n",
            last.step, last.epoch, last.eps_spent, last.train_loss, last.test_acc, last.accounted_fraction
        ),
    )
}

fn cmd_noise_report(a: &NoiseReportArgs, out: &mut dyn Write) -> CmdResult {
    let cfg = load_run_config(&a.config, a.seed)?;
    let (train, test) = cfg.load_data()?;
    cfg.train.validate(&train, &test)?;
    let total = cfg.train.total_steps(train.len())?;
    if a.at_step > total {
        return Err(Failure::usage(format!("--at-step {} exceeds the run's {total} steps", a.at_step)));
    }
    let mut prefix = cfg.train.clone();
    prefix.horizon = Horizon::Steps(a.at_step);
    prefix.eval_every = u64::MAX;
    let metrics = dpsgd::train(&prefix, &train, &test)?;
    let report = dpsgd::noise_report_at(&metrics.params, &cfg.train, &train, Some(a.at_step))?;
    let json = serde_json::to_string_pretty(&report).expect("plain struct serializes") + "\n";
    if let Some(path) = &a.out {
        write_file(path, &json)?;
    }
    print(out, format_args!("{json}"))
}

fn cmd_gap(a: &GapArgs, out: &mut dyn Write) -> CmdResult {
    let clip = ClipConfig::bounded(a.clip).map_err(|e| Failure::usage(e.to_string()))?;
    let settings = GapSettings {
        hidden: a.hidden,
        learning_rate: a.learning_rate,
        steps: a.steps,
        delta: 1e-5,
    };
    let pool = synthetic_blobs(3000, 10, 4, 1.5, a.data_seed)?;
    let (train, rest) = subset_split(&pool, 1000, 2000, a.data_seed)?;
    let (validation, test) = subset_split(&rest, 1000, 1000, a.data_seed)?;
    let sigma = dpsgd::tune_dp_gd_sigma(&train, &validation, &a.seeds, &a.sigma_candidates, clip, &settings)?;
    let regimes = [
        Regime::Gd,
        Regime::Sgd {
            batch_size: a.batch_size,
        },
        Regime::DpGd { sigma, clip },
    ];
    let report = gap_experiment(&train, &test, &a.seeds, &regimes, &settings)?;
    let mut s = format!("{SCHEMA_LINE}\n{GAP_HEADER}\n");
    for r in &report.rows {
        s += &format!("{},{},{}\n", r.regime, r.seed, r.accuracy);
    }
    write_file(&a.out, &s)?;
    for r in &report.summary {
        print(out, format_args!("{} mean={:.4} std={:.4}\n", r.regime, r.mean, r.std))?;
    }
    Ok(())
}
