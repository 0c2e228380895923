//! Command-line interface: binds config files to the harness operations.
//!
//! Exit codes: 0 success, 2 usage error, 3 configuration error, 4 runtime
//! error. Config precedence per key: `--seed`/`--out` beat `--set`, which
//! beats `--fast`, which beats the config file, which beats built-in
//! defaults.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{ConfigError, ExperimentConfig};
use crate::export::{export_report, ExportFormat};
use crate::harness::{self, HarnessError};
use crate::simenv::{ConcurrencyPolicy, SimEnv};
use crate::workload::{builtin_profiles, service_demand};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "concsim",
    version,
    about = "Simulated request-based autoscaling benchmarks with a Q-learning concurrency tuner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep the concurrency limit over a grid of load tests
    Sweep(RunArgs),
    /// Train the Q-learning agent on the configured workload
    Train(RunArgs),
    /// Compare the agent against the platform-default autoscaler settings
    Compare(RunArgs),
    /// List the builtin workload profiles
    Profiles,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config file (TOML); defaults apply when omitted
    #[arg(long, env = "CONCSIM_CONFIG")]
    config: Option<PathBuf>,

    /// Desk-scale load tests (100 rps over 3 s) instead of the full defaults
    #[arg(long)]
    fast: bool,

    /// Override a config key, e.g. --set sim.max_pods=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (overrides output_dir from the config)
    #[arg(long)]
    out: Option<PathBuf>,

    /// Result file format
    #[arg(long, value_enum, default_value = "csv")]
    format: ExportFormat,

    /// Write the event trace of one representative load test (JSON lines)
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `argv` and runs the selected subcommand; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            // clap renders help/version as "errors" with exit code 0
            let code = if err.exit_code() == 0 { EXIT_OK } else { EXIT_USAGE };
            let _ = err.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Profiles => {
            print_profiles();
            Ok(())
        }
        Command::Sweep(args) => run_sweep(&args),
        Command::Train(args) => run_train(&args),
        Command::Compare(args) => run_compare(&args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(err) => {
            eprintln!("error: {}", err.message());
            err.exit_code()
        }
    }
}

fn print_profiles() {
    println!("{:<6} {:>8} {:>8} {:>8}", "id", "bloat_mb", "prime_n", "sleep_ms");
    for p in builtin_profiles() {
        println!("{:<6} {:>8} {:>8} {:>8}", p.label(), p.bloat_mb, p.prime_n, p.sleep_ms);
    }
}

fn effective_config(args: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if args.fast {
        cfg.apply_fast();
    }
    cfg = cfg.with_overrides(&args.set)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_path(cfg: &ExperimentConfig, stem: &str, format: ExportFormat) -> PathBuf {
    cfg.output_dir.join(format!("{stem}.{}", format.extension()))
}

fn prepare_output_dir(cfg: &ExperimentConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir)?;
    Ok(())
}

/// Runs one load test with tracing enabled and dumps it as JSON lines. The
/// traced run mirrors the first seeded run of the subcommand.
fn write_trace(cfg: &ExperimentConfig, seed: u64, conc: u32, path: &Path) -> Result<(), CliError> {
    let profile = cfg.profile.resolve()?;
    let demand = service_demand(&profile, &cfg.calibration);
    let sim = crate::simenv::SimConfig { rng_seed: seed, ..cfg.sim };
    let mut env = SimEnv::new(sim).map_err(HarnessError::from)?;
    env.enable_trace();
    env.run_with_policy(ConcurrencyPolicy::HardLimit(conc), &demand, cfg.rate_rps, cfg.duration_ms)
        .map_err(HarnessError::from)?;
    let mut body = String::new();
    for event in env.take_trace() {
        body.push_str(&serde_json::to_string(&event).map_err(std::io::Error::other)?);
        body.push('\n');
    }
    crate::export::atomic_write(path, body.as_bytes())?;
    Ok(())
}

fn run_sweep(args: &RunArgs) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let report = harness::baseline_sweep(&cfg)?;
    prepare_output_dir(&cfg)?;
    if let Some(trace_path) = &args.trace {
        let conc = cfg.sweep.levels()[0];
        let seed = harness::derive_seed(cfg.master_seed, 1, u64::from(conc), 0);
        write_trace(&cfg, seed, conc, trace_path)?;
    }
    let path = output_path(&cfg, "sweep", args.format);
    export_report(&report, args.format, &path)?;
    println!(
        "sweep profile={} levels={} reps={} best_throughput_conc={} r_tp_mean_lat={} out={}",
        cfg.profile.resolve()?.label(),
        report.levels.len(),
        cfg.sweep.repetitions,
        report.best_by.throughput,
        report
            .correlations
            .throughput_mean_latency
            .map_or_else(|| "undefined".to_string(), crate::export::fmt_sig),
        path.display(),
    );
    Ok(())
}

fn run_train(args: &RunArgs) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let report = harness::train(&cfg)?;
    prepare_output_dir(&cfg)?;
    if let Some(trace_path) = &args.trace {
        let seed = harness::derive_seed(cfg.master_seed, 3, 0, 0);
        write_trace(&cfg, seed, cfg.start_conc, trace_path)?;
    }
    let path = output_path(&cfg, "train", args.format);
    export_report(&report, args.format, &path)?;
    let qtable_path = cfg.output_dir.join("qtable.txt");
    crate::agent::save_qtable(&report.qtable, &qtable_path).map_err(HarnessError::from)?;
    println!(
        "train profile={} iterations={} modal_conc_last_{}={} final_epsilon={} out={} qtable={}",
        cfg.profile.resolve()?.label(),
        report.rows.len(),
        report.window_k,
        report.modal_conc_last_k,
        crate::export::fmt_sig(report.rows.last().map_or(1.0, |r| r.epsilon)),
        path.display(),
        qtable_path.display(),
    );
    Ok(())
}

fn run_compare(args: &RunArgs) -> Result<(), CliError> {
    let cfg = effective_config(args)?;
    let report = harness::compare_default(&cfg)?;
    prepare_output_dir(&cfg)?;
    if let Some(trace_path) = &args.trace {
        let seed = harness::derive_seed(cfg.master_seed, 3, 0, 0);
        write_trace(&cfg, seed, cfg.start_conc, trace_path)?;
    }
    let path = output_path(&cfg, "compare", args.format);
    export_report(&report, args.format, &path)?;
    println!(
        "compare profile={} iterations={} rl_avg={} default_avg={} out={}",
        cfg.profile.resolve()?.label(),
        report.rows.len(),
        crate::export::fmt_sig(report.final_rl_avg),
        crate::export::fmt_sig(report.final_default_avg),
        path.display(),
    );
    Ok(())
}
