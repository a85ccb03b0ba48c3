//! `transmix` command-line tool.
//!
//! Exit codes: 0 success, 1 input/output or data problems, 2 invalid
//! configuration, 3 numerical or optimization failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transmix::ecf::Series;
use transmix::pipeline::{
    emit_plot_data, read_series, run_pipeline, AutoTag, FitReport, HalfWidth, PipelineConfig, Stages,
};
use transmix::simulate::{sample, HmmSimConfig};
use transmix::Error;

const SEED_ENV: &str = "TRANSMIX_SEED";

#[derive(Parser, Debug)]
#[command(name = "transmix", version, about = "Translation mixtures with dependent regimes")]
struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a hidden Markov translation mixture.
    Simulate(SimulateArgs),
    /// Estimate the number of regimes, translations and pair law.
    Fit(FitArgs),
    /// Fit, then block-bootstrap confidence intervals.
    Infer(InferArgs),
    /// Fit, then estimate the noise density.
    Density(DensityArgs),
    /// Fit, intervals and noise density in one run.
    Pipeline(PipelineArgs),
    /// Regenerate plot files from a saved report.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Simulation config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output series, one observation per line.
    #[arg(long)]
    out: PathBuf,
    /// Optional output of the hidden regimes.
    #[arg(long)]
    states_out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured length.
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Observed series, one value per line.
    #[arg(long)]
    input: PathBuf,
    /// Pipeline config (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for plot CSV files.
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Known number of regimes (switches to the compact-set estimator).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    lambda_coeff: Option<f64>,
    #[arg(long)]
    multistart: Option<usize>,
    /// Contrast weight half-width, or `auto`.
    #[arg(long)]
    half_width: Option<String>,
    #[arg(long)]
    quad_order: Option<usize>,
    /// Record stage timings in the report.
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long)]
    replicates: Option<usize>,
    /// Block length, or `auto` for ⌈n^{1/3}⌉.
    #[arg(long)]
    block_len: Option<String>,
    #[arg(long)]
    level: Option<f64>,
}

#[derive(Args, Debug)]
struct SieveArgs {
    #[arg(long)]
    p_max: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    b0: Option<f64>,
    #[arg(long)]
    a0: Option<f64>,
    /// EM restarts per sieve size.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    boot: BootstrapArgs,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    sieve: SieveArgs,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    boot: BootstrapArgs,
    #[command(flatten)]
    sieve: SieveArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Saved JSON report.
    #[arg(long)]
    report: PathBuf,
    /// Series the report was computed from (for the histogram column).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    plot_dir: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse(_) | Error::InsufficientData { .. } => 1,
        Error::Configuration(_) | Error::InvalidParameter(_) | Error::Infeasible(_) => 2,
        Error::OptimizationFailure { .. } | Error::NonConvergence(_) | Error::Numerical(_) => 3,
    }
}

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn write_text(path: &Path, body: &str) -> Result<(), Error> {
    fs::write(path, body).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Seed precedence: flag, then config file, then `TRANSMIX_SEED`, then 0.
fn resolve_seed(flag: Option<u64>, config_text: Option<&str>, config_seed: u64) -> Result<u64, Error> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if config_text.is_some_and(|t| t.parse::<toml::Table>().is_ok_and(|t| t.contains_key("seed"))) {
        return Ok(config_seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Configuration(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn simulate(args: &SimulateArgs) -> Result<(), Error> {
    let text = read_text(&args.config)?;
    let mut cfg: HmmSimConfig = toml::from_str(&text).map_err(|e| Error::Configuration(e.to_string()))?;
    cfg.seed = resolve_seed(args.seed, Some(&text), cfg.seed)?;
    if let Some(n) = args.n {
        cfg.n = n;
    }
    let (series, states) = sample(&cfg)?;
    let mut body = String::with_capacity(series.len() * 24);
    for v in series.values() {
        body.push_str(&format!("{v}\n"));
    }
    write_text(&args.out, &body)?;
    if let Some(path) = &args.states_out {
        let body: String = states.iter().map(|s| format!("{s}\n")).collect();
        write_text(path, &body)?;
    }
    Ok(())
}

fn load_config(common: &CommonArgs, stages: Stages) -> Result<PipelineConfig, Error> {
    let text = common.config.as_deref().map(read_text).transpose()?;
    let mut cfg = match &text {
        Some(t) => PipelineConfig::from_toml(t)?,
        None => PipelineConfig::default(),
    };
    cfg.seed = resolve_seed(common.seed, text.as_deref(), cfg.seed)?;
    cfg.stages = stages;
    if let Some(k) = common.k {
        cfg.selection.k = Some(k);
    }
    if let Some(v) = common.k_max {
        cfg.selection.k_max = v;
    }
    if let Some(v) = common.lambda_coeff {
        cfg.selection.lambda_coeff = v;
    }
    if let Some(v) = common.multistart {
        cfg.selection.multistart = v;
    }
    if let Some(v) = &common.half_width {
        cfg.contrast.half_width = if v == "auto" {
            HalfWidth::Auto(AutoTag::Auto)
        } else {
            HalfWidth::Fixed(
                v.parse()
                    .map_err(|_| Error::Configuration(format!("--half-width {v:?} is neither a number nor auto")))?,
            )
        };
    }
    if let Some(v) = common.quad_order {
        cfg.contrast.quad_order = v;
    }
    if common.timing {
        cfg.record_timing = true;
    }
    Ok(cfg)
}

fn apply_bootstrap(cfg: &mut PipelineConfig, args: &BootstrapArgs) -> Result<(), Error> {
    if let Some(v) = args.replicates {
        cfg.bootstrap.replicates = v;
    }
    if let Some(v) = &args.block_len {
        cfg.bootstrap.block_len = if v == "auto" {
            None
        } else {
            Some(
                v.parse()
                    .map_err(|_| Error::Configuration(format!("--block-len {v:?} is neither an integer nor auto")))?,
            )
        };
    }
    if let Some(v) = args.level {
        cfg.bootstrap.level = v;
    }
    Ok(())
}

fn apply_sieve(cfg: &mut PipelineConfig, args: &SieveArgs) {
    let d = &mut cfg.density;
    if let Some(v) = args.p_max {
        d.p_max = v;
    }
    if let Some(v) = args.kappa {
        d.kappa = v;
    }
    if let Some(v) = args.b0 {
        d.b0 = v;
    }
    if let Some(v) = args.a0 {
        d.a0 = v;
    }
    if let Some(v) = args.restarts {
        d.restarts = v;
    }
}

fn estimate(common: &CommonArgs, cfg: &PipelineConfig) -> Result<(), Error> {
    let (series, digest) = read_series(&common.input)?;
    let report = run_pipeline(&series, digest, cfg)?;
    let json = report.to_json();
    match &common.out {
        Some(path) => write_text(path, &json)?,
        None => print!("{json}"),
    }
    if let Some(dir) = &common.plot_dir {
        emit_plot_data(&report, &series, dir)?;
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Error> {
    let report = FitReport::from_json(&read_text(&args.report)?)?;
    let (series, digest): (Series, _) = read_series(&args.input)?;
    if digest.sha256 != report.input.sha256 {
        eprintln!(
            "warning: {} differs from the report's input ({})",
            args.input.display(),
            report.input.path
        );
    }
    let written = emit_plot_data(&report, &series, &args.plot_dir)?;
    println!("k_hat = {}", report.param.k_hat);
    println!("m_hat = {:?}", report.param.theta_hat.m());
    println!("Q_hat = {:?}", report.param.theta_hat.q_rows());
    if let Some(d) = &report.density {
        println!("p_hat = {}", d.p_hat);
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Error::Configuration("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Configuration(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(args) => simulate(&args),
        Command::Fit(args) => {
            let cfg = load_config(&args.common, Stages::default())?;
            estimate(&args.common, &cfg)
        }
        Command::Infer(args) => {
            let mut cfg = load_config(&args.common, Stages { bootstrap: true, density: false })?;
            apply_bootstrap(&mut cfg, &args.boot)?;
            estimate(&args.common, &cfg)
        }
        Command::Density(args) => {
            let mut cfg = load_config(&args.common, Stages { bootstrap: false, density: true })?;
            apply_sieve(&mut cfg, &args.sieve);
            estimate(&args.common, &cfg)
        }
        Command::Pipeline(args) => {
            let mut cfg = load_config(&args.common, Stages { bootstrap: true, density: true })?;
            apply_bootstrap(&mut cfg, &args.boot)?;
            apply_sieve(&mut cfg, &args.sieve);
            estimate(&args.common, &cfg)
        }
        Command::Report(args) => report(&args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::OptimizationFailure { diagnostics, .. } = &e {
                for d in diagnostics {
                    eprintln!("  {d}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
