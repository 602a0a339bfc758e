//! `jumplab`: build, validate and probe long-range random conductance models.

mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use config::{ExperimentConfig, FormsMode};
use jumplab_core::convergence::Reference;
use jumplab_core::exec::Execution;
use std::path::PathBuf;
use std::process::ExitCode;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Check(_) => 2,
            CliError::Resource(_) => 3,
            CliError::Config(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<jumplab_core::Error> for CliError {
    fn from(e: jumplab_core::Error) -> Self {
        use jumplab_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument(_) => CliError::Config(e.to_string()),
            E::ResourceLimit { .. } => CliError::Resource(e.to_string()),
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Io(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "jumplab", version, about)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "JUMPLAB_THREADS")]
    threads: Option<usize>,
    /// Validate the configuration and write the manifest without running.
    #[arg(long, global = true)]
    manifest_only: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the field and tabulate conductances around a point.
    Build(Common),
    /// Check (A1)-(A4) on a window.
    Validate(Common),
    /// Simulate the continuous-time chain.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        t_max: Option<f64>,
        /// Truncate jumps longer than this (real units).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Heat kernel on a window by uniformization.
    Heatkernel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rho: Option<f64>,
        /// Window radius in real units.
        #[arg(long)]
        window: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        source: Option<Vec<f64>>,
    },
    /// Discrete and continuum Dirichlet forms.
    Forms {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<FormsMode>,
    },
    /// Distance of the rescaled chain from its stable limit.
    Clt {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<f64>>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long, value_parser = parse_reference)]
        reference: Option<Reference>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_reference(s: &str) -> Result<Reference, String> {
    match s {
        "cauchy_standard" | "cauchy-standard" | "cauchy" => Ok(Reference::CauchyStandard),
        "alpha_stable_cf" | "alpha-stable-cf" | "cf" => Ok(Reference::AlphaStableCf),
        _ => Err(format!("unknown reference `{s}` (cauchy_standard, alpha_stable_cf)")),
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf, PathBuf), CliError> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let base = common.config.parent().map(PathBuf::from).unwrap_or_default();
    let out = common.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("jumplab-out"));
    Ok((cfg, base, out))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exec = match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(1) => Execution::Sequential,
        Some(n) => {
            jumplab_core::exec::set_threads(n);
            Execution::Parallel
        }
        None => Execution::Parallel,
    };
    let (name, common) = match &cli.command {
        Command::Build(c) => ("build", c),
        Command::Validate(c) => ("validate", c),
        Command::Simulate { common, .. } => ("simulate", common),
        Command::Heatkernel { common, .. } => ("heatkernel", common),
        Command::Forms { common, .. } => ("forms", common),
        Command::Clt { common, .. } => ("clt", common),
    };
    let (mut cfg, base, out) = load(common)?;
    match &cli.command {
        Command::Simulate { paths, t_max, lambda, seed, .. } => {
            set(&mut cfg.simulate.paths, *paths);
            set(&mut cfg.simulate.t_max, *t_max);
            if lambda.is_some() {
                cfg.simulate.lambda = *lambda;
            }
            set(&mut cfg.seed, *seed);
        }
        Command::Heatkernel { rho, window, times, source, .. } => {
            set(&mut cfg.heatkernel.rho, *rho);
            set(&mut cfg.heatkernel.window, *window);
            set(&mut cfg.heatkernel.times, times.clone());
            set(&mut cfg.heatkernel.source, source.clone());
        }
        Command::Forms { mode, .. } => set(&mut cfg.forms.mode, *mode),
        Command::Clt { n_list, t, paths, reference, seed, .. } => {
            set(&mut cfg.clt.n_list, n_list.clone());
            set(&mut cfg.clt.t, *t);
            set(&mut cfg.clt.paths, *paths);
            set(&mut cfg.clt.reference, *reference);
            set(&mut cfg.seed, *seed);
        }
        Command::Build(_) | Command::Validate(_) => {}
    }
    // Artifacts must not depend on where they are written.
    cfg.out = None;
    commands::execute(name, &cfg, &base, &out, cli.manifest_only, exec)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("jumplab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
