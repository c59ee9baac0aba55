use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wflow::commands::{self, Context, Outcome};
use wflow::config::RunConfig;
use wflow::runner::{resolve_threads, Runner};
use wflow::Result;

/// Stochastic gradient flows on Wasserstein space at desk scale.
///
/// Exit codes: 0 pass, 1 check failure or numerical error, 2 configuration error.
#[derive(Debug, Parser)]
#[command(name = "wflow", version, about, long_about = None)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML run configuration, or a run manifest (JSON) to replay
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: WFLOW_THREADS, then the config, then all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Gram matrix and certified sup-norm bounds of the basis
    ValidateBasis {
        #[command(flatten)]
        common: Common,
        /// Number of trigonometric modes
        #[arg(long = "K")]
        modes: Option<usize>,
    },
    /// Draw conditioned samples from the coefficient Gaussian
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Energy values by both quadratures, partition function and integrability probe
    Energy {
        #[command(flatten)]
        common: Common,
    },
    /// Finite differences of the energy against the intrinsic gradient pairing
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Deterministic projected gradient flow
    Flow {
        #[command(flatten)]
        common: Common,
    },
    /// Ensemble of stochastic gradient flow trajectories
    Sgf {
        #[command(flatten)]
        common: Common,
    },
    /// Invariance and martingale suite with a JSON report
    QuantizeCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-volume porous media solver
    Pme {
        #[command(flatten)]
        common: Common,
    },
}

/// `optional` commands fall back to the defaults with a zero energy.
fn load(common: &Common, optional: bool) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None if optional => RunConfig::from_toml("[energy]\npreset = \"zero\"\n")?,
        None => return Err(wflow::CliError::config("--config", "a configuration file is required")),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome> {
    let (common, cfg, f): (&Common, RunConfig, fn(&RunConfig, &Context) -> Result<Outcome>) = match &cli.command {
        Command::ValidateBasis { common, modes } => {
            let mut cfg = load(common, true)?;
            if let Some(k) = modes {
                cfg.basis.modes = *k;
            }
            cfg.validate()?;
            (common, cfg, commands::validate_basis)
        }
        Command::Sample { common } => (common, load(common, false)?, commands::sample),
        Command::Energy { common } => (common, load(common, false)?, commands::energy),
        Command::GradCheck { common } => (common, load(common, false)?, commands::grad_check),
        Command::Flow { common } => (common, load(common, false)?, commands::flow),
        Command::Sgf { common } => (common, load(common, false)?, commands::sgf),
        Command::QuantizeCheck { common } => (common, load(common, false)?, commands::quantize_check),
        Command::Pme { common } => (common, load(common, false)?, commands::pme),
    };
    let threads = resolve_threads(common.threads, cfg.threads)?;
    let ctx = Context::new(Runner::new(threads)?, cfg.output_dir.clone())?;
    f(&cfg, &ctx)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            for l in &outcome.lines {
                println!("{l}");
            }
            println!("{}", if outcome.passed { "PASS" } else { "FAIL" });
            ExitCode::from(if outcome.passed { 0 } else { 1 })
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
