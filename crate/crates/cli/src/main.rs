mod commands;
mod config;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::{Profile, RunConfig};
use crate::output::Outputs;

#[derive(Parser)]
#[command(name = "soada", version, about = "Adjoint-based data assimilation for the Kobayashi phase-field model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; profile defaults fill anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Fast)]
    profile: Profile,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the model and write snapshots at the requested times.
    Simulate,
    /// Draw a synthetic observation series from the configured truth.
    MakeObs,
    /// Minimize the misfit and write the estimate, trace and noise level.
    Assimilate,
    /// Assimilate, then solve for the requested marginal variances.
    Uncertainty,
    /// Run a twin experiment.
    Twin,
    /// Check gradients, Hessian-vector products and the Krylov solver.
    Verify {
        #[arg(long, hide = true, value_enum)]
        inject_fault: Option<verify::Fault>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::MakeObs => "make-obs",
            Self::Assimilate => "assimilate",
            Self::Uncertainty => "uncertainty",
            Self::Twin => "twin",
            Self::Verify { .. } => "verify",
        }
    }
}

/// Failure classes with their own exit status.
#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("configuration error: {0:#}")]
    Config(anyhow::Error),
    #[error("{0} verification check(s) failed")]
    Verify(usize),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(f) = err.downcast_ref::<Failure>() {
        return match f {
            Failure::Config(_) => 2,
            Failure::Verify(_) => 4,
        };
    }
    let numerical = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<soada::Error>(),
            Some(
                soada::Error::NonFiniteState { .. }
                    | soada::Error::NonFiniteAdjoint { .. }
                    | soada::Error::NonFiniteCost
            )
        )
    });
    if numerical {
        3
    } else {
        1
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path, cli.profile),
        None => Ok(RunConfig::defaults(cli.profile)),
    }
    .map_err(Failure::Config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let mut out = Outputs::new(&cli.out, cli.command.name(), &cfg)?;
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&cfg, &mut out),
        Command::MakeObs => commands::make_obs(&cfg, &mut out),
        Command::Assimilate => commands::assimilate(&cfg, &mut out).map(|_| ()),
        Command::Uncertainty => commands::uncertainty(&cfg, &mut out),
        Command::Twin => commands::twin(&cfg, &mut out),
        Command::Verify { inject_fault } => verify::run(&cfg, *inject_fault, &mut out),
    };
    // A failed verification still produced a complete report.
    if let Err(e) = &result {
        if !matches!(e.downcast_ref::<Failure>(), Some(Failure::Verify(_))) {
            out.mark_partial();
        }
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
