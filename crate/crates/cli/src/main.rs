//! `relight`: scene calibration, lighting reproduction, and
//! projection-mapping contrast evaluation from a declarative TOML config.

mod commands;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

/// Exit codes: 0 success, 2 config error, 3 precondition failure,
/// 4 numerical failure.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PRECONDITION: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "relight", version, about = "Reproduce environmental lighting with projector nodes")]
struct Cli {
    /// Scene configuration (TOML). Omit to use the built-in default scene.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every stochastic component (full-run determinism).
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ConditionArg {
    Dark,
    Typical,
    Proposed,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Measure black offsets, attenuation factors, and reference targets;
    /// persist the calibration bundle.
    Calibrate,
    /// Reproduce the reference lighting: conventional init, distributed
    /// optimization, trace and rendered views.
    Reproduce {
        /// Iteration budget override.
        #[arg(long)]
        iterations: Option<usize>,
        /// Step size override.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Reference variant to reproduce (name, or "all").
        #[arg(long, default_value = "all")]
        reference: String,
    },
    /// Projection-mapping evaluation: margin masking, compensation,
    /// re-optimization, RMS and ANSI contrast under the lighting conditions.
    Pm {
        /// Content image (binary PPM, P6) for the texture projector;
        /// defaults to a generated checker.
        #[arg(long)]
        texture: Option<PathBuf>,
        /// Which lighting condition(s) to evaluate.
        #[arg(long, value_enum, default_value_t = ConditionArg::All)]
        condition: ConditionArg,
        /// Iteration budget override.
        #[arg(long)]
        iterations: Option<usize>,
        /// Step size override.
        #[arg(long)]
        epsilon: Option<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Calibrate => commands::cmd_calibrate(&cli.config, cli.seed, &cli.out),
        Command::Reproduce {
            iterations,
            epsilon,
            reference,
        } => commands::cmd_reproduce(
            &cli.config,
            cli.seed,
            &cli.out,
            *iterations,
            *epsilon,
            reference,
        ),
        Command::Pm {
            texture,
            condition,
            iterations,
            epsilon,
        } => {
            let conditions = match condition {
                ConditionArg::Dark => vec![relight_core::metrics::Condition::Dark],
                ConditionArg::Typical => vec![relight_core::metrics::Condition::Typical],
                ConditionArg::Proposed => vec![relight_core::metrics::Condition::Proposed],
                ConditionArg::All => vec![
                    relight_core::metrics::Condition::Dark,
                    relight_core::metrics::Condition::Typical,
                    relight_core::metrics::Condition::Proposed,
                ],
            };
            commands::cmd_pm(
                &cli.config,
                cli.seed,
                &cli.out,
                texture.as_deref(),
                &conditions,
                *iterations,
                *epsilon,
            )
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
