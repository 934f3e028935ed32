//! `scatternet`: generate oracle data, train and evaluate the surface-current
//! model, and run one-off scattering solves.
//!
//! Exit codes: 0 ok, 1 I/O or other failure, 2 bad config or arguments,
//! 3 solver failure, 4 training divergence, 5 incompatible inputs.

mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use scatternet::geometry::ShapeSpec;
use scatternet::train::AblationArm;

use crate::commands::SolveArgs;
use crate::config::LoadedConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "scatternet", version, about = "PEC surface-current prediction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arm {
    Full,
    PhysicsLoss,
    Edge,
    Skip,
}

impl From<Arm> for AblationArm {
    fn from(a: Arm) -> Self {
        match a {
            Arm::Full => AblationArm::Full,
            Arm::PhysicsLoss => AblationArm::PhysicsLoss,
            Arm::Edge => AblationArm::Edge,
            Arm::Skip => AblationArm::Skip,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Mesh the configured shapes, solve every incident direction and write
    /// the labelled dataset under `<output_dir>/data`.
    Gen { config: PathBuf },
    /// Solve one scattering problem and write currents and a bistatic RCS cut.
    Solve {
        /// OFF or OBJ mesh.
        #[arg(long, conflicts_with = "shape", required_unless_present = "shape")]
        mesh: Option<PathBuf>,
        /// Generated shape as JSON, e.g. '{"kind":"sphere","radius":0.15}'.
        #[arg(long)]
        shape: Option<String>,
        /// Target edge of generated shapes, in wavelengths.
        #[arg(long, default_value_t = 0.1)]
        edge: f64,
        #[arg(long, default_value_t = 1e9)]
        frequency: f64,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        /// Incidence polar angle in degrees.
        #[arg(long, default_value_t = 0.0)]
        theta: f64,
        /// Incidence azimuth in degrees.
        #[arg(long, default_value_t = 0.0)]
        phi: f64,
        #[arg(long, default_value_t = 0.0)]
        cut_phi: f64,
        #[arg(long, default_value_t = 0.0)]
        cut_start: f64,
        #[arg(long, default_value_t = 180.0)]
        cut_stop: f64,
        #[arg(long, default_value_t = 1.0)]
        cut_step: f64,
        /// Use physical-optics currents instead of the integral-equation solve.
        #[arg(long)]
        po: bool,
        /// Also write the Mie-series RCS of a sphere with this radius.
        #[arg(long, value_name = "RADIUS")]
        mie: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train on the generated dataset; writes `<output_dir>/train[-ARM]`.
    Train {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Arm,
    },
    /// Evaluate a checkpoint on the held-out samples; writes `<output_dir>/eval[-ARM]`.
    Eval {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        ablation: Arm,
        /// Defaults to the checkpoint written by `train` for the same arm.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate all four ablation arms; writes `<output_dir>/ablation`.
    Ablate { config: PathBuf },
    /// Fine-tune a checkpoint on a fraction of this config's dataset and
    /// evaluate on the rest; writes `<output_dir>/finetune-FRACTION`.
    Finetune {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fraction: f64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { config } => commands::gen(&LoadedConfig::load(&config)?).map(|_| ()),
        Command::Train { config, ablation } => commands::train_cmd(&LoadedConfig::load(&config)?, ablation.into()),
        Command::Eval { config, ablation, checkpoint } => {
            commands::eval_cmd(&LoadedConfig::load(&config)?, ablation.into(), checkpoint)
        }
        Command::Ablate { config } => commands::ablate_cmd(&LoadedConfig::load(&config)?),
        Command::Finetune { config, checkpoint, fraction } => {
            commands::finetune_cmd(&LoadedConfig::load(&config)?, &checkpoint, fraction)
        }
        Command::Solve {
            mesh,
            shape,
            edge,
            frequency,
            amplitude,
            theta,
            phi,
            cut_phi,
            cut_start,
            cut_stop,
            cut_step,
            po,
            mie,
            out,
        } => {
            let shape = shape
                .map(|s| serde_json::from_str::<ShapeSpec>(&s))
                .transpose()
                .map_err(|e| CliError::Config(format!("--shape: {e}")))?;
            let args = SolveArgs {
                mesh,
                shape,
                edge_wavelengths: edge,
                frequency_hz: frequency,
                amplitude,
                theta_deg: theta,
                phi_deg: phi,
                cut_phi_deg: cut_phi,
                cut_start_deg: cut_start,
                cut_stop_deg: cut_stop,
                cut_step_deg: cut_step,
                po,
                mie_radius: mie,
            };
            commands::solve_cmd(&args, out)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
