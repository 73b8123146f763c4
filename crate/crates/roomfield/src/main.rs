use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use roomfield::checkpoint;
use roomfield::config::{self, parse_stage_set};
use roomfield::export::PoseSpec;
use roomfield::run::{self, RunError};
use roomfield_core::view_schedule::Stage;

#[derive(Parser)]
#[command(
    name = "roomfield",
    version,
    about = "Train and inspect inside-out room radiance fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a field, or resume from a checkpoint.
    Generate {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
        #[arg(long, default_value = "roomfield-run")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Stages to run, e.g. `1`, `12` or `123`.
        #[arg(long, value_parser = stage_set)]
        stages: Option<[bool; 3]>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        skip_stage: Vec<u8>,
        #[arg(long)]
        no_pose_transform: bool,
    },
    /// Render a checkpoint to PNG color and PFM depth.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `pose:x,y,z,yaw_deg,pitch_deg` or `turntable:frames,radius,pitch_deg`.
        #[arg(long)]
        pose: PoseSpec,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out metrics against the analytic room.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn stage_set(s: &str) -> Result<[bool; 3], String> {
    parse_stage_set(s)
        .filter(|on| on.iter().any(|&x| x))
        .ok_or_else(|| format!("`{s}` is not a set of stages 1-3"))
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Generate {
            config,
            resume,
            out,
            seed,
            stages,
            skip_stage,
            no_pose_transform,
        } => {
            let (mut cfg, state) = match resume {
                Some(path) => {
                    let ck = checkpoint::load(&path)?;
                    (ck.config, Some(ck.state))
                }
                None => (
                    config::load(config.as_deref().expect("clap enforces --config"))?,
                    None,
                ),
            };
            let c = &mut cfg.pipeline;
            if let Some(seed) = seed {
                c.seed = seed;
            }
            if let Some(on) = stages {
                c.ablation.run_stages = on;
            }
            for k in skip_stage {
                c.ablation.run_stages[Stage::from_number(k).expect("range-checked").index()] =
                    false;
            }
            if no_pose_transform {
                c.ablation.pose_transform = false;
            }
            let report = run::generate(&cfg, state, &out)?;
            println!("{}", report.final_checkpoint.display());
        }
        Command::Render {
            checkpoint,
            pose,
            out,
        } => {
            for path in run::render(&checkpoint, &pose, &out)? {
                println!("{}", path.display());
            }
        }
        Command::Eval { checkpoint, out } => {
            print!("{}", run::eval(&checkpoint, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
