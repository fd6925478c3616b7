use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, TrainFlags, GRADCHECK_TOLERANCE};
use crate::config::{Overrides, Preset, RunConfig, RUN_CONFIG_FILE};
use crate::error::CliError;
use crate::forecaster::{Forecaster, GroundTruthOracle};

#[derive(Debug, Parser)]
#[command(name = "donut", version, about = "Autoregressive multimodal trajectory forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads across scenes.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic scenes.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Train a model on a directory of scenes.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the output directory, or from
        /// --checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Cap on optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        modes: Option<usize>,
        /// Report training-set minFDE / minADE after every epoch.
        #[arg(long)]
        track: bool,
        #[arg(long, short)]
        verbose: bool,
        /// Poison the loss at this step to exercise the numeric guard.
        #[arg(long, hide = true)]
        inject_nan: Option<usize>,
    },
    /// Score a checkpoint on a directory of scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only agents whose future turns by at least --turn-deg.
        #[arg(long)]
        turns_only: bool,
        #[arg(long)]
        turn_deg: Option<f64>,
        #[arg(long, short)]
        verbose: bool,
        /// Score the ground truth itself instead of a model.
        #[arg(long, hide = true)]
        oracle: bool,
        #[arg(long, hide = true)]
        modes: Option<usize>,
    },
    /// Forecast one scene.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scene: PathBuf,
        /// Prediction file to write.
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG sketch next to the prediction file.
        #[arg(long)]
        svg: bool,
        #[arg(long, hide = true)]
        oracle: bool,
        #[arg(long, hide = true)]
        modes: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Corrupt one analytic gradient; the check must then fail.
        #[arg(long)]
        fault: bool,
    },
    /// Time inference and training passes.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        preset: c.preset,
        seed: c.seed,
        jobs: c.jobs,
        ..Default::default()
    }
}

/// The explicit --config, else the snapshot written beside the checkpoint.
fn config_for_checkpoint(c: &Common, checkpoint: Option<&Path>) -> Option<PathBuf> {
    c.config.clone().or_else(|| {
        let p = checkpoint?.parent()?.join(RUN_CONFIG_FILE);
        p.exists().then_some(p)
    })
}

fn execute(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Gen { common, out, count } => {
            let cfg = RunConfig::resolve(
                common.config.as_deref(),
                &Overrides {
                    out: Some(out),
                    ..overrides(&common)
                },
            )?;
            let files = commands::gen(&cfg, count)?;
            println!("wrote {} scenes", files.len());
        }
        Command::Train {
            common,
            data,
            out,
            resume,
            checkpoint,
            epochs,
            steps,
            batch,
            lr,
            modes,
            track,
            verbose,
            inject_nan,
        } => {
            let cfg = RunConfig::resolve(
                common.config.as_deref(),
                &Overrides {
                    data: Some(data),
                    out: Some(out),
                    checkpoint,
                    epochs,
                    max_steps: steps,
                    batch,
                    lr,
                    modes,
                    ..overrides(&common)
                },
            )?;
            let flags = TrainFlags {
                resume,
                poison_step: inject_nan,
                eval_each_epoch: track,
                verbose,
            };
            let r = commands::train(&cfg, &flags)?;
            println!("trained {} of {} steps, final loss {:.4}", r.steps, r.total_steps, r.last.total);
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
            turns_only,
            turn_deg,
            verbose,
            oracle,
            modes,
        } => {
            let file = config_for_checkpoint(&common, checkpoint.as_deref());
            let mut cfg = RunConfig::resolve(
                file.as_deref(),
                &Overrides {
                    data: Some(data),
                    out,
                    checkpoint,
                    turns_only,
                    modes,
                    ..overrides(&common)
                },
            )?;
            if let Some(d) = turn_deg {
                cfg.eval.turn_threshold_deg = d;
            }
            let f = forecaster(&cfg, oracle)?;
            commands::eval(f.as_ref(), &cfg, verbose)?;
        }
        Command::Rollout {
            common,
            checkpoint,
            scene,
            out,
            svg,
            oracle,
            modes,
        } => {
            let file = config_for_checkpoint(&common, checkpoint.as_deref());
            let cfg = RunConfig::resolve(
                file.as_deref(),
                &Overrides {
                    out: Some(out),
                    checkpoint,
                    modes,
                    ..overrides(&common)
                },
            )?;
            let f = forecaster(&cfg, oracle)?;
            let p = commands::rollout(f.as_ref(), &cfg, &scene, svg)?;
            println!("forecast {} focal agents", p.agents.len());
        }
        Command::Gradcheck {
            common,
            coords,
            eps,
            fault,
        } => {
            let cfg = RunConfig::resolve(common.config.as_deref(), &overrides(&common))?;
            let r = commands::gradcheck(&cfg, coords, eps, fault)?;
            println!(
                "max relative error {:.3e} at {}[{}] over {} coordinates (loss {:.6})",
                r.max_rel_error, r.worst_param, r.worst_index, r.checked, r.loss
            );
            if !(r.max_rel_error < GRADCHECK_TOLERANCE) {
                return Err(CliError::Numeric(format!(
                    "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:e}",
                    r.max_rel_error
                )));
            }
        }
        Command::Bench { common, count, out } => {
            let cfg = RunConfig::resolve(
                common.config.as_deref(),
                &Overrides {
                    out,
                    ..overrides(&common)
                },
            )?;
            let r = commands::bench(&cfg, count)?;
            println!(
                "{} parameters, inference {:.1} ms/scene, forward+backward {:.1} ms/scene over {} scenes",
                r.parameters, r.inference_ms, r.train_step_ms, r.scenes
            );
        }
    }
    Ok(())
}

fn forecaster(cfg: &RunConfig, oracle: bool) -> Result<Box<dyn Forecaster>, CliError> {
    if oracle {
        return Ok(Box::new(GroundTruthOracle {
            modes: cfg.decoder.modes,
        }));
    }
    Ok(Box::new(commands::load_model(cfg)?))
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
