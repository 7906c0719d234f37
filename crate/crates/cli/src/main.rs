use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mrsr::experiment::{
    self, EvaluateOptions, ExperimentConfig, ExperimentKind, Profile, SrOutput, TrainOptions,
};
use mrsr::Error;

/// Train and apply an anisotropy-capable SRGAN to MR slices.
#[derive(Debug, Parser)]
#[command(name = "mrsr", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON experiment config. Without it the selected profile is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in preset used when no config file is given: toy or paper.
    #[arg(long, global = true, default_value = "toy")]
    profile: Profile,

    /// Seed for training and the patient split.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// iso4, iso8, aniso_synthetic or aniso_volume.
    #[arg(long, global = true)]
    experiment: Option<ExperimentKind>,

    /// Height factor for the anisotropic experiments.
    #[arg(long, global = true)]
    aniso_factor: Option<usize>,

    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize volumes, split patients and write slice manifests.
    Prepare,
    /// Pretrain the generator, then train adversarially.
    Train {
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        adversarial_epochs: Option<usize>,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Super-resolve a PNG image or a volume.
    Sr {
        #[arg(long)]
        checkpoint: PathBuf,
        /// PNG image, portable volume file or DICOM series directory.
        #[arg(long)]
        input: PathBuf,
        /// Output file for images, output directory for volumes.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score bicubic baselines and checkpoints on the test slices.
    Evaluate {
        /// `NAME=PATH`; repeat for several models.
        #[arg(long = "checkpoint", value_parser = parse_named_checkpoint)]
        checkpoints: Vec<(String, PathBuf)>,
        /// Also score a method that returns the HR image unchanged.
        #[arg(long)]
        identity: bool,
    },
    /// Print the resolved configuration as JSON.
    Config,
}

fn parse_named_checkpoint(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => {
            Ok((name.to_string(), PathBuf::from(path)))
        }
        _ => Err(format!("expected NAME=PATH, got `{s}`")),
    }
}

fn resolve_config(g: &GlobalArgs) -> mrsr::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::profile(g.profile),
    };
    if let Some(seed) = g.seed {
        cfg.set_seed(seed);
    }
    if g.experiment.is_some() || g.aniso_factor.is_some() {
        cfg.set_experiment(g.experiment.unwrap_or(cfg.experiment), g.aniso_factor);
    }
    if let Some(dir) = &g.output_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> mrsr::Result<bool> {
    let mut cfg = resolve_config(&cli.global)?;
    match cli.command {
        Command::Prepare => {
            let s = experiment::prepare(&cfg)?;
            println!(
                "prepared {} train patients ({} slices) and {} test patients ({} slices) in {}",
                s.train_patients,
                s.train_slices,
                s.test_patients,
                s.test_slices,
                s.prepared_dir.display()
            );
        }
        Command::Train {
            pretrain_epochs,
            adversarial_epochs,
            resume,
        } => {
            if let Some(n) = pretrain_epochs {
                cfg.train.pretrain_epochs = n;
            }
            if let Some(n) = adversarial_epochs {
                cfg.train.adversarial_epochs = n;
            }
            match experiment::train(&cfg, &TrainOptions { resume }) {
                Ok(s) => {
                    println!(
                        "trained {} pretrain + {} adversarial epochs ({} generator / {} discriminator steps)",
                        s.pretrain_epochs_done, s.adversarial_epochs_done, s.generator_steps, s.discriminator_steps
                    );
                    println!("checkpoint: {}", s.final_checkpoint.display());
                    println!("log: {}", s.log_path.display());
                }
                Err(e @ Error::Divergence { .. }) => {
                    let latest = cfg.checkpoint_dir().join("latest.ckpt");
                    if latest.exists() {
                        eprintln!("last good checkpoint: {}", latest.display());
                    } else {
                        eprintln!("no checkpoint was written before the failure");
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        Command::Sr {
            checkpoint,
            input,
            output,
        } => match experiment::superresolve(&cfg, &checkpoint, &input, output.as_deref())? {
            SrOutput::Image {
                path,
                height,
                width,
            } => {
                println!("wrote {height}x{width} image to {}", path.display());
            }
            SrOutput::Volume { fused, dim } => {
                println!(
                    "wrote {}x{}x{} fused volume to {}",
                    dim.0,
                    dim.1,
                    dim.2,
                    fused.display()
                );
            }
        },
        Command::Evaluate {
            checkpoints,
            identity,
        } => {
            let s = experiment::evaluate(
                &cfg,
                &EvaluateOptions {
                    checkpoints,
                    identity,
                },
            )?;
            print!("{}", s.report.to_table());
            println!("report: {}", s.report_dir.display());
            for (name, e) in &s.failures {
                eprintln!("method `{name}` failed: {e}");
            }
            return Ok(s.failures.is_empty());
        }
        Command::Config => println!("{}", cfg.to_json()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
