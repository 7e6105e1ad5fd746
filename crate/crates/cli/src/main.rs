//! `c3vg`: generate synthetic data, train, evaluate, predict and inspect.
//!
//! Exit codes: 0 success, 2 bad input, 3 runtime failure.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use c3vg::config::TrainConfig;
use c3vg::data::generate_data;
use c3vg::harness::{self, LoadedModel, Stage, TrainOptions};
use c3vg::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "c3vg", version, about = "Coarse-to-fine visual grounding on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Coarse,
    Fine,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Ablation,
    Toy,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic referring-expression dataset with train and val splits.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: usize,
        #[arg(long)]
        n_val: usize,
        #[arg(long, default_value_t = 224)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train on DATA/train, validating on DATA/val after every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from OUT/last.safetensors.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this run.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Compute metrics of a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        split: Split,
        #[arg(long, value_enum, default_value = "fine")]
        stage: StageArg,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict the box and mask for one image and expression.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the intermediate maps and predicted boxes as images.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expression: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a preset configuration as JSON.
    Config {
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
    },
}

fn run(cli: Cli) -> c3vg::Result<()> {
    match cli.command {
        Command::GenerateData {
            out,
            n_train,
            n_val,
            image_size,
            seed,
            force,
        } => generate_data(&out, n_train, n_val, image_size, seed, force),
        Command::Train {
            config,
            data,
            out,
            resume,
            max_epochs,
        } => {
            let mut cfg = TrainConfig::from_file(&config)?;
            harness::apply_seed_env(&mut cfg)?;
            let summary = harness::train(&cfg, &data, &out, &TrainOptions { resume, max_epochs })?;
            if let Some(last) = summary.epochs.last() {
                println!("{}", serde_json::to_string(&last.val)?);
            }
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            stage,
            report,
        } => {
            let split = match split {
                Split::Train => "train",
                Split::Val => "val",
            };
            let stage = match stage {
                StageArg::Coarse => Stage::Coarse,
                StageArg::Fine => Stage::Fine,
            };
            let metrics = harness::evaluate(&checkpoint, &data, split, stage)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            fs::write(&report, &text)?;
            println!("{text}");
            Ok(())
        }
        Command::Predict {
            checkpoint,
            image,
            expression,
            out,
        } => {
            let (model, _) = LoadedModel::from_checkpoint(&checkpoint)?;
            let img = harness::load_image(&image)?;
            let rec = harness::predict(&model, &img, &expression)?;
            fs::write(&out, serde_json::to_string(&rec)?)?;
            Ok(())
        }
        Command::Inspect {
            checkpoint,
            image,
            expression,
            out,
        } => {
            let (model, _) = LoadedModel::from_checkpoint(&checkpoint)?;
            let img = harness::load_image(&image)?;
            for p in harness::inspect(&model, &img, &expression, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Config { preset } => {
            let cfg = match preset {
                Preset::Default => TrainConfig::default(),
                Preset::Ablation => TrainConfig::ablation(),
                Preset::Toy => TrainConfig::toy(),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        // A missing input file is the caller's mistake; other I/O failures are not.
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        e if e.is_bad_input() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
