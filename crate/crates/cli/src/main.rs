use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use log::error;

use ssc_cli::{Dataset, Level, Pipeline, PipelineConfig};
use ssc_core::Split;

#[derive(Parser, Debug)]
#[command(name = "ssc", version, about = "Sequential sentence classification of medical abstracts")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dataset preset; fixes the label set and the abstract model's recurrent cell.
    #[arg(long, global = true, value_enum)]
    dataset: Option<Dataset>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,

    /// Override a config value, e.g. `--set sen.epochs=2`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Downgrade config hash mismatches between stages to warnings.
    #[arg(long, global = true)]
    allow_config_mismatch: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse the corpus splits and build vocabularies and the word table.
    Prepare,
    /// Fill the sentence-vector cache with the configured encoder.
    ExportSentenceVectors,
    /// Train the sentence-level model.
    TrainSen {
        /// Continue from the saved training state.
        #[arg(long)]
        resume: bool,
    },
    /// Write the sentence model's embeddings for every split.
    ExtractEmbeddings,
    /// Train the abstract-level model.
    TrainAbs {
        #[arg(long)]
        resume: bool,
    },
    /// Train the segment-level model.
    TrainSeg {
        #[arg(long)]
        resume: bool,
    },
    /// Write per-sentence scores.
    Predict {
        #[arg(long, value_enum, default_value = "combine")]
        level: Level,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print and save precision, recall and F1.
    Evaluate {
        #[arg(long, value_enum, default_value = "combine")]
        level: Level,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let config = PipelineConfig::load(
        cli.config.as_deref(),
        cli.dataset,
        &cli.overrides,
        cli.seed,
        cli.work_dir.as_deref(),
    )?;
    let pipeline = Pipeline::new(config, cli.allow_config_mismatch);
    match cli.command {
        Command::Prepare => pipeline.prepare()?,
        Command::ExportSentenceVectors => pipeline.export_sentence_vectors()?,
        Command::TrainSen { resume } => {
            pipeline.train_sen(resume)?;
        }
        Command::ExtractEmbeddings => pipeline.extract_embeddings()?,
        Command::TrainAbs { resume } => {
            pipeline.train_abs(resume)?;
        }
        Command::TrainSeg { resume } => {
            pipeline.train_seg(resume)?;
        }
        Command::Predict { level, split } => {
            let preds = pipeline.predict(level, split)?;
            println!(
                "wrote {} abstracts to {}",
                preds.len(),
                pipeline.layout.predictions(level, split).display()
            );
        }
        Command::Evaluate { level, split } => {
            let report = pipeline.evaluate(level, split)?;
            print!("{}", report.to_table(&format!("{} level, {split} split", level.name())));
        }
        Command::ShowConfig => print!("{}", pipeline.config.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
