use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use weaksig_cli::manifest::RunManifest;
use weaksig_cli::run::{self, Invocation};
use weaksig_cli::{exit, exit_code, resolve_evaluate, resolve_generate, resolve_preprocess, resolve_train, TrainFlags};

/// Synthetic spectra, preprocessing, PDVFN training and evaluation.
///
/// Every command writes `run.manifest` into its output directory;
/// `weaksig replay` repeats a run from that file alone.
#[derive(Parser)]
#[command(name = "weaksig", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled, split synthetic corpus.
    Generate {
        /// Generator config (key = value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the preprocessing pipeline over a generated corpus.
    Preprocess {
        /// Directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pipeline_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split, selecting on the val split.
    Train {
        /// Directory written by `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, value_parser = ["regression", "classification"])]
        task: Option<String>,
        /// `all` or a comma-separated subset of teff, logg, feh, ch.
        #[arg(long)]
        targets: Option<String>,
        /// Overrides the train config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split of a preprocessed corpus.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn evaluation output into plot-ready tables.
    Report {
        /// Directory written by `evaluate`.
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a recorded run and compare output checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cmd: Command) -> Result<()> {
    let (inv, out) = match cmd {
        Command::Generate { config, seed, out } => (resolve_generate(config.as_deref(), seed)?, out),
        Command::Preprocess { data, pipeline_config, out } => {
            (resolve_preprocess(&data, pipeline_config.as_deref())?, out)
        }
        Command::Train { data, model_config, train_config, task, targets, seed, out } => {
            let flags = TrainFlags {
                model_config: model_config.as_deref(),
                train_config: train_config.as_deref(),
                task: task.as_deref(),
                targets: targets.as_deref(),
                seed,
            };
            (resolve_train(&data, &flags)?, out)
        }
        Command::Evaluate { data, checkpoint, split, out } => (resolve_evaluate(&data, &checkpoint, &split)?, out),
        Command::Report { eval, out } => (Invocation::Report { eval }, out),
        Command::Replay { manifest, out } => {
            let recorded = RunManifest::read(&manifest)?;
            let r = run::replay(&recorded, &out)?;
            if !r.mismatched.is_empty() {
                anyhow::bail!(weaksig::Error::Integrity(format!(
                    "replay of {} differs in {}",
                    recorded.command,
                    r.mismatched.join(", ")
                )));
            }
            println!("replayed {}: {} outputs identical", recorded.command, r.manifest.outputs.len());
            return Ok(());
        }
    };
    let m = inv.run(&out)?;
    for f in &m.outputs {
        println!("{}  {}", f.sha256, out.join(&f.name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
