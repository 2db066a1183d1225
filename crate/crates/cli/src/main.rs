//! `prominence`: data preparation, annotation aggregation, training,
//! evaluation, inference, the wavelet baseline, studies and the annotation
//! service behind one command.

mod commands;
mod config;
mod error;
mod study;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "prominence", version, about = "Word-level speech prominence estimation")]
struct Cli {
    #[command(flatten)]
    layers: ConfigLayers,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigLayers {
    /// JSON configuration layered over the defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.max_steps=2000`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Corpus manifest (JSON list of utterance entries).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Feature cache directory; features are recomputed when omitted.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    #[arg(long, value_parser = ["framewise", "posthoc", "intermediate", "prehoc"])]
    pub location: Option<String>,
    #[arg(long, value_parser = ["average", "max", "sum", "center"])]
    pub method: Option<String>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ModelFlags {
    fn overrides(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(l) = &self.location {
            out.push(format!("model.location={l}"));
        }
        if let Some(m) = &self.method {
            out.push(format!("model.method={m}"));
        }
        if let Some(s) = self.max_steps {
            out.push(format!("train.max_steps={s}"));
        }
        if let Some(s) = self.seed {
            out.push(format!("train.seed={s}"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute cached features and frame spans for a corpus.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        /// Index of utterances, spans and the train/valid/test partition.
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn raw annotation files into prominence targets.
    Aggregate {
        /// Annotation file or directory of `*.json` files; repeatable.
        #[arg(long = "annotations", required = true)]
        annotations: Vec<PathBuf>,
        /// Manifest supplying word tokens for the CSV.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Agreement and filtering report (JSON); printed when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train a model and keep the best validation checkpoint.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation log (JSON lines).
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        flags: ModelFlags,
    },
    /// Score a checkpoint against targets.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: Split,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-word prominence for new audio.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with_all = ["audio", "alignment"])]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "alignment")]
        audio: Option<PathBuf>,
        #[arg(long, requires = "audio")]
        alignment: Option<PathBuf>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Training-free wavelet prominence scores.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        /// Targets to correlate against.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the study selected by `study.kind`.
    Study {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Targets CSV; not used by the redundancy study.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Raw annotations for the redundancy study.
        #[arg(long)]
        annotations: Vec<PathBuf>,
        /// Teacher checkpoint for self-training.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Unannotated corpus for self-training.
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the annotation service.
    Serve {
        #[arg(long)]
        manifest: PathBuf,
        /// Append-only event log.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut overrides = cli.layers.overrides.clone();
    if let Command::Train { flags, .. } = &cli.command {
        overrides.extend(flags.overrides());
    }
    let config = RunConfig::load(cli.layers.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Prepare { manifest, cache, out } => commands::prepare(&config, &manifest, &cache, &out),
        Command::Aggregate {
            annotations,
            manifest,
            out,
            report,
        } => commands::aggregate(&config, &annotations, manifest.as_deref(), &out, report.as_deref()),
        Command::Train {
            corpus,
            targets,
            out,
            log,
            ..
        } => commands::train(&config, &corpus, &targets, &out, log.as_deref()),
        Command::Evaluate {
            corpus,
            checkpoint,
            targets,
            split,
            out,
        } => commands::evaluate(&config, &corpus, &checkpoint, &targets, split, out.as_deref()),
        Command::Infer {
            checkpoint,
            manifest,
            audio,
            alignment,
            cache,
            out,
        } => {
            let input = match (manifest, audio, alignment) {
                (Some(m), _, _) => commands::InferInput::Manifest(m),
                (None, Some(a), Some(b)) => commands::InferInput::Pair(a, b),
                _ => return Err(CliError::Usage("give --manifest or --audio with --alignment".into())),
            };
            commands::infer(&config, &checkpoint, &input, cache.as_deref(), &out)
        }
        Command::Baseline {
            manifest,
            targets,
            out,
            report,
        } => commands::baseline(&config, &manifest, targets.as_deref(), &out, report.as_deref()),
        Command::Study {
            corpus,
            targets,
            annotations,
            teacher,
            unlabeled,
            out_dir,
        } => study::run(
            &config,
            &study::StudyInputs {
                corpus: &corpus,
                targets: targets.as_deref(),
                annotations: &annotations,
                teacher: teacher.as_deref(),
                unlabeled: unlabeled.as_deref(),
            },
            &out_dir,
        ),
        Command::Serve { manifest, log, addr } => commands::serve(&config, &manifest, &log, addr),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let error = CliError::Usage(e.kind().to_string());
            eprintln!("{}", error.record());
            return ExitCode::from(error.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("{}", error.record());
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
