use accel2grf::pipeline::{self, PipelineConfig, PipelineError};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Ground reaction forces from wearable accelerometers: staged experiment runner.
#[derive(Debug, Parser)]
#[command(name = "accel2grf", version)]
struct Cli {
    /// JSON pipeline configuration (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Stage output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for trial-level parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the configured synthetic corpus.
    Synth,
    /// Ingest, convert, align and encode a corpus.
    Prepare {
        /// Corpus root; falls back to the config and then ACCEL2GRF_DATA_ROOT.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Train one network per experiment.
    Train {
        #[arg(long)]
        prepared: PathBuf,
    },
    /// Predict waveforms for the prepared test samples.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Score predictions against measured waveforms.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Print a summary table of one or more report.csv files or evaluate directories.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path, PipelineError> {
    out.as_deref().ok_or_else(|| PipelineError::Config { path: "--out".into(), message: "an output directory is required".into() })
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| PipelineError::Config { path: "--threads".into(), message: e.to_string() })?;
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let rows = pipeline::synth(&cfg, require_out(&cli.out)?)?;
            log::info!("wrote {} trials", rows.len());
        }
        Command::Prepare { corpus } => {
            let out = require_out(&cli.out)?;
            let corpus = cfg.corpus_root(corpus.as_deref())?;
            let summary = pipeline::prepare(&cfg, &corpus, out)?;
            log::info!(
                "{} train / {} test trials, {} rejected, {} duplicates",
                summary.split.train.len(),
                summary.split.test.len(),
                summary.split.rejected.len(),
                summary.split.duplicates.len()
            );
        }
        Command::Train { prepared } => {
            pipeline::train(&cfg, prepared, require_out(&cli.out)?)?;
        }
        Command::Predict { model, samples } => {
            pipeline::predict(&cfg, model, samples, require_out(&cli.out)?)?;
        }
        Command::Evaluate { predictions, truth } => {
            pipeline::evaluate(&cfg, predictions, truth, require_out(&cli.out)?)?;
        }
        Command::Report { inputs } => {
            let table = pipeline::report(inputs)?;
            print!("{table}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|source| PipelineError::Io { path: out.clone(), source })?;
                let path = out.join("report.txt");
                std::fs::write(&path, table).map_err(|source| PipelineError::Io { path, source })?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
