//! `eegcog`: runs the pipeline one stage at a time inside a run directory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use eegcog::eval::SplitMode;
use eegcog::neural::ModelKind;
use eegcog::pipeline::{ElectrodeChoice, PipelineConfig, PipelineError};
use eegcog::preprocess::FilterPreset;

#[derive(Debug, Parser)]
#[command(name = "eegcog", version, about = "EEG connectivity and cognitive-state pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON pipeline configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// default, text-2022 or alg1.
    #[arg(long, global = true)]
    filter_preset: Option<FilterPreset>,
    /// all20, paper8 or topk:<n>.
    #[arg(long, global = true)]
    electrodes: Option<ElectrodeChoice>,
    /// mlp, eegnet or mha-eegnet.
    #[arg(long, global = true)]
    model: Option<ModelKind>,
    #[arg(long, global = true)]
    folds: Option<usize>,
    /// subject or epoch.
    #[arg(long, global = true)]
    split: Option<SplitMode>,
    /// Training epochs.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Skip `stamp.json`, so reruns can be diffed byte for byte.
    #[arg(long, global = true)]
    no_stamp: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort into raw/.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        /// Length of every task round.
        #[arg(long)]
        round_seconds: Option<f64>,
        /// Add blink artifacts on the frontal channels.
        #[arg(long)]
        blinks: bool,
    },
    /// Screen, filter, baseline-correct and ICA-clean raw/ into preprocessed/.
    Preprocess,
    /// Per-round connectivity matrices, aggregates and edge sets.
    Connect,
    /// Rank channels by weighted degree on the strongest aggregate edges.
    Select,
    /// Quartile labels for every round.
    Label,
    /// Fit one network, validating on the first fold.
    Train,
    /// Cross-validated metrics.
    Evaluate {
        /// Also evaluate all20, paper8 and the selected top-k set.
        #[arg(long)]
        compare: bool,
    },
    /// Collect every JSON artifact into report/.
    Report,
}

fn load_config(g: &Global) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(p) = g.filter_preset {
        cfg.preprocess.filter_preset = p;
    }
    if let Some(e) = g.electrodes {
        cfg.electrodes = e;
    }
    if let Some(m) = g.model {
        cfg.model = m;
    }
    if let Some(k) = g.folds {
        cfg.folds = k;
    }
    if let Some(s) = g.split {
        cfg.split = s;
    }
    if let Some(n) = g.epochs {
        cfg.train.epochs = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = load_config(&cli.global)?;
    let run = commands::Run::new(cfg, cli.global.out, !cli.global.no_stamp);
    match cli.command {
        Command::Synth { subjects, round_seconds, blinks } => run.synth(subjects, round_seconds, blinks),
        Command::Preprocess => run.preprocess(),
        Command::Connect => run.connect(),
        Command::Select => run.select(),
        Command::Label => run.label(),
        Command::Train => run.train(),
        Command::Evaluate { compare } => run.evaluate(compare),
        Command::Report => run.report(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("eegcog: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
