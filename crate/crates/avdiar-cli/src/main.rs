//! `avdiar`: desk-scale audio-visual speaker diarization experiments.
//!
//! Five subcommands cover the whole loop: `synth` generates a corpus,
//! `train` runs the three-stage schedule, `infer` writes RTTM hypotheses,
//! `score` computes DER, and `sweep` evaluates robustness across
//! degradation or architecture axes. Runs are reproducible from a config
//! file plus a seed; `AVDIAR_SEED` supplies a default seed when neither the
//! file nor `--seed` does.

mod commands;
mod config;

use anyhow::Result;
use avdiar::fusion::FusionStrategy;
use clap::{Parser, Subcommand};
use config::RunConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "avdiar",
    version,
    about = "Audio-visual speaker diarization on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with train/dev/eval splits
    Synth {
        /// Key-value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus output directory
        #[arg(long)]
        out: PathBuf,
        /// Seed override (wins over the config file and AVDIAR_SEED)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the three-stage training schedule on a corpus
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus root holding train/ and optionally dev/
        #[arg(long)]
        corpus: PathBuf,
        /// Run output directory
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the contrastive synchronization stage
        #[arg(long)]
        skip_stage1: bool,
        /// Skip the frozen-extractor activity stage
        #[arg(long)]
        skip_stage2: bool,
        /// Skip the joint fine-tuning stage
        #[arg(long)]
        skip_stage3: bool,
        /// Start from this checkpoint instead of fresh parameters
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Diarize scene directories with a trained checkpoint
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Parameter checkpoint to load
        #[arg(long)]
        model: PathBuf,
        /// Directory of scene subdirectories (a corpus split)
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Fusion strategy override: qa, concat, factorized, or cross
        #[arg(long)]
        strategy: Option<String>,
        /// Also write per-scene posterior CSVs under reports/posteriors/
        #[arg(long)]
        dump_posteriors: bool,
    },
    /// Score hypothesis RTTM against reference RTTM
    Score {
        /// Reference: an RTTM file, a directory of .rttm files, or a corpus
        /// split directory
        #[arg(long)]
        reference: PathBuf,
        /// Hypothesis: an RTTM file or a directory of .rttm files
        #[arg(long)]
        hypothesis: PathBuf,
        /// Forgiveness collar in seconds around reference boundaries
        #[arg(long, default_value_t = 0.0)]
        collar: f64,
        /// Write the CSV breakdown under this run directory instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate trained checkpoints across a degradation or architecture axis
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory of checkpoints: {strategy}.ckpt, or xs{n}.ckpt for the
        /// xs_layers axis
        #[arg(long)]
        models: PathBuf,
        /// Directory of scene subdirectories to evaluate on
        #[arg(long)]
        scenes: PathBuf,
        /// Axis: miss_rate, resolution, fusion_strategy, or xs_layers
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values; each axis has documented defaults
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    config.finish_seed(seed)?;
    Ok(config)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out, seed } => {
            let config = load_config(config.as_ref(), seed)?;
            commands::cmd_synth(&config, &out)
        }
        Command::Train {
            config,
            corpus,
            out,
            seed,
            skip_stage1,
            skip_stage2,
            skip_stage3,
            init,
        } => {
            let config = load_config(config.as_ref(), seed)?;
            commands::cmd_train(
                &config,
                &corpus,
                &out,
                [skip_stage1, skip_stage2, skip_stage3],
                init.as_deref(),
            )
        }
        Command::Infer {
            config,
            model,
            scenes,
            out,
            seed,
            strategy,
            dump_posteriors,
        } => {
            let mut config = load_config(config.as_ref(), seed)?;
            if let Some(name) = strategy {
                config.fusion.strategy = FusionStrategy::parse(&name)?;
            }
            commands::cmd_infer(&config, &model, &scenes, &out, dump_posteriors)
        }
        Command::Score {
            reference,
            hypothesis,
            collar,
            out,
        } => commands::cmd_score(&reference, &hypothesis, collar, out.as_deref()),
        Command::Sweep {
            config,
            models,
            scenes,
            axis,
            values,
            out,
            seed,
        } => {
            let config = load_config(config.as_ref(), seed)?;
            commands::cmd_sweep(&config, &models, &scenes, &axis, values.as_deref(), &out)
        }
    }
}
