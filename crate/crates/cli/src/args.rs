use std::path::PathBuf;

use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand};

/// Degradation-robust TTS pipeline.
///
/// Configuration comes from `--config` (JSON), then `ENVTTS_*` environment
/// overrides (`ENVTTS_TRAIN__STEPS=500` sets `train.steps`), then `--seed`.
#[derive(Parser, Debug)]
#[command(name = "envtts", version, about)]
pub struct Cli {
    /// Pipeline configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic corpus, degrade it, split train/test and build
    /// separator mixtures.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Degrade a clean manifest with a directory of noise clips.
    Degrade {
        /// Clean JSONL manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Directory of noise `.wav` clips.
        #[arg(long)]
        noises: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the noise extractor or the denoiser on mixtures.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_parser = PossibleValuesParser::new(["extract-noise", "denoise"]))]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        /// Separator checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the acoustic model on a degraded corpus.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        extractor: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model checkpoint (`step_N/model.ckpt`) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Average the environment embeddings of clean-condition utterances.
    EmbedClean {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Output artifact (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated conditions to average over; defaults to
        /// `train.clean_env_conditions`.
        #[arg(long)]
        conditions: Option<String>,
    },
    /// Clean-condition synthesis to mel files (and optionally WAV).
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Space-separated phoneme symbols.
        #[arg(long, conflicts_with = "requests")]
        phonemes: Option<String>,
        #[arg(long, default_value_t = 0)]
        speaker: usize,
        #[arg(long, default_value = "utt")]
        id: String,
        /// JSONL file of requests: `{"id", "phonemes", "speaker_id", ...}`.
        #[arg(long)]
        requests: Option<PathBuf>,
        /// Also render a Griffin-Lim waveform.
        #[arg(long)]
        wav: bool,
    },
    /// Synthesize a test manifest and score it against clean references.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        embedding: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Row label in the text table.
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Print the configuration JSON schema.
    Schema,
}
