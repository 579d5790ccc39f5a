//! The `envtts` command line, as a library so tests can drive it in-process.

pub mod args;
pub mod commands;
pub mod fail;
pub mod lock;

use envtts::config::PipelineConfig;
use envtts::separation::SeparatorMode;

pub use args::{Cli, Command};
pub use fail::CliError;

/// Loads the configuration (file, environment, `--seed`) and runs one
/// subcommand.
pub fn run(cli: Cli) -> Result<(), CliError> {
    run_with_env(cli, std::env::vars())
}

pub fn run_with_env(cli: Cli, env: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
    if let Command::Schema = cli.command {
        let text = serde_json::to_string_pretty(&envtts::config::schema()).expect("schema");
        println!("{text}");
        return Ok(());
    }
    let mut config = PipelineConfig::load(cli.config.as_deref(), env)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = commands::Context {
        config,
        config_path: cli.config.clone(),
    };
    match &cli.command {
        Command::ToyCorpus { out } => commands::toy_corpus(&ctx, out),
        Command::Degrade { manifest, noises, out } => commands::degrade(&ctx, manifest, noises, out),
        Command::Pretrain {
            manifest,
            mode,
            out,
            resume,
        } => {
            let mode: SeparatorMode = mode.parse().map_err(|e| CliError::config(format!("--mode: {e}")))?;
            commands::pretrain(&ctx, manifest, mode, out, resume.as_deref())
        }
        Command::Train {
            manifest,
            extractor,
            denoiser,
            out,
            resume,
        } => commands::train(&ctx, manifest, extractor, denoiser, out, resume.as_deref()),
        Command::EmbedClean {
            model,
            denoiser,
            manifest,
            out,
            conditions,
        } => commands::embed_clean(&ctx, model, denoiser, manifest, out, conditions.as_deref()),
        Command::Synthesize {
            model,
            embedding,
            out,
            phonemes,
            speaker,
            id,
            requests,
            wav,
        } => commands::synthesize_cmd(
            &ctx,
            model,
            embedding,
            out,
            phonemes.as_deref(),
            *speaker,
            id,
            requests.as_deref(),
            *wav,
        ),
        Command::Evaluate {
            model,
            embedding,
            manifest,
            out,
            label,
        } => commands::evaluate(&ctx, model, embedding, manifest, out, label),
        Command::Schema => unreachable!(),
    }
}
