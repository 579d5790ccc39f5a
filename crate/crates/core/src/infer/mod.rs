//! Clean-condition synthesis: silence as the noise-encoder input and the
//! average clean environment embedding as the utterance conditioning.

mod melio;

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::degrade::{DegradationCondition, Manifest};
use crate::dsp::{griffin_lim, AnalysisConfig, MelAnalyzer, MelSpectrogram, Waveform};
use crate::error::{Error, Result};
use crate::model::{AcousticModel, EnvEmbedding, ForwardMode, ModelInput};
use crate::separation::Separator;
use crate::train::{fit_frames, UtteranceFeatures};

pub use melio::{read_mel, sidecar_path, write_mel, MelSidecar, MEL_FORMAT_VERSION};

pub const CLEAN_EMBEDDING_KIND: &str = "clean-embedding";
pub const CLEAN_EMBEDDING_VERSION: u32 = 1;
pub const DEFAULT_GRIFFIN_LIM_ITERS: usize = 32;

/// The averaged clean environment embedding with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanEmbeddingArtifact {
    pub kind: String,
    pub version: u32,
    pub embedding: EnvEmbedding,
    pub n_utterances: usize,
    pub conditions: Vec<DegradationCondition>,
    pub corpus_hash: String,
    /// Free-form echo of the producing configuration.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl CleanEmbeddingArtifact {
    pub fn new(
        embedding: EnvEmbedding,
        n_utterances: usize,
        conditions: Vec<DegradationCondition>,
        corpus_hash: String,
    ) -> Result<Self> {
        if n_utterances == 0 {
            return Err(Error::EmptySet("clean embedding averaged over zero utterances".into()));
        }
        Ok(CleanEmbeddingArtifact {
            kind: CLEAN_EMBEDDING_KIND.into(),
            version: CLEAN_EMBEDDING_VERSION,
            embedding,
            n_utterances,
            conditions,
            corpus_hash,
            config: serde_json::Value::Null,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        crate::checkpoint::write_atomic(path, text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let kind = raw.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
        if kind != CLEAN_EMBEDDING_KIND || version != CLEAN_EMBEDDING_VERSION as u64 {
            return Err(Error::ArtifactVersion {
                path: path.to_path_buf(),
                expected: format!("{CLEAN_EMBEDDING_KIND} v{CLEAN_EMBEDDING_VERSION}"),
                found: format!("{kind} v{version}"),
            });
        }
        let a: CleanEmbeddingArtifact = serde_json::from_value(raw)?;
        if a.n_utterances == 0 {
            return Err(Error::EmptySet(format!("{}: zero utterances", path.display())));
        }
        Ok(a)
    }

    /// Errors when the embedding cannot condition `model`; returns a
    /// warning when the corpus hashes disagree.
    pub fn check_compatible(&self, model: &AcousticModel, model_corpus_hash: Option<&str>) -> Result<Option<String>> {
        if self.embedding.values.len() != model.env_dim() {
            return Err(Error::Incompatible(format!(
                "clean embedding has dimension {} but the model expects {}",
                self.embedding.values.len(),
                model.env_dim()
            )));
        }
        Ok(match model_corpus_hash {
            Some(h) if h != self.corpus_hash => Some(format!(
                "clean embedding was computed on corpus {} but the model was trained on {}",
                short(&self.corpus_hash),
                short(h)
            )),
            _ => None,
        })
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// Evaluation-mode environment embedding of an already denoised mel.
pub fn embed_denoised_mel(model: &AcousticModel, mel: &MelSpectrogram) -> Result<EnvEmbedding> {
    Ok(model.env_encode(mel)?.embedding)
}

/// Denoiser, then mel analysis, then the environment encoder.
pub fn embed_reference(
    model: &AcousticModel,
    denoiser: &Separator,
    analyzer: &MelAnalyzer,
    waveform: &Waveform,
) -> Result<EnvEmbedding> {
    let denoised = denoiser.forward(waveform)?;
    embed_denoised_mel(model, &analyzer.analyze(&denoised)?)
}

/// Mean embedding over cached features in `conditions`.
pub fn average_embedding_of_features(
    model: &AcousticModel,
    features: &[UtteranceFeatures],
    conditions: &BTreeSet<DegradationCondition>,
) -> Result<(EnvEmbedding, usize)> {
    let chosen: Vec<&UtteranceFeatures> = features.iter().filter(|f| conditions.contains(&f.condition)).collect();
    if chosen.is_empty() {
        return Err(Error::EmptySet(format!("no utterances in conditions {conditions:?}")));
    }
    let embs = chosen
        .par_iter()
        .map(|f| Ok(model.env_encode_values(&f.denoised_mel)?.embedding))
        .collect::<Result<Vec<_>>>()?;
    Ok((EnvEmbedding::mean(&embs)?, embs.len()))
}

/// Average of the environment embeddings of every record in `conditions`,
/// each computed from the denoised degraded audio, cropped to the record's
/// frame count as during training.
pub fn compute_average_clean_embedding(
    model: &AcousticModel,
    denoiser: &Separator,
    manifest: &Manifest,
    analysis: &AnalysisConfig,
    conditions: &BTreeSet<DegradationCondition>,
) -> Result<CleanEmbeddingArtifact> {
    let records: Vec<_> = manifest.records.iter().filter(|r| conditions.contains(&r.condition)).collect();
    if records.is_empty() {
        return Err(Error::EmptySet(format!("manifest has no records in conditions {conditions:?}")));
    }
    let analyzer = MelAnalyzer::new(analysis.clone())?;
    let embs = records
        .par_iter()
        .map(|rec| {
            let degraded = manifest.load_degraded(rec, analysis.sample_rate)?;
            let denoised = denoiser.forward(&degraded)?;
            let mel = fit_frames(analyzer.analyze(&denoised)?.values(), rec.total_frames());
            Ok(model.env_encode_values(&mel)?.embedding)
        })
        .collect::<Result<Vec<_>>>()?;
    CleanEmbeddingArtifact::new(
        EnvEmbedding::mean(&embs)?,
        embs.len(),
        conditions.iter().copied().collect(),
        manifest.corpus_hash()?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRequest {
    pub phonemes: Vec<String>,
    pub speaker_id: usize,
    /// Frames per phoneme; predicted when absent.
    #[serde(default)]
    pub durations: Option<Vec<usize>>,
    /// Per-frame F0 in Hz (0 = unvoiced); needs `durations`.
    #[serde(default)]
    pub pitch_hz: Option<Vec<f64>>,
    #[serde(default)]
    pub render_waveform: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub mel: MelSpectrogram,
    pub durations: Vec<usize>,
    /// Predicted F0 in Hz for every frame; the model makes no voicing
    /// decision.
    pub f0_hz: Vec<f64>,
    /// Griffin-Lim rendering, diagnostic quality.
    pub waveform: Option<Waveform>,
}

/// Clean-condition synthesis. Pure: reads the model and embedding only.
pub fn synthesize(
    req: &SynthesisRequest,
    model: &AcousticModel,
    clean: &EnvEmbedding,
    analysis: &AnalysisConfig,
    griffin_lim_iters: usize,
) -> Result<SynthesisOutput> {
    let tokens = model.token_ids(&req.phonemes)?;
    if let Some(d) = &req.durations {
        if d.len() != tokens.len() {
            return Err(Error::InvalidInput(format!(
                "{} duration overrides for {} phonemes",
                d.len(),
                tokens.len()
            )));
        }
    }
    let pitch = match (&req.pitch_hz, &req.durations) {
        (Some(_), None) => {
            return Err(Error::InvalidInput("a pitch override needs explicit durations".into()));
        }
        (Some(p), Some(_)) => Some(p.iter().map(|&f| model.stats.normalize_f0(f)).collect::<Vec<_>>()),
        _ => None,
    };
    let input = ModelInput {
        tokens,
        speaker: req.speaker_id,
        env: clean.clone(),
        noise_mel: None,
    };
    let p = model.forward(
        &input,
        ForwardMode::Inference {
            durations: req.durations.as_deref(),
            pitch: pitch.as_deref(),
        },
    )?;
    let f0_hz = p.pitch.iter().map(|&z| model.stats.denormalize_f0(z)).collect();
    let mel = MelSpectrogram::new(p.mel, analysis.frame_size, analysis.hop, analysis.sample_rate)?;
    let waveform = if req.render_waveform {
        Some(griffin_lim(&mel, griffin_lim_iters)?)
    } else {
        None
    };
    Ok(SynthesisOutput {
        mel,
        durations: p.durations,
        f0_hz,
        waveform,
    })
}

#[cfg(test)]
mod tests;
