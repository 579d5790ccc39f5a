//! The single pipeline configuration file, its JSON schema, and
//! environment-variable overrides.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::degrade::{DegradeConfig, ToyCorpusSpec};
use crate::dsp::AnalysisConfig;
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::ModelConfig;
use crate::separation::{PretrainConfig, SeparatorConfig, SeparatorMode};
use crate::train::TrainConfig;

/// Environment variables starting with this override config keys:
/// `ENVTTS_TRAIN__STEPS=500` sets `train.steps`, `ENVTTS_SEED=3` sets
/// `seed`. Values are parsed as JSON, falling back to a plain string.
pub const ENV_PREFIX: &str = "ENVTTS_";

/// Where the published schema lives in the source tree.
pub const SCHEMA_PATH: &str = "schema/pipeline.schema.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SeparationSection {
    /// Noise extractor; its mode is always `extract-noise`.
    pub extractor: SeparatorConfig,
    /// Denoiser; its mode is always `denoise`.
    pub denoiser: SeparatorConfig,
    pub pretrain: PretrainConfig,
}

impl Default for SeparationSection {
    fn default() -> Self {
        SeparationSection {
            extractor: SeparatorConfig::default(),
            denoiser: SeparatorConfig {
                mode: SeparatorMode::Denoise,
                ..SeparatorConfig::default()
            },
            pretrain: PretrainConfig::default(),
        }
    }
}

impl SeparationSection {
    pub fn for_mode(&self, mode: SeparatorMode) -> SeparatorConfig {
        let mut c = match mode {
            SeparatorMode::ExtractNoise => self.extractor.clone(),
            SeparatorMode::Denoise => self.denoiser.clone(),
        };
        c.mode = mode;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub dsp: AnalysisConfig,
    /// Only used by the `toy-corpus` command.
    pub toy: ToyCorpusSpec,
    pub degrade: DegradeConfig,
    pub separation: SeparationSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1234,
            dsp: AnalysisConfig::default(),
            toy: ToyCorpusSpec::default(),
            degrade: DegradeConfig::default(),
            separation: SeparationSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn schema() -> serde_json::Value {
    serde_json::to_value(schemars::schema_for!(PipelineConfig)).expect("schema serializes")
}

/// Applies `ENVTTS_A__B=value` pairs to a JSON tree.
pub fn apply_env_overrides(
    tree: &mut serde_json::Value,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<Vec<String>> {
    let mut applied = Vec::new();
    let mut vars: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (key, raw) in vars {
        let path: Vec<String> = key[ENV_PREFIX.len()..].split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(|s| s.is_empty()) {
            return Err(Error::Config(format!("malformed override variable {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(serde_json::Value::String(raw.clone()));
        let mut node = &mut *tree;
        for seg in &path[..path.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("{key}: '{seg}' is not a section")))?;
            node = obj.entry(seg.clone()).or_insert_with(|| serde_json::json!({}));
        }
        node.as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: parent is not a section")))?
            .insert(path[path.len() - 1].clone(), value);
        applied.push(path.join("."));
    }
    Ok(applied)
}

impl PipelineConfig {
    /// Builds the config from an optional JSON file, then the environment
    /// overrides, then validates. Every failure is `Error::Config`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<PipelineConfig> {
        let mut tree = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!(
                        "cannot read config {}: {e}; the expected format is described by {SCHEMA_PATH}",
                        p.display()
                    ))
                })?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Config(format!("{}: {e}; see {SCHEMA_PATH}", p.display()))
                })?
            }
            None => serde_json::json!({}),
        };
        if !tree.is_object() {
            return Err(Error::Config(format!("config must be a JSON object; see {SCHEMA_PATH}")));
        }
        apply_env_overrides(&mut tree, env)?;
        let config: PipelineConfig = serde_json::from_value(tree)
            .map_err(|e| Error::Config(format!("invalid config: {e}; see {SCHEMA_PATH}")))?;
        config.validate()?;
        Ok(config.normalized())
    }

    fn normalized(mut self) -> Self {
        self.separation.extractor.mode = SeparatorMode::ExtractNoise;
        self.separation.denoiser.mode = SeparatorMode::Denoise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        self.dsp.validate().map_err(cfg)?;
        self.toy.validate().map_err(cfg)?;
        self.degrade.validate().map_err(cfg)?;
        self.separation.extractor.validate().map_err(cfg)?;
        self.separation.denoiser.validate().map_err(cfg)?;
        self.separation.pretrain.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.eval.validate(self.dsp.n_mels).map_err(cfg)?;
        if self.model.n_mels != self.dsp.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels {} differs from dsp.n_mels {}",
                self.model.n_mels, self.dsp.n_mels
            )));
        }
        Ok(())
    }
}
