use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{batch_loss, fit_variance_stats, LossBreakdown, TrainConfig, UtteranceFeatures};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{AcousticModel, ForwardMode, ModelConfig, ModelInput, MODEL_KIND, MODEL_VERSION};
use crate::nn::Adam;
use crate::seed::keyed_rng;

/// Checkpoint groups holding optimizer state next to the model arrays.
pub const TRAIN_STATE_GROUPS: [&str; 2] = ["state/adam_m", "state/adam_v"];

/// Draws batches in which at least `min_clean_fraction` of the records (when
/// available) come from clean-environment conditions. Records are drawn
/// without replacement while possible.
#[derive(Clone, Debug)]
pub struct StratifiedSampler {
    clean: Vec<usize>,
    n: usize,
    batch_size: usize,
    min_clean_fraction: f64,
}

impl StratifiedSampler {
    pub fn new(features: &[UtteranceFeatures], config: &TrainConfig) -> Self {
        StratifiedSampler {
            clean: (0..features.len()).filter(|&i| config.is_clean_env(features[i].condition)).collect(),
            n: features.len(),
            batch_size: config.batch_size,
            min_clean_fraction: config.min_clean_fraction,
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let want_clean = ((self.batch_size as f64 * self.min_clean_fraction).ceil() as usize).min(self.clean.len());
        let mut clean = self.clean.clone();
        clean.shuffle(rng);
        let mut out: Vec<usize> = clean[..want_clean].to_vec();
        let mut rest: Vec<usize> = (0..self.n).filter(|i| !out.contains(i)).collect();
        rest.shuffle(rng);
        let take = (self.batch_size - out.len()).min(rest.len());
        out.extend_from_slice(&rest[..take]);
        while out.len() < self.batch_size {
            out.push(rng.random_range(0..self.n));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub path: PathBuf,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<CheckpointRecord>,
    pub log: Vec<MetricsEntry>,
}

/// Fits the variance statistics on `features` and initializes a model.
pub fn init_model(
    config: ModelConfig,
    features: &[UtteranceFeatures],
    vocab: Vec<String>,
    n_speakers: usize,
    seed: u64,
) -> Result<AcousticModel> {
    let stats = fit_variance_stats(features, config.n_bins)?;
    AcousticModel::init(config, vocab, n_speakers, stats, &mut keyed_rng(seed, "model/init"))
}

/// Model, optimizer and cached features of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: AcousticModel,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
    pub features: Vec<UtteranceFeatures>,
    /// Merged into every checkpoint's metadata.
    pub provenance: serde_json::Value,
    sampler: StratifiedSampler,
}

impl Trainer {
    pub fn new(model: AcousticModel, config: TrainConfig, features: Vec<UtteranceFeatures>, seed: u64) -> Result<Self> {
        config.validate()?;
        if features.is_empty() {
            return Err(Error::EmptySet("no training utterances".into()));
        }
        let conditions: std::collections::BTreeSet<_> = features.iter().map(|f| f.condition).collect();
        if config.alpha > 0.0 && conditions.len() < 2 {
            return Err(Error::InvalidInput(
                "training with the averaging subtask needs at least two conditions".into(),
            ));
        }
        Ok(Trainer {
            sampler: StratifiedSampler::new(&features, &config),
            adam: Adam::new(config.adam.clone()),
            model,
            config,
            step: 0,
            seed,
            features,
            provenance: serde_json::Value::Null,
        })
    }

    pub fn batch_indices(&self) -> Vec<usize> {
        self.sampler
            .sample(&mut keyed_rng(self.seed, &format!("train/step/{}", self.step)))
    }

    /// One optimizer step on an explicit batch.
    pub fn step_on(&mut self, indices: &[usize]) -> Result<(LossBreakdown, f64)> {
        let batch: Vec<&UtteranceFeatures> = indices.iter().map(|&i| &self.features[i]).collect();
        let bl = batch_loss(&self.model, &batch, &self.config, true)?;
        let diverged = Error::TrainingDiverged { step: self.step as usize };
        if !bl.breakdown.total.is_finite() {
            return Err(diverged);
        }
        let freeze = self.config.freeze_phoneme_encoder;
        let norm = self
            .adam
            .update(&mut self.model.params, &bl.grads, |n| {
                !(freeze && AcousticModel::is_phoneme_encoder_param(n))
            })
            .map_err(|_| Error::TrainingDiverged { step: self.step as usize })?;
        if self.model.params.check_finite().is_err() {
            return Err(diverged);
        }
        self.model.update_running_stats(&bl.bn_stats);
        self.step += 1;
        Ok((bl.breakdown, norm))
    }

    pub fn train_step(&mut self) -> Result<(LossBreakdown, f64)> {
        let idx = self.batch_indices();
        self.step_on(&idx)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint(self.provenance.clone());
        if let Some(meta) = ck.meta.as_object_mut() {
            meta.insert(
                "train".into(),
                serde_json::json!({
                    "config": self.config,
                    "step": self.step,
                    "adam_step": self.adam.step,
                    "seed": self.seed,
                }),
            );
        }
        ck.put_group(TRAIN_STATE_GROUPS[0], &self.adam.m);
        ck.put_group(TRAIN_STATE_GROUPS[1], &self.adam.v);
        ck
    }

    /// Writes `<dir>/step_<n>/model.ckpt` and the config echo next to it.
    pub fn save_step(&self, dir: &Path) -> Result<PathBuf> {
        let step_dir = dir.join(format!("step_{}", self.step));
        std::fs::create_dir_all(&step_dir).map_err(|e| Error::io(&step_dir, e))?;
        let path = step_dir.join("model.ckpt");
        self.to_checkpoint().save(&path)?;
        let echo = step_dir.join("train_config.json");
        let text = serde_json::to_string_pretty(&serde_json::json!({
            "train": self.config,
            "model": self.model.config,
            "seed": self.seed,
            "step": self.step,
            "provenance": self.provenance,
        }))?;
        std::fs::write(&echo, text).map_err(|e| Error::io(&echo, e))?;
        Ok(path)
    }

    /// Restores model and optimizer state; the step counter continues.
    pub fn resume(
        path: impl AsRef<Path>,
        config: TrainConfig,
        features: Vec<UtteranceFeatures>,
    ) -> Result<Self> {
        let ck = Checkpoint::load_expect(path, MODEL_KIND, MODEL_VERSION)?;
        let model = AcousticModel::from_checkpoint(&ck)?;
        #[derive(Deserialize)]
        struct State {
            step: u64,
            adam_step: u64,
            seed: u64,
        }
        let st: State = ck.meta_field("train")?;
        let mut t = Trainer::new(model, config, features, st.seed)?;
        t.step = st.step;
        t.adam.step = st.adam_step;
        t.adam.m = ck.group(TRAIN_STATE_GROUPS[0]);
        t.adam.v = ck.group(TRAIN_STATE_GROUPS[1]);
        t.provenance = ck.meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok(t)
    }
}

/// Trains to `config.steps`, checkpointing every `checkpoint_every` steps
/// and at the end when `out_dir` is given.
pub fn train_loop(
    trainer: &mut Trainer,
    out_dir: Option<&Path>,
    mut on_log: impl FnMut(&MetricsEntry),
) -> Result<TrainOutcome> {
    let started = Instant::now();
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    while trainer.step < trainer.config.steps {
        let (loss, grad_norm) = trainer.train_step()?;
        let entry = MetricsEntry {
            step: trainer.step,
            loss,
            grad_norm,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_log(&entry);
        log.push(entry);
        if let Some(dir) = out_dir {
            if trainer.step % trainer.config.checkpoint_every == 0 || trainer.step == trainer.config.steps {
                checkpoints.push(CheckpointRecord {
                    step: trainer.step,
                    path: trainer.save_step(dir)?,
                });
            }
        }
    }
    Ok(TrainOutcome { checkpoints, log })
}

/// Teacher-forced mel L1 in evaluation mode, averaged over utterances.
pub fn eval_mel_l1(model: &AcousticModel, features: &[UtteranceFeatures]) -> Result<f64> {
    if features.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let mut sum = 0.0;
    for f in features {
        let env = model.env_encode_values(&f.denoised_mel)?.embedding;
        let input = ModelInput {
            tokens: model.token_ids(&f.phonemes)?,
            speaker: f.speaker,
            env,
            noise_mel: Some(f.noise_mel.clone()),
        };
        let tg = f.targets(&model.stats);
        let p = model.forward(&input, ForwardMode::TeacherForced(&tg))?;
        sum += p.mel.iter().zip(f.target_mel.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.mel.len() as f64;
    }
    Ok(sum / features.len() as f64)
}

/// Index of the smallest loss; ties go to the earliest.
pub fn select_min(losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        if best.is_none_or(|b| l < losses[b]) {
            best = Some(i);
        }
    }
    best
}

/// Evaluates every checkpoint on `validation` and returns the index of the
/// best one with all losses.
pub fn select_best(checkpoints: &[CheckpointRecord], validation: &[UtteranceFeatures]) -> Result<(usize, Vec<f64>)> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("no checkpoints to select from".into()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let mut losses = Vec::with_capacity(checkpoints.len());
    for c in checkpoints {
        losses.push(eval_mel_l1(&AcousticModel::load(&c.path)?, validation)?);
    }
    let best = select_min(&losses).expect("non-empty");
    Ok((best, losses))
}
