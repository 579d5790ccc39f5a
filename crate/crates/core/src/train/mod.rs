//! Training objective (main task plus averaged-embedding subtask), batch
//! sampling and the optimization loop.

mod features;
mod trainer;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::degrade::DegradationCondition;
use crate::error::{Error, Result};
use crate::model::{AcousticModel, BnBatchStats, ForwardMode, ForwardVars, NoiseSource, Prediction, VarianceTargets};
use crate::nn::{AdamConfig, Graph, Mat, Var};

pub use features::{
    fit_frames, fit_variance_stats, frame_energy, prepare_all_features, prepare_batch_features, prepare_features,
    Separators, UtteranceFeatures,
};
pub use trainer::{
    eval_mel_l1, init_model, select_best, select_min, train_loop, CheckpointRecord, MetricsEntry, StratifiedSampler,
    TrainOutcome, Trainer, TRAIN_STATE_GROUPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the averaged-embedding subtask.
    pub alpha: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Conditions whose utterances count as environmentally clean.
    pub clean_env_conditions: BTreeSet<DegradationCondition>,
    /// Conditions that feed silence to the noise encoder.
    pub silence_conditions: BTreeSet<DegradationCondition>,
    pub freeze_phoneme_encoder: bool,
    /// Minimum share of clean-environment records in each batch.
    pub min_clean_fraction: f64,
    /// The subtask is skipped when fewer clean-environment records than
    /// this are in the batch.
    pub min_average_subset: usize,
    /// Fraction of records held out for checkpoint selection.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            batch_size: 16,
            adam: AdamConfig::default(),
            steps: 2000,
            checkpoint_every: 500,
            clean_env_conditions: [DegradationCondition::Clean, DegradationCondition::Noise].into(),
            silence_conditions: [DegradationCondition::Clean, DegradationCondition::Reverb].into(),
            freeze_phoneme_encoder: false,
            min_clean_fraction: 0.25,
            min_average_subset: 2,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("train.alpha must be >= 0, got {}", self.alpha)));
        }
        if self.clean_env_conditions.is_empty() {
            return Err(Error::Config("train.clean_env_conditions must not be empty".into()));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.min_average_subset == 0 {
            return Err(Error::Config("train sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_clean_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("train fractions out of range".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("train learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn is_clean_env(&self, c: DegradationCondition) -> bool {
        self.clean_env_conditions.contains(&c)
    }
}

/// Loss components of one step; `total = l_main + alpha·l_average`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mel_l1: f64,
    pub duration_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
    pub l_main: f64,
    pub l_average: f64,
    pub total: f64,
}

/// Main-task components for one set of predictions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub mel_l1: f64,
    pub duration_mse: f64,
    pub pitch_mse: f64,
    pub energy_mse: f64,
}

impl LossParts {
    pub fn sum(&self) -> f64 {
        self.mel_l1 + self.duration_mse + self.pitch_mse + self.energy_mse
    }
}

pub fn total_loss(l_main: f64, l_average: f64, alpha: f64) -> f64 {
    l_main + alpha * l_average
}

/// Log-duration target with +1 smoothing.
pub fn log_duration_target(d: usize) -> f64 {
    (d as f64 + 1.0).ln()
}

/// Main loss of a teacher-forced prediction: mel L1, log-duration MSE,
/// voiced-frame pitch MSE and energy MSE.
pub fn loss_main(pred: &Prediction, target_mel: &Mat, targets: &VarianceTargets, voiced: &[bool]) -> Result<LossParts> {
    let t = target_mel.nrows();
    if pred.mel.dim() != target_mel.dim()
        || pred.log_durations.len() != targets.durations.len()
        || pred.pitch.len() != t
        || pred.energy.len() != t
        || targets.pitch.len() != t
        || targets.energy.len() != t
        || voiced.len() != t
    {
        return Err(Error::invalid("prediction and target shapes disagree"));
    }
    let mel_l1 = pred.mel.iter().zip(target_mel.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.mel.len() as f64;
    let duration_mse = pred
        .log_durations
        .iter()
        .zip(&targets.durations)
        .map(|(p, &d)| (p - log_duration_target(d)).powi(2))
        .sum::<f64>()
        / targets.durations.len() as f64;
    let n_voiced = voiced.iter().filter(|v| **v).count();
    let pitch_mse = if n_voiced == 0 {
        0.0
    } else {
        (0..t)
            .filter(|&i| voiced[i])
            .map(|i| (pred.pitch[i] - targets.pitch[i]).powi(2))
            .sum::<f64>()
            / n_voiced as f64
    };
    let energy_mse = pred.energy.iter().zip(&targets.energy).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / t as f64;
    Ok(LossParts {
        mel_l1,
        duration_mse,
        pitch_mse,
        energy_mse,
    })
}

fn column(v: Vec<f64>) -> Mat {
    let n = v.len();
    Mat::from_shape_vec((n, 1), v).expect("column")
}

/// Graph nodes of the four main-task components of one utterance.
#[derive(Clone, Copy, Debug)]
struct PartVars {
    mel: Var,
    duration: Var,
    pitch: Option<Var>,
    energy: Var,
}

fn loss_parts_graph(g: &mut Graph, out: &ForwardVars, f: &UtteranceFeatures, targets: &VarianceTargets) -> PartVars {
    let tm = g.constant(f.target_mel.clone());
    let d = g.sub(out.mel, tm);
    let d = g.abs(d);
    let mel = g.mean_all(d);

    let td = g.constant(column(targets.durations.iter().map(|&d| log_duration_target(d)).collect()));
    let d = g.sub(out.log_durations, td);
    let d = g.square(d);
    let duration = g.mean_all(d);

    let voiced = f.voiced();
    let n_voiced = voiced.iter().filter(|v| **v).count();
    let pitch = (n_voiced > 0).then(|| {
        let tp = g.constant(column(targets.pitch.clone()));
        let mask = g.constant(column(voiced.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()));
        let d = g.sub(out.pitch, tp);
        let d = g.mul(d, mask);
        let d = g.square(d);
        let s = g.sum_all(d);
        g.scale(s, 1.0 / n_voiced as f64)
    });

    let te = g.constant(column(targets.energy.clone()));
    let d = g.sub(out.energy, te);
    let d = g.square(d);
    let energy = g.mean_all(d);
    PartVars {
        mel,
        duration,
        pitch,
        energy,
    }
}

/// Averages each component over utterances; returns (l_main node, parts).
fn aggregate(g: &mut Graph, parts: &[PartVars]) -> (Var, LossParts) {
    let n = parts.len() as f64;
    let mut sum_of = |sel: &dyn Fn(&PartVars) -> Option<Var>| -> Option<Var> {
        let vars: Vec<Var> = parts.iter().filter_map(sel).collect();
        let mut acc = *vars.first()?;
        for v in &vars[1..] {
            acc = g.add(acc, *v);
        }
        Some(g.scale(acc, 1.0 / n))
    };
    let mel = sum_of(&|p| Some(p.mel)).expect("non-empty");
    let duration = sum_of(&|p| Some(p.duration)).expect("non-empty");
    let pitch = sum_of(&|p| p.pitch);
    let energy = sum_of(&|p| Some(p.energy)).expect("non-empty");
    let mut l = g.add(mel, duration);
    if let Some(p) = pitch {
        l = g.add(l, p);
    }
    l = g.add(l, energy);
    let parts = LossParts {
        mel_l1: g.scalar(mel),
        duration_mse: g.scalar(duration),
        pitch_mse: pitch.map(|p| g.scalar(p)).unwrap_or(0.0),
        energy_mse: g.scalar(energy),
    };
    (l, parts)
}

/// Loss of one batch with its gradients and the batch-norm statistics seen.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Mat>,
    pub bn_stats: Vec<BnBatchStats>,
    /// Indices of the records that entered the averaging subtask.
    pub average_subset: Vec<usize>,
}

/// Teacher-forced training loss of a batch: the main task on every record
/// and, when at least `min_average_subset` records are environmentally
/// clean, the same loss on those records with their environment embeddings
/// replaced by the subset mean.
pub fn batch_loss(
    model: &AcousticModel,
    batch: &[&UtteranceFeatures],
    config: &TrainConfig,
    with_grad: bool,
) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(Error::EmptySet("empty training batch".into()));
    }
    let mut g = Graph::new(&model.params);
    let noise_mels: Vec<&Mat> = batch.iter().map(|f| &f.noise_mel).collect();
    let (h_noise, bn_stats) = model.noise_encode_graph(&mut g, &noise_mels, true)?;
    let mut envs = Vec::with_capacity(batch.len());
    let mut tokens = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut main_parts = Vec::with_capacity(batch.len());
    for (i, f) in batch.iter().enumerate() {
        let (env, _) = model.env_encode_graph(&mut g, &f.denoised_mel)?;
        let tk = model.token_ids(&f.phonemes)?;
        let tg = f.targets(&model.stats);
        let out = model.forward_graph(
            &mut g,
            &tk,
            f.speaker,
            env,
            NoiseSource::Embedded(h_noise[i]),
            &ForwardMode::TeacherForced(&tg),
        )?;
        main_parts.push(loss_parts_graph(&mut g, &out, f, &tg));
        envs.push(env);
        tokens.push(tk);
        targets.push(tg);
    }
    let (l_main, parts) = aggregate(&mut g, &main_parts);

    let subset: Vec<usize> = (0..batch.len()).filter(|&i| config.is_clean_env(batch[i].condition)).collect();
    let l_avg = if subset.len() >= config.min_average_subset {
        let mut acc = envs[subset[0]];
        for &i in &subset[1..] {
            acc = g.add(acc, envs[i]);
        }
        let mean = g.scale(acc, 1.0 / subset.len() as f64);
        let mut avg_parts = Vec::with_capacity(subset.len());
        for &i in &subset {
            let out = model.forward_graph(
                &mut g,
                &tokens[i],
                batch[i].speaker,
                mean,
                NoiseSource::Embedded(h_noise[i]),
                &ForwardMode::TeacherForced(&targets[i]),
            )?;
            avg_parts.push(loss_parts_graph(&mut g, &out, batch[i], &targets[i]));
        }
        Some(aggregate(&mut g, &avg_parts).0)
    } else {
        None
    };

    let total = match l_avg {
        Some(a) if config.alpha > 0.0 => {
            let w = g.scale(a, config.alpha);
            g.add(l_main, w)
        }
        _ => l_main,
    };
    let l_main_v = g.scalar(l_main);
    let l_average = l_avg.map(|a| g.scalar(a)).unwrap_or(0.0);
    let breakdown = LossBreakdown {
        mel_l1: parts.mel_l1,
        duration_mse: parts.duration_mse,
        pitch_mse: parts.pitch_mse,
        energy_mse: parts.energy_mse,
        l_main: l_main_v,
        l_average,
        total: g.scalar(total),
    };
    let grads = if with_grad {
        g.backward(total).into_params(&model.params)
    } else {
        BTreeMap::new()
    };
    Ok(BatchLoss {
        breakdown,
        grads,
        bn_stats,
        average_subset: if l_avg.is_some() { subset } else { Vec::new() },
    })
}
