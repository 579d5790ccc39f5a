use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{si_snr_graph, si_snr_slices, Separator, SeparatorMode, SEPARATOR_KIND, SEPARATOR_VERSION};
use crate::checkpoint::Checkpoint;
use crate::degrade::{DegradationCondition, Manifest};
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Graph, Mat, ParamStore};
use crate::seed::keyed_rng;

/// Aligned training triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparationExample {
    pub id: String,
    pub degraded: Waveform,
    pub clean: Waveform,
    pub noise: Waveform,
}

impl SeparationExample {
    pub fn new(id: impl Into<String>, degraded: Waveform, clean: Waveform, noise: Waveform) -> Result<Self> {
        if degraded.len() != clean.len() || degraded.len() != noise.len() {
            return Err(Error::invalid(format!(
                "misaligned triple: {} / {} / {} samples",
                degraded.len(),
                clean.len(),
                noise.len()
            )));
        }
        Ok(SeparationExample {
            id: id.into(),
            degraded,
            clean,
            noise,
        })
    }

    pub fn target(&self, mode: SeparatorMode) -> &Waveform {
        match mode {
            SeparatorMode::ExtractNoise => &self.noise,
            SeparatorMode::Denoise => &self.clean,
        }
    }

    /// Loads triples from a manifest. Records with an explicit noise file use
    /// it; Clean and Reverb records get a zero noise track (the residual of a
    /// reverberant mixture is not additive noise).
    pub fn from_manifest(manifest: &Manifest, sample_rate: u32) -> Result<Vec<SeparationExample>> {
        manifest
            .records
            .iter()
            .map(|rec| {
                let degraded = manifest.load_degraded(rec, sample_rate)?;
                let clean = manifest.load_clean(rec, sample_rate)?;
                let noise = match manifest.load_noise(rec, sample_rate)? {
                    Some(n) => n,
                    None if rec.condition == DegradationCondition::Noise => degraded.sub(&clean)?,
                    None => Waveform::zeros(degraded.len(), sample_rate),
                };
                SeparationExample::new(rec.id.clone(), degraded, clean, noise)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Training crop length in samples.
    pub crop: usize,
    pub adam: AdamConfig,
    /// Validate (and write the checkpoint) every this many steps.
    pub val_every: u64,
    /// Validation windows are centred crops of at most this many samples.
    pub val_max_samples: usize,
    /// Fraction of examples held out for validation.
    pub val_fraction: f64,
    /// Stop once validation improvement over the mixture baseline reaches
    /// this many dB. Off when absent.
    pub target_improvement_db: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 8,
            crop: 8192,
            adam: AdamConfig::default(),
            val_every: 100,
            val_max_samples: 22050,
            val_fraction: 0.2,
            target_improvement_db: None,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop == 0 || self.val_every == 0 || self.val_max_samples == 0 {
            return Err(Error::Config("pretrain sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("pretrain val_fraction must be in [0, 1)".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("pretrain learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_si_snr: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Best-validation parameters.
    pub separator: Separator,
    pub best_step: u64,
    pub best_val_si_snr: f64,
    /// Mean SI-SNR of the unprocessed mixture against the target.
    pub baseline_si_snr: f64,
    pub final_step: u64,
    pub log: Vec<PretrainLogEntry>,
}

fn has_energy(x: &[f64]) -> bool {
    let m = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() > 1e-12
}

fn centre_window(len: usize, max: usize) -> std::ops::Range<usize> {
    if len <= max {
        0..len
    } else {
        let start = (len - max) / 2;
        start..start + max
    }
}

/// Optimizer state around a separator being pretrained.
#[derive(Clone, Debug)]
pub struct Pretrainer {
    pub separator: Separator,
    pub config: PretrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
    pub best: Option<(u64, f64, ParamStore)>,
}

impl Pretrainer {
    pub fn new(separator: Separator, config: PretrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Pretrainer {
            adam: Adam::new(config.adam.clone()),
            separator,
            config,
            step: 0,
            seed,
            best: None,
        })
    }

    pub fn mode(&self) -> SeparatorMode {
        self.separator.config.mode
    }

    /// Mean negative SI-SNR over `batch` crops and its parameter gradients.
    pub fn batch_loss(&self, crops: &[(Vec<f64>, Vec<f64>)]) -> Result<(f64, std::collections::BTreeMap<String, Mat>)> {
        let mut total = 0.0;
        let mut grads: std::collections::BTreeMap<String, Mat> = std::collections::BTreeMap::new();
        let scale = 1.0 / crops.len() as f64;
        for (input, target) in crops {
            let mut g = Graph::new(&self.separator.params);
            let x = g.constant(Mat::from_shape_vec((input.len(), 1), input.clone()).expect("column"));
            let y = self.separator.forward_graph(&mut g, x)?;
            let snr = si_snr_graph(&mut g, y, target)?;
            let loss = g.scale(snr, -scale);
            total += g.scalar(loss);
            for (name, grad) in g.backward(loss).into_params(&self.separator.params) {
                match grads.get_mut(&name) {
                    Some(acc) => *acc += &grad,
                    None => {
                        grads.insert(name, grad);
                    }
                }
            }
        }
        Ok((total, grads))
    }

    fn sample_crops(&self, train: &[SeparationExample]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = keyed_rng(self.seed, &format!("pretrain/step/{}", self.step));
        let mode = self.mode();
        let mut crops = Vec::with_capacity(self.config.batch_size);
        let mut attempts = 0;
        while crops.len() < self.config.batch_size && attempts < self.config.batch_size * 20 {
            attempts += 1;
            let ex = &train[rng.random_range(0..train.len())];
            let len = ex.degraded.len().min(self.config.crop);
            let start = rng.random_range(0..=ex.degraded.len() - len);
            let target = &ex.target(mode).samples()[start..start + len];
            if !has_energy(target) {
                continue;
            }
            crops.push((ex.degraded.samples()[start..start + len].to_vec(), target.to_vec()));
        }
        crops
    }

    /// One optimizer step. Returns (loss, pre-clip gradient norm).
    pub fn train_step(&mut self, train: &[SeparationExample]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::EmptySet("no separation training examples".into()));
        }
        let crops = self.sample_crops(train);
        if crops.is_empty() {
            return Err(Error::InvalidTarget);
        }
        let (loss, grads) = self.batch_loss(&crops)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step: self.step as usize });
        }
        let norm = self
            .adam
            .update(&mut self.separator.params, &grads, |_| true)
            .map_err(|_| Error::TrainingDiverged { step: self.step as usize })?;
        if self.separator.params.check_finite().is_err() {
            return Err(Error::TrainingDiverged { step: self.step as usize });
        }
        self.step += 1;
        Ok((loss, norm))
    }

    fn val_pairs<'a>(&self, val: &'a [SeparationExample]) -> Vec<(&'a [f64], &'a [f64], u32)> {
        let mode = self.mode();
        val.iter()
            .filter_map(|ex| {
                let r = centre_window(ex.degraded.len(), self.config.val_max_samples);
                let t = &ex.target(mode).samples()[r.clone()];
                has_energy(t).then(|| (&ex.degraded.samples()[r], t, ex.degraded.sample_rate()))
            })
            .collect()
    }

    /// Mean SI-SNR of the current estimate on the validation windows.
    pub fn validate(&self, val: &[SeparationExample]) -> Result<f64> {
        let pairs = self.val_pairs(val);
        if pairs.is_empty() {
            return Err(Error::EmptySet("no usable validation examples".into()));
        }
        let mut sum = 0.0;
        for (input, target, sr) in &pairs {
            let w = Waveform::new(input.to_vec(), *sr)?;
            let est = self.separator.forward(&w)?;
            sum += si_snr_slices(est.samples(), target)?;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Mean SI-SNR of the unprocessed mixture on the validation windows.
    pub fn baseline(&self, val: &[SeparationExample]) -> Result<f64> {
        let pairs = self.val_pairs(val);
        if pairs.is_empty() {
            return Err(Error::EmptySet("no usable validation examples".into()));
        }
        let mut sum = 0.0;
        for (input, target, _) in &pairs {
            sum += si_snr_slices(input, target)?;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Records `score` and keeps the parameters when it is the best so far.
    pub fn observe_validation(&mut self, score: f64) -> bool {
        let better = self.best.as_ref().is_none_or(|(_, b, _)| score > *b);
        if better {
            self.best = Some((self.step, score, self.separator.params.clone()));
        }
        better
    }

    pub fn best_separator(&self) -> Separator {
        Separator {
            config: self.separator.config.clone(),
            params: self
                .best
                .as_ref()
                .map(|(_, _, p)| p.clone())
                .unwrap_or_else(|| self.separator.params.clone()),
        }
    }

    /// The checkpoint's `params` group holds the best parameters, so the
    /// file is directly usable as a separator; the `state/` groups allow
    /// resuming.
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let (best_step, best_val) = self.best.as_ref().map(|(s, v, _)| (*s, *v)).unzip();
        let mut ck = self.best_separator().to_checkpoint(extra);
        if let Some(meta) = ck.meta.as_object_mut() {
            meta.insert(
                "pretrain".into(),
                serde_json::json!({
                    "config": self.config,
                    "step": self.step,
                    "adam_step": self.adam.step,
                    "seed": self.seed,
                    "best_step": best_step,
                    "best_val_si_snr": best_val,
                }),
            );
        }
        ck.put_group("state/params", &self.separator.params);
        ck.put_group("state/adam_m", &self.adam.m);
        ck.put_group("state/adam_v", &self.adam.v);
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    /// Restores a pretrainer saved with [`Pretrainer::save`]. The step counter
    /// continues from the saved value.
    pub fn resume(path: impl AsRef<Path>, config: PretrainConfig) -> Result<Self> {
        let ck = Checkpoint::load_expect(path, SEPARATOR_KIND, SEPARATOR_VERSION)?;
        let best = Separator::from_checkpoint(&ck)?;
        #[derive(Deserialize)]
        struct State {
            step: u64,
            adam_step: u64,
            seed: u64,
            best_step: Option<u64>,
            best_val_si_snr: Option<f64>,
        }
        let st: State = ck.meta_field("pretrain")?;
        let current = ck.group("state/params");
        best.params.check_layout(&current)?;
        let mut p = Pretrainer::new(
            Separator {
                config: best.config.clone(),
                params: current,
            },
            config,
            st.seed,
        )?;
        p.step = st.step;
        p.adam.step = st.adam_step;
        p.adam.m = ck.group("state/adam_m");
        p.adam.v = ck.group("state/adam_v");
        if let (Some(s), Some(v)) = (st.best_step, st.best_val_si_snr) {
            p.best = Some((s, v, best.params));
        }
        Ok(p)
    }
}

/// Runs pretraining to `config.steps` total steps, validating every
/// `val_every` steps and calling `checkpoint` after each validation.
pub fn pretrain_separator(
    mut trainer: Pretrainer,
    train: &[SeparationExample],
    val: &[SeparationExample],
    mut on_log: impl FnMut(&PretrainLogEntry),
    mut checkpoint: impl FnMut(&Pretrainer) -> Result<()>,
) -> Result<PretrainOutcome> {
    let started = Instant::now();
    let baseline = trainer.baseline(val)?;
    let mut log = Vec::new();
    while trainer.step < trainer.config.steps {
        let (loss, grad_norm) = trainer.train_step(train)?;
        let val_si_snr = if trainer.step % trainer.config.val_every == 0 || trainer.step == trainer.config.steps {
            let v = trainer.validate(val)?;
            trainer.observe_validation(v);
            Some(v)
        } else {
            None
        };
        let entry = PretrainLogEntry {
            step: trainer.step,
            loss,
            grad_norm,
            val_si_snr,
            wall_secs: started.elapsed().as_secs_f64(),
        };
        on_log(&entry);
        log.push(entry);
        if let Some(v) = val_si_snr {
            checkpoint(&trainer)?;
            if trainer.config.target_improvement_db.is_some_and(|t| v - baseline >= t) {
                break;
            }
        }
    }
    if trainer.best.is_none() {
        let v = trainer.validate(val)?;
        trainer.observe_validation(v);
        checkpoint(&trainer)?;
    }
    let (best_step, best_val, _) = trainer.best.clone().expect("validated at least once");
    Ok(PretrainOutcome {
        separator: trainer.best_separator(),
        best_step,
        best_val_si_snr: best_val,
        baseline_si_snr: baseline,
        final_step: trainer.step,
        log,
    })
}
