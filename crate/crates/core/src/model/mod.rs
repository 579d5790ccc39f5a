//! Non-autoregressive acoustic model with a frame-level noise encoder and an
//! utterance-level style-token environment encoder.

mod net;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::{glorot, layers, normal, Graph, Mat, ParamStore};
use crate::seed::seeded_rng;

pub use net::{BnBatchStats, ForwardVars, NoiseSource};

pub const MODEL_KIND: &str = "acoustic-model";
pub const MODEL_VERSION: u32 = 1;
pub const BN_EPS: f64 = 1e-5;
/// Typical log-mel level and spread, used to centre inputs and outputs.
pub const MEL_CENTRE: f64 = -5.0;
pub const MEL_SCALE: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    /// Attention heads in encoder and decoder blocks.
    pub heads: usize,
    pub ffn_dim: usize,
    pub ffn_kernel: usize,
    pub variance_filter: usize,
    pub variance_kernel: usize,
    pub noise_blocks: usize,
    pub noise_kernel: usize,
    /// Output channels of the strided 2-D reference convolutions.
    pub ref_channels: Vec<usize>,
    pub style_tokens: usize,
    pub style_heads: usize,
    /// Quantization bins for pitch and energy embeddings.
    pub n_bins: usize,
    pub n_mels: usize,
    /// Weight of the newest batch in batch-norm running statistics.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            enc_blocks: 4,
            dec_blocks: 6,
            heads: 2,
            ffn_dim: 1024,
            ffn_kernel: 9,
            variance_filter: 256,
            variance_kernel: 3,
            noise_blocks: 4,
            noise_kernel: 3,
            ref_channels: vec![32, 32, 64, 64],
            style_tokens: 10,
            style_heads: 8,
            n_bins: 256,
            n_mels: 80,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Small sizes for tests and toy runs.
    pub fn desk() -> Self {
        ModelConfig {
            hidden: 32,
            enc_blocks: 2,
            dec_blocks: 2,
            heads: 2,
            ffn_dim: 64,
            ffn_kernel: 3,
            variance_filter: 32,
            variance_kernel: 3,
            noise_blocks: 4,
            noise_kernel: 3,
            ref_channels: vec![8, 8, 16, 16],
            style_tokens: 10,
            style_heads: 8,
            n_bins: 256,
            n_mels: 80,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.hidden,
            self.heads,
            self.ffn_dim,
            self.ffn_kernel,
            self.variance_filter,
            self.variance_kernel,
            self.noise_kernel,
            self.style_tokens,
            self.style_heads,
            self.n_mels,
        ];
        if sizes.contains(&0) || self.ref_channels.is_empty() || self.ref_channels.contains(&0) {
            return Err(Error::Config(format!("model sizes must be positive: {self:?}")));
        }
        if self.hidden % self.heads != 0 || self.hidden % self.style_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be divisible by heads {} and style heads {}",
                self.hidden, self.heads, self.style_heads
            )));
        }
        if self.n_bins < 2 {
            return Err(Error::Config("n_bins must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Mel-axis width after the reference convolutions.
    pub fn ref_width(&self) -> usize {
        self.ref_channels.iter().fold(self.n_mels, |w, _| w.div_ceil(2))
    }
}

/// Uniform bins over `[min, max]`; a value equal to an edge goes to the
/// lower bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantizer {
    pub min: f64,
    pub max: f64,
    pub n_bins: usize,
}

impl Quantizer {
    pub fn new(min: f64, max: f64, n_bins: usize) -> Self {
        Quantizer { min, max, n_bins }
    }

    pub fn edge(&self, k: usize) -> f64 {
        self.min + (self.max - self.min) * k as f64 / self.n_bins as f64
    }

    pub fn bin(&self, v: f64) -> usize {
        // Count of interior edges strictly below v.
        let (mut lo, mut hi) = (0usize, self.n_bins - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.edge(mid + 1) < v {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// Standardization and quantization of the variance targets, fitted on the
/// training corpus and stored with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    /// Mean and standard deviation of voiced natural-log F0.
    pub log_f0_mean: f64,
    pub log_f0_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    /// Bins over the standardized values.
    pub pitch_bins: Quantizer,
    pub energy_bins: Quantizer,
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len().max(1) as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    (m, v.sqrt().max(1e-6))
}

fn min_max(x: impl Iterator<Item = f64>) -> (f64, f64) {
    x.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

impl VarianceStats {
    /// `f0_hz` holds voiced frames only.
    pub fn fit(f0_hz: &[f64], energy: &[f64], n_bins: usize) -> Result<Self> {
        if energy.is_empty() {
            return Err(Error::EmptySet("no frames to fit variance statistics".into()));
        }
        let logs: Vec<f64> = f0_hz.iter().filter(|f| **f > 0.0).map(|f| f.ln()).collect();
        let (lm, ls) = if logs.is_empty() { (0.0, 1.0) } else { mean_std(&logs) };
        let (em, es) = mean_std(energy);
        let (pmin, pmax) = if logs.is_empty() {
            (-1.0, 1.0)
        } else {
            min_max(logs.iter().map(|l| (l - lm) / ls))
        };
        let (emin, emax) = min_max(energy.iter().map(|e| (e - em) / es));
        Ok(VarianceStats {
            log_f0_mean: lm,
            log_f0_std: ls,
            energy_mean: em,
            energy_std: es,
            pitch_bins: Quantizer::new(pmin, pmax, n_bins),
            energy_bins: Quantizer::new(emin, emax, n_bins),
        })
    }

    /// Standardized log-F0; unvoiced frames map to 0.
    pub fn normalize_f0(&self, f0_hz: f64) -> f64 {
        if f0_hz > 0.0 {
            (f0_hz.ln() - self.log_f0_mean) / self.log_f0_std
        } else {
            0.0
        }
    }

    pub fn denormalize_f0(&self, z: f64) -> f64 {
        (z * self.log_f0_std + self.log_f0_mean).exp()
    }

    pub fn normalize_energy(&self, e: f64) -> f64 {
        (e - self.energy_mean) / self.energy_std
    }

    pub fn identity(n_bins: usize) -> Self {
        VarianceStats {
            log_f0_mean: 0.0,
            log_f0_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
            pitch_bins: Quantizer::new(-3.0, 3.0, n_bins),
            energy_bins: Quantizer::new(-3.0, 3.0, n_bins),
        }
    }
}

/// Utterance-level environment vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvEmbedding {
    pub values: Vec<f64>,
}

impl EnvEmbedding {
    pub fn zeros(dim: usize) -> Self {
        EnvEmbedding { values: vec![0.0; dim] }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn cosine(&self, other: &EnvEmbedding) -> f64 {
        let dot: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        dot / (self.norm() * other.norm()).max(1e-12)
    }

    pub fn mean(items: &[EnvEmbedding]) -> Result<EnvEmbedding> {
        let first = items.first().ok_or_else(|| Error::EmptySet("no embeddings to average".into()))?;
        let mut acc = vec![0.0; first.values.len()];
        for e in items {
            for (a, v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        let n = items.len() as f64;
        Ok(EnvEmbedding {
            values: acc.into_iter().map(|a| a / n).collect(),
        })
    }

    pub fn as_row(&self) -> Mat {
        Mat::from_shape_vec((1, self.values.len()), self.values.clone()).expect("row")
    }
}

/// Output of the environment encoder together with per-head attention.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvEncoding {
    pub embedding: EnvEmbedding,
    /// `style_heads × style_tokens` weights.
    pub attention: Mat,
}

/// Ground-truth values for teacher forcing. Pitch and energy are
/// standardized.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ForwardMode<'a> {
    TeacherForced(&'a VarianceTargets),
    /// Free-running unless durations or normalized pitch are given.
    Inference {
        durations: Option<&'a [usize]>,
        pitch: Option<&'a [f64]>,
    },
}

/// One utterance's conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub env: EnvEmbedding,
    /// Extracted-noise mel; `None` means the silence input.
    pub noise_mel: Option<Mat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mel: Mat,
    pub log_durations: Vec<f64>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VariancePrediction {
    pub log_durations: Vec<f64>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    /// Regulated frames with pitch and energy embeddings added.
    pub frames: Mat,
}

/// Duration in frames from a predicted `ln(d + 1)`: round half up,
/// at least one frame.
pub fn duration_from_log(p: f64) -> usize {
    let d = (p.exp() - 1.0 + 0.5).floor();
    if d.is_finite() && d >= 1.0 {
        d as usize
    } else {
        1
    }
}

/// Row `i` of `hidden` repeated `durations[i]` times.
pub fn length_regulate(hidden: &Mat, durations: &[usize]) -> Result<Mat> {
    let idx = regulate_index(hidden.nrows(), durations)?;
    let mut out = Mat::zeros((idx.len(), hidden.ncols()));
    for (i, &j) in idx.iter().enumerate() {
        out.row_mut(i).assign(&hidden.row(j));
    }
    Ok(out)
}

pub(crate) fn regulate_index(rows: usize, durations: &[usize]) -> Result<Vec<usize>> {
    if durations.len() != rows {
        return Err(Error::invalid(format!(
            "{} durations for {rows} phonemes",
            durations.len()
        )));
    }
    let idx: Vec<usize> = durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(i, d))
        .collect();
    if idx.is_empty() {
        return Err(Error::EmptyExpansion);
    }
    Ok(idx)
}

/// Configuration, vocabulary, variance statistics, learned parameters and
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub n_speakers: usize,
    pub stats: VarianceStats,
    pub params: ParamStore,
    pub buffers: ParamStore,
}

/// Parameter-name prefixes of the phoneme encoder.
pub const PHONEME_ENCODER_PREFIXES: [&str; 2] = ["phoneme.", "enc."];

fn init_variance_predictor<R: Rng>(p: &mut ParamStore, rng: &mut R, prefix: &str, c: &ModelConfig) {
    layers::init_conv1d(p, rng, &format!("{prefix}.c1"), c.hidden, c.variance_filter, c.variance_kernel);
    layers::init_layer_norm(p, &format!("{prefix}.ln1"), c.variance_filter);
    layers::init_conv1d(p, rng, &format!("{prefix}.c2"), c.variance_filter, c.variance_filter, c.variance_kernel);
    layers::init_layer_norm(p, &format!("{prefix}.ln2"), c.variance_filter);
    layers::init_linear(p, rng, &format!("{prefix}.out"), c.variance_filter, 1);
}

impl AcousticModel {
    pub fn init<R: Rng>(
        config: ModelConfig,
        vocab: Vec<String>,
        n_speakers: usize,
        stats: VarianceStats,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if vocab.is_empty() || n_speakers == 0 {
            return Err(Error::Config("model needs a non-empty vocabulary and at least one speaker".into()));
        }
        if stats.pitch_bins.n_bins != config.n_bins || stats.energy_bins.n_bins != config.n_bins {
            return Err(Error::Config("variance statistics disagree with n_bins".into()));
        }
        let c = &config;
        let h = c.hidden;
        let mut p = ParamStore::new();
        let mut b = ParamStore::new();
        p.insert("phoneme.emb", normal(rng, vocab.len(), h, (1.0 / h as f64).sqrt()));
        p.insert("speaker.emb", normal(rng, n_speakers, h, 0.1));
        for i in 0..c.enc_blocks {
            layers::init_transformer_block(&mut p, rng, &format!("enc.{i}"), h, c.ffn_dim, c.ffn_kernel);
        }
        init_variance_predictor(&mut p, rng, "duration", c);
        init_variance_predictor(&mut p, rng, "pitch", c);
        init_variance_predictor(&mut p, rng, "energy", c);
        p.insert("pitch_emb", normal(rng, c.n_bins, h, 0.1));
        p.insert("energy_emb", normal(rng, c.n_bins, h, 0.1));

        layers::init_linear(&mut p, rng, "noise.in", c.n_mels, h);
        for i in 0..c.noise_blocks {
            for (conv, bn) in [("c1", "bn1"), ("c2", "bn2")] {
                layers::init_conv1d(&mut p, rng, &format!("noise.{i}.{conv}"), h, h, c.noise_kernel);
                layers::init_layer_norm(&mut p, &format!("noise.{i}.{bn}"), h);
                b.insert(format!("noise.{i}.{bn}.mean"), Mat::zeros((1, h)));
                b.insert(format!("noise.{i}.{bn}.var"), Mat::ones((1, h)));
            }
        }

        let mut c_in = 1;
        for (i, &c_out) in c.ref_channels.iter().enumerate() {
            p.insert(format!("style.ref.{i}.w"), glorot(rng, 9 * c_in, c_out));
            p.insert(format!("style.ref.{i}.b"), Mat::zeros((1, c_out)));
            c_in = c_out;
        }
        layers::init_linear(&mut p, rng, "style.ref.proj", c.ref_width() * c_in, h);
        p.insert("style.tokens", normal(rng, c.style_tokens, h, 0.5));
        for n in ["q", "k", "v"] {
            layers::init_linear(&mut p, rng, &format!("style.{n}"), h, h);
        }

        for i in 0..c.dec_blocks {
            layers::init_transformer_block(&mut p, rng, &format!("dec.{i}"), h, c.ffn_dim, c.ffn_kernel);
        }
        layers::init_linear(&mut p, rng, "mel.out", h, c.n_mels);
        p.insert("mel.out.b", Mat::from_elem((1, c.n_mels), MEL_CENTRE));
        Ok(AcousticModel {
            config,
            vocab,
            n_speakers,
            stats,
            params: p,
            buffers: b,
        })
    }

    pub fn init_seeded(
        config: ModelConfig,
        vocab: Vec<String>,
        n_speakers: usize,
        stats: VarianceStats,
        seed: u64,
    ) -> Result<Self> {
        AcousticModel::init(config, vocab, n_speakers, stats, &mut seeded_rng(seed))
    }

    pub fn env_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn is_phoneme_encoder_param(name: &str) -> bool {
        PHONEME_ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
    }

    pub fn token_ids(&self, phonemes: &[String]) -> Result<Vec<usize>> {
        phonemes
            .iter()
            .map(|p| {
                self.vocab
                    .iter()
                    .position(|v| v == p)
                    .ok_or_else(|| Error::invalid(format!("phoneme '{p}' is not in the model vocabulary")))
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[usize], speaker: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty phoneme sequence"));
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.vocab.len()) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.vocab.len())));
        }
        if speaker >= self.n_speakers {
            return Err(Error::invalid(format!("speaker {speaker} outside {} speakers", self.n_speakers)));
        }
        Ok(())
    }

    fn check_env(&self, env: &EnvEmbedding) -> Result<()> {
        if env.values.len() != self.env_dim() || env.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "environment embedding must be {} finite values",
                self.env_dim()
            )));
        }
        Ok(())
    }

    fn check_mel(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.config.n_mels || m.nrows() == 0 {
            return Err(Error::invalid(format!(
                "mel input must be T×{} with T ≥ 1, got {:?}",
                self.config.n_mels,
                m.dim()
            )));
        }
        Ok(())
    }

    /// Phoneme encoder output with speaker and environment added.
    pub fn encode_phonemes(&self, tokens: &[usize], speaker: usize, env: &EnvEmbedding) -> Result<Mat> {
        self.check_tokens(tokens, speaker)?;
        self.check_env(env)?;
        let mut g = Graph::new(&self.params);
        let e = g.constant(env.as_row());
        let v = self.encode_phonemes_graph(&mut g, tokens, speaker, e)?;
        Ok(g.value(v).clone())
    }

    /// Duration prediction on `encoded` (L×hidden) and pitch/energy
    /// prediction on the regulated `frames` (T×hidden). With `targets` the
    /// embeddings use the given standardized values instead of the
    /// predictions.
    pub fn predict_variances(
        &self,
        encoded: &Mat,
        frames: &Mat,
        targets: Option<(&[f64], &[f64])>,
    ) -> Result<VariancePrediction> {
        let mut g = Graph::new(&self.params);
        let enc = g.constant(encoded.clone());
        let fr = g.constant(frames.clone());
        let d = self.variance_predictor_graph(&mut g, enc, "duration")?;
        let (out, p, e) = self.variance_adaptor_graph(&mut g, fr, targets.map(|t| t.0), targets.map(|t| t.1))?;
        Ok(VariancePrediction {
            log_durations: g.value(d).iter().copied().collect(),
            pitch: g.value(p).iter().copied().collect(),
            energy: g.value(e).iter().copied().collect(),
            frames: g.value(out).clone(),
        })
    }

    /// Evaluation-mode noise encoding; `target_frames` must equal the mel's
    /// frame count.
    pub fn noise_encode(&self, y_noise: &MelSpectrogram, target_frames: usize) -> Result<Mat> {
        if y_noise.frames() != target_frames {
            return Err(Error::FrameMismatch {
                expected: target_frames,
                actual: y_noise.frames(),
            });
        }
        self.check_mel(y_noise.values())?;
        let mut g = Graph::new(&self.params);
        let (vars, _) = self.noise_encode_graph(&mut g, &[y_noise.values()], false)?;
        Ok(g.value(vars[0]).clone())
    }

    /// Noise embedding of the silence input (zero waveform).
    pub fn silence_embedding(&self, frames: usize) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let v = self.silence_graph(&mut g, frames)?;
        Ok(g.value(v).clone())
    }

    pub fn env_encode(&self, y_denoised: &MelSpectrogram) -> Result<EnvEncoding> {
        self.env_encode_values(y_denoised.values())
    }

    /// [`AcousticModel::env_encode`] on a bare `T × n_mels` matrix.
    pub fn env_encode_values(&self, mel: &Mat) -> Result<EnvEncoding> {
        let mut g = Graph::new(&self.params);
        let (v, attention) = self.env_encode_graph(&mut g, mel)?;
        Ok(EnvEncoding {
            embedding: EnvEmbedding {
                values: g.value(v).iter().copied().collect(),
            },
            attention,
        })
    }

    /// Rows of the per-token value projections (`style_tokens × hidden`);
    /// head `h` owns columns `h·d .. (h+1)·d`.
    pub fn style_values(&self) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let t = g.param("style.tokens")?;
        let t = g.tanh(t);
        let v = layers::linear(&mut g, t, "style.v")?;
        Ok(g.value(v).clone())
    }

    pub fn decode(&self, frames: &Mat, h_noise: &Mat) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let f = g.constant(frames.clone());
        let n = g.constant(h_noise.clone());
        let v = self.decode_graph(&mut g, f, Some(n))?;
        Ok(g.value(v).clone())
    }

    /// Decoding without any noise conditioning term.
    pub fn decode_unconditioned(&self, frames: &Mat) -> Result<Mat> {
        let mut g = Graph::new(&self.params);
        let f = g.constant(frames.clone());
        let v = self.decode_graph(&mut g, f, None)?;
        Ok(g.value(v).clone())
    }

    pub fn forward(&self, input: &ModelInput, mode: ForwardMode<'_>) -> Result<Prediction> {
        self.params.check_finite()?;
        self.check_env(&input.env)?;
        let mut g = Graph::new(&self.params);
        let env = g.constant(input.env.as_row());
        let noise = match &input.noise_mel {
            Some(m) => NoiseSource::Mel(m),
            None => NoiseSource::Silence,
        };
        let out = self.forward_graph(&mut g, &input.tokens, input.speaker, env, noise, &mode)?;
        Ok(Prediction {
            mel: g.value(out.mel).clone(),
            log_durations: g.value(out.log_durations).iter().copied().collect(),
            durations: out.durations,
            pitch: g.value(out.pitch).iter().copied().collect(),
            energy: g.value(out.energy).iter().copied().collect(),
        })
    }

    /// Blends batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BnBatchStats]) {
        let m = self.config.bn_momentum;
        for s in stats {
            for (suffix, vals) in [("mean", &s.mean), ("var", &s.var)] {
                if let Some(buf) = self.buffers.get_mut(&format!("{}.{suffix}", s.prefix)) {
                    for (b, v) in buf.iter_mut().zip(vals.iter()) {
                        *b = (1.0 - m) * *b + m * v;
                    }
                }
            }
        }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            MODEL_KIND,
            MODEL_VERSION,
            serde_json::json!({
                "config": self.config,
                "vocab": self.vocab,
                "n_speakers": self.n_speakers,
                "stats": self.stats,
                "extra": extra,
            }),
        );
        ck.put_group("params", &self.params);
        ck.put_group("buffers", &self.buffers);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = ck.meta_field("config")?;
        let vocab: Vec<String> = ck.meta_field("vocab")?;
        let n_speakers: usize = ck.meta_field("n_speakers")?;
        let stats: VarianceStats = ck.meta_field("stats")?;
        let reference = AcousticModel::init_seeded(config, vocab, n_speakers, stats, 0)?;
        let params = ck.group("params");
        let buffers = ck.group("buffers");
        reference.params.check_layout(&params)?;
        reference.buffers.check_layout(&buffers)?;
        Ok(AcousticModel {
            params,
            buffers,
            ..reference
        })
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        AcousticModel::from_checkpoint(&Checkpoint::load_expect(path, MODEL_KIND, MODEL_VERSION)?)
    }
}

#[cfg(test)]
mod tests;
