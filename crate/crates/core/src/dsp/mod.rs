//! Signal-processing primitives shared by every stage of the pipeline:
//! framing, mel analysis, loudness, pitch, and phase reconstruction.
//!
//! Everything here is a pure function of its inputs. The analysis parameters
//! default to 22.05 kHz audio, 1024-sample frames, 256-sample hop, and 80 mel
//! bands, which is the feature layout the acoustic model is trained on.

mod griffin_lim;
mod loudness;
mod mel;
mod pitch;
mod stft;
mod wav;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use griffin_lim::{griffin_lim, griffin_lim_with_trace, mel_to_linear, GriffinLimTrace};
pub use loudness::{
    k_weighting_filters, loudness_gain, measure_lufs, scale_to_lufs, BiquadCoeffs,
    LOUDNESS_BLOCK_SECONDS,
};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelAnalyzer};
pub use pitch::{estimate_f0, estimate_f0_with, PitchConfig};
pub use stft::{hann_window, stft, Stft};
pub use wav::{read_wav, resample, write_wav, WavFormat};

pub const DEFAULT_SAMPLE_RATE: u32 = 22_050;
pub const DEFAULT_FRAME_SIZE: usize = 1024;
pub const DEFAULT_HOP: usize = 256;
pub const DEFAULT_N_MELS: usize = 80;
/// Magnitudes are clamped here before taking the log.
pub const LOG_FLOOR: f64 = 1e-5;

/// A mono waveform. Samples are nominally in `[-1, 1]`; only finiteness is
/// enforced because intermediate mixtures may briefly exceed full scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self.samples.iter().map(|x| x * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|x| x * x).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    /// Elementwise sum; both waveforms must share rate and length.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        if self.sample_rate != other.sample_rate || self.len() != other.len() {
            return Err(Error::invalid(format!(
                "cannot add waveforms of shape ({}, {} Hz) and ({}, {} Hz)",
                self.len(),
                self.sample_rate,
                other.len(),
                other.sample_rate
            )));
        }
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Waveform {
            samples,
            sample_rate: self.sample_rate,
        })
    }

    pub fn sub(&self, other: &Waveform) -> Result<Waveform> {
        self.add(&other.scaled(-1.0))
    }
}

/// Frame and filterbank layout for mel analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub sample_rate: u32,
    pub frame_size: usize,
    pub hop: usize,
    pub n_mels: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            sample_rate: DEFAULT_SAMPLE_RATE,
            frame_size: DEFAULT_FRAME_SIZE,
            hop: DEFAULT_HOP,
            n_mels: DEFAULT_N_MELS,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("dsp.sample_rate must be positive".into()));
        }
        if !self.frame_size.is_power_of_two() || self.frame_size < 16 {
            return Err(Error::Config(
                "dsp.frame_size must be a power of two >= 16".into(),
            ));
        }
        if self.hop == 0 || self.hop > self.frame_size {
            return Err(Error::Config("dsp.hop must be in 1..=frame_size".into()));
        }
        if self.n_mels == 0 || self.n_mels > self.frame_size / 2 + 1 {
            return Err(Error::Config("dsp.n_mels out of range".into()));
        }
        Ok(())
    }

    /// Number of centered frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop + 1
    }
}

/// Log-mel energies, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    values: Array2<f64>,
    frame_size: usize,
    hop: usize,
    sample_rate: u32,
}

impl MelSpectrogram {
    pub fn new(values: Array2<f64>, frame_size: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("mel spectrogram must have at least one frame and band"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mel spectrogram contains non-finite values"));
        }
        Ok(MelSpectrogram {
            values,
            frame_size,
            hop,
            sample_rate,
        })
    }

    /// The mel of an all-zero waveform: every cell at the log floor.
    pub fn silence(frames: usize, config: &AnalysisConfig) -> Self {
        MelSpectrogram {
            values: Array2::from_elem((frames.max(1), config.n_mels), LOG_FLOOR.ln()),
            frame_size: config.frame_size,
            hop: config.hop,
            sample_rate: config.sample_rate,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Truncates or edge-pads to exactly `frames` rows.
    pub fn with_frames(&self, frames: usize) -> MelSpectrogram {
        let n = self.values.ncols();
        let last = self.values.nrows() - 1;
        let values = Array2::from_shape_fn((frames.max(1), n), |(t, j)| self.values[[t.min(last), j]]);
        MelSpectrogram {
            values,
            frame_size: self.frame_size,
            hop: self.hop,
            sample_rate: self.sample_rate,
        }
    }
}

/// Per-frame fundamental frequency on the mel frame grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct F0Track {
    f0: Vec<f64>,
    voiced: Vec<bool>,
    hop: usize,
}

impl F0Track {
    pub const MIN_HZ: f64 = 50.0;
    pub const MAX_HZ: f64 = 800.0;

    /// Builds a track from Hz values; zeros mark unvoiced frames.
    pub fn from_hz(f0: Vec<f64>, hop: usize) -> Result<Self> {
        for (i, &f) in f0.iter().enumerate() {
            if !f.is_finite() || (f != 0.0 && !(Self::MIN_HZ..=Self::MAX_HZ).contains(&f)) {
                return Err(Error::invalid(format!("f0[{i}] = {f} outside [50, 800] Hz")));
            }
        }
        let voiced = f0.iter().map(|&f| f > 0.0).collect();
        Ok(F0Track { f0, voiced, hop })
    }

    pub fn f0(&self) -> &[f64] {
        &self.f0
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn len(&self) -> usize {
        self.f0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f0.is_empty()
    }

    pub fn voiced_count(&self) -> usize {
        self.voiced.iter().filter(|&&v| v).count()
    }

    /// Multiplies every voiced value by `g`; used for invariance checks.
    pub fn scaled(&self, g: f64) -> F0Track {
        F0Track {
            f0: self.f0.iter().map(|f| f * g).collect(),
            voiced: self.voiced.clone(),
            hop: self.hop,
        }
    }
}
