use ndarray::Array2;

use super::{AnalysisConfig, MelSpectrogram, Stft, Waveform, LOG_FLOOR};
use crate::error::Result;

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, `n_mels × (frame_size / 2 + 1)`,
/// equally spaced on the mel scale between `fmin` and `fmax`.
pub fn mel_filterbank(n_mels: usize, frame_size: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Array2<f64> {
    let n_bins = frame_size / 2 + 1;
    let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / frame_size as f64;
    Array2::from_shape_fn((n_mels, n_bins), |(m, k)| {
        let f = k as f64 * bin_hz;
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let rising = (f - lo) / (center - lo);
        let falling = (hi - f) / (hi - center);
        rising.min(falling).max(0.0)
    })
}

/// Reusable mel front end (FFT plan and filterbank built once).
#[derive(Debug)]
pub struct MelAnalyzer {
    config: AnalysisConfig,
    stft: Stft,
    filterbank: Array2<f64>,
}

impl MelAnalyzer {
    pub fn new(config: AnalysisConfig) -> Result<Self> {
        let stft = Stft::new(config.frame_size, config.hop)?;
        let filterbank = mel_filterbank(
            config.n_mels,
            config.frame_size,
            config.sample_rate,
            0.0,
            config.sample_rate as f64 / 2.0,
        );
        Ok(MelAnalyzer {
            config,
            stft,
            filterbank,
        })
    }

    pub fn config(&self) -> &AnalysisConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    pub fn stft(&self) -> &Stft {
        &self.stft
    }

    /// Log-mel of the magnitude spectrum with the `ln(1e-5)` floor.
    pub fn analyze(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let spec = self.stft.forward(w.samples())?;
        let mag = spec.mapv(|c| c.norm());
        let mel = mag.dot(&self.filterbank.t()).mapv(|v| v.max(LOG_FLOOR).ln());
        MelSpectrogram::new(mel, self.config.frame_size, self.config.hop, w.sample_rate())
    }

    /// Mel of `frames` frames of silence, identical to analysing zeros.
    pub fn silence(&self, frames: usize) -> MelSpectrogram {
        MelSpectrogram::silence(frames, &self.config)
    }
}

/// 80-band log-mel with 1024/256 framing at the waveform's own sample rate.
pub fn mel_spectrogram(w: &Waveform) -> Result<MelSpectrogram> {
    let config = AnalysisConfig {
        sample_rate: w.sample_rate(),
        ..AnalysisConfig::default()
    };
    MelAnalyzer::new(config)?.analyze(w)
}
