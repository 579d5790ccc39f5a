use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;

use super::{AnalysisConfig, MelAnalyzer, MelSpectrogram, Waveform};
use crate::error::{Error, Result};

const NNLS_ITERS: usize = 200;

/// Non-negative least-squares inversion of the mel filterbank, frame by
/// frame, by multiplicative updates (monotone in the squared residual).
pub fn mel_to_linear(mel: &MelSpectrogram, filterbank: &Array2<f64>) -> Array2<f64> {
    let target = mel.values().mapv(f64::exp);
    let gram = filterbank.t().dot(filterbank);
    let numer = target.dot(filterbank);
    let mut s = numer.mapv(|v| v.max(0.0));
    // Start from the least-squares optimal multiple of the back-projection.
    for t in 0..s.nrows() {
        let r = s.row(t).to_owned();
        let fr = filterbank.dot(&r);
        let denom = fr.dot(&fr);
        if denom > 1e-30 {
            let scale = fr.dot(&target.row(t)) / denom;
            s.row_mut(t).mapv_inplace(|v| v * scale.max(0.0));
        }
    }
    for _ in 0..NNLS_ITERS {
        let denom = s.dot(&gram);
        Zip::from(&mut s)
            .and(&numer)
            .and(&denom)
            .for_each(|v, &n, &d| *v = if d > 1e-30 { *v * n.max(0.0) / d } else { 0.0 });
    }
    s
}

/// Reconstruction plus the per-iteration spectral-consistency residual
/// `‖X − STFT(ISTFT(X))‖`, which Griffin-Lim never increases.
#[derive(Clone, Debug)]
pub struct GriffinLimTrace {
    pub waveform: Waveform,
    pub residuals: Vec<f64>,
}

pub fn griffin_lim(m: &MelSpectrogram, iterations: usize) -> Result<Waveform> {
    Ok(griffin_lim_with_trace(m, iterations)?.waveform)
}

/// Mel → linear magnitudes → iterative phase reconstruction from zero phase.
/// The output has `(T - 1) · hop` samples.
pub fn griffin_lim_with_trace(m: &MelSpectrogram, iterations: usize) -> Result<GriffinLimTrace> {
    if iterations == 0 {
        return Err(Error::invalid("griffin-lim needs at least one iteration"));
    }
    let config = AnalysisConfig {
        sample_rate: m.sample_rate(),
        frame_size: m.frame_size(),
        hop: m.hop(),
        n_mels: m.n_mels(),
    };
    let analyzer = MelAnalyzer::new(config)?;
    let stft = analyzer.stft();
    let magnitude = mel_to_linear(m, analyzer.filterbank());
    let len = (m.frames() - 1) * m.hop();
    if len == 0 {
        return Ok(GriffinLimTrace {
            waveform: Waveform::zeros(0, m.sample_rate()),
            residuals: vec![0.0; iterations],
        });
    }

    let mut spec: Array2<Complex64> = magnitude.mapv(|a| Complex64::new(a, 0.0));
    let mut residuals = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let signal = stft.inverse(&spec, len);
        let rebuilt = stft.forward_zero_padded(&signal);
        // Full-spectrum norm: interior bins stand for a conjugate pair.
        let nyquist = spec.ncols() - 1;
        let residual = Zip::indexed(&spec)
            .and(&rebuilt)
            .fold(0.0, |acc, (_, k), a, b| {
                let weight = if k == 0 || k == nyquist { 1.0 } else { 2.0 };
                acc + weight * (a - b).norm_sqr()
            })
            .sqrt();
        residuals.push(residual);
        Zip::from(&mut spec)
            .and(&rebuilt)
            .and(&magnitude)
            .for_each(|s, r, &mag| {
                let n = r.norm();
                *s = if n > 1e-30 { r * (mag / n) } else { Complex64::new(mag, 0.0) };
            });
    }
    let signal = stft.inverse(&spec, len);
    Ok(GriffinLimTrace {
        waveform: Waveform::new(signal, m.sample_rate())?,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::dsp::{mel_spectrogram, stft};

    fn sine(freq: f64) -> Waveform {
        let x = (0..22050)
            .map(|n| 0.5 * (2.0 * PI * freq * n as f64 / 22050.0).sin())
            .collect();
        Waveform::new(x, 22050).unwrap()
    }

    #[test]
    fn sine_round_trip_keeps_dominant_bin() {
        let f = 16.0 * 22050.0 / 1024.0;
        let mel = mel_spectrogram(&sine(f)).unwrap();
        let out = griffin_lim(&mel, 32).unwrap();
        assert_eq!(out.len(), (mel.frames() - 1) * 256);
        let spec = stft(&out, 1024, 256).unwrap();
        let mut energy = vec![0.0; spec.ncols()];
        for row in spec.outer_iter() {
            for (k, c) in row.iter().enumerate() {
                energy[k] += c.norm_sqr();
            }
        }
        let peak = (0..energy.len())
            .max_by(|&a, &b| energy[a].partial_cmp(&energy[b]).unwrap())
            .unwrap();
        assert!((peak as i64 - 16).abs() <= 1, "peak bin {peak}");
    }

    #[test]
    fn floor_mel_is_near_silent() {
        let mel = mel_spectrogram(&Waveform::zeros(11025, 22050)).unwrap();
        let out = griffin_lim(&mel, 8).unwrap();
        assert!(out.rms() < 1e-3);
    }

    #[test]
    fn residual_never_increases() {
        let x: Vec<f64> = (0..8000)
            .map(|n| {
                let t = n as f64 / 22050.0;
                0.3 * (2.0 * PI * 220.0 * t).sin() + 0.2 * (2.0 * PI * 1250.0 * t).sin()
            })
            .collect();
        let mel = mel_spectrogram(&Waveform::new(x, 22050).unwrap()).unwrap();
        let trace = griffin_lim_with_trace(&mel, 20).unwrap();
        for pair in trace.residuals.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{pair:?}");
        }
    }

    #[test]
    fn zero_iterations_is_rejected() {
        let mel = mel_spectrogram(&Waveform::zeros(1000, 22050)).unwrap();
        assert!(griffin_lim(&mel, 0).is_err());
    }
}
