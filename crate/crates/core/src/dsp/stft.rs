use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index `i` into `0..n` (repeated reflection without edge repeat).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Centered short-time Fourier transform with a Hann window.
pub struct Stft {
    frame_size: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("frame_size", &self.frame_size)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(frame_size: usize, hop: usize) -> Result<Self> {
        if !frame_size.is_power_of_two() || frame_size < 2 {
            return Err(Error::invalid(format!(
                "frame size {frame_size} is not a power of two"
            )));
        }
        if hop == 0 || hop > frame_size {
            return Err(Error::invalid(format!("hop {hop} must be in 1..={frame_size}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Stft {
            frame_size,
            hop,
            window: hann_window(frame_size),
            forward: planner.plan_fft_forward(frame_size),
            inverse: planner.plan_fft_inverse(frame_size),
        })
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Analysis with reflection padding of half a frame on each side.
    pub fn forward(&self, samples: &[f64]) -> Result<Array2<Complex64>> {
        if samples.is_empty() {
            return Err(Error::invalid("cannot analyse an empty waveform"));
        }
        let n = samples.len();
        Ok(self.analyse(n, |i| samples[reflect(i, n)]))
    }

    /// Analysis with zero padding; the adjoint of [`Stft::inverse`].
    pub fn forward_zero_padded(&self, samples: &[f64]) -> Array2<Complex64> {
        let n = samples.len();
        self.analyse(n, |i| {
            if i >= 0 && (i as usize) < n {
                samples[i as usize]
            } else {
                0.0
            }
        })
    }

    fn analyse(&self, n: usize, sample_at: impl Fn(isize) -> f64) -> Array2<Complex64> {
        let frames = self.frame_count(n);
        let bins = self.n_bins();
        let half = (self.frame_size / 2) as isize;
        let mut out = Array2::zeros((frames, bins));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.frame_size];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.hop) as isize - half;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(sample_at(start + k as isize) * self.window[k], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (k, v) in buf.iter().take(bins).enumerate() {
                out[[t, k]] = *v;
            }
        }
        out
    }

    /// Least-squares signal estimate of length `len` from a (possibly
    /// inconsistent) spectrogram, under the zero-padded framing convention.
    pub fn inverse(&self, spec: &Array2<Complex64>, len: usize) -> Vec<f64> {
        let nfft = self.frame_size;
        let half = nfft / 2;
        let padded = len + nfft;
        let mut acc = vec![0.0; padded];
        let mut norm = vec![0.0; padded];
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        for t in 0..spec.nrows() {
            for k in 0..=half {
                buf[k] = spec[[t, k]];
            }
            for k in 1..half {
                buf[nfft - k] = spec[[t, k]].conj();
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for k in 0..nfft {
                let idx = start + k;
                if idx >= padded {
                    break;
                }
                let w = self.window[k];
                acc[idx] += buf[k].re / nfft as f64 * w;
                norm[idx] += w * w;
            }
        }
        (0..len)
            .map(|i| {
                let j = i + half;
                if norm[j] > 1e-10 {
                    acc[j] / norm[j]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Centered STFT of a waveform: `floor(len / hop) + 1` frames of
/// `frame_size / 2 + 1` bins.
pub fn stft(w: &Waveform, frame_size: usize, hop: usize) -> Result<Array2<Complex64>> {
    Stft::new(frame_size, hop)?.forward(w.samples())
}
