use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{F0Track, Waveform, DEFAULT_FRAME_SIZE, DEFAULT_HOP};

/// Normalized-autocorrelation pitch tracker settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PitchConfig {
    pub fmin: f64,
    pub fmax: f64,
    pub window: usize,
    pub hop: usize,
    /// Minimum normalized autocorrelation peak for a voiced frame.
    pub voicing_threshold: f64,
    /// Minimum frame RMS for a voiced frame.
    pub rms_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        PitchConfig {
            fmin: F0Track::MIN_HZ,
            fmax: F0Track::MAX_HZ,
            window: DEFAULT_FRAME_SIZE,
            hop: DEFAULT_HOP,
            voicing_threshold: 0.5,
            rms_threshold: 1e-3,
        }
    }
}

pub fn estimate_f0(w: &Waveform) -> F0Track {
    estimate_f0_with(w, &PitchConfig::default())
}

/// Per-frame F0 on the centered mel frame grid (`len / hop + 1` frames).
///
/// For each frame the normalized autocorrelation
/// `r(τ) = Σ x[n]x[n+τ] / sqrt(Σ x[n]² · Σ x[n+τ]²)` is evaluated over the
/// lag range of `[fmin, fmax]`. The shortest-lag local maximum within 10% of
/// the best peak is taken (this suppresses octave-down errors) and refined
/// by parabolic interpolation.
pub fn estimate_f0_with(w: &Waveform, cfg: &PitchConfig) -> F0Track {
    let sr = w.sample_rate() as f64;
    let x = w.samples();
    let n_frames = x.len() / cfg.hop + 1;
    let win = cfg.window;
    let nfft = (2 * win).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd: Arc<dyn Fft<f64>> = planner.plan_fft_forward(nfft);
    let inv: Arc<dyn Fft<f64>> = planner.plan_fft_inverse(nfft);

    let min_lag = ((sr / cfg.fmax).floor() as usize).max(2);
    let max_lag = ((sr / cfg.fmin).ceil() as usize).min(win - 2);

    let mut f0 = vec![0.0; n_frames];
    let mut seg = vec![0.0; win];
    let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
    let mut prefix = vec![0.0; win + 1];
    for (t, out) in f0.iter_mut().enumerate() {
        let start = (t * cfg.hop) as isize - (win / 2) as isize;
        for (k, s) in seg.iter_mut().enumerate() {
            let i = start + k as isize;
            *s = if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
        }
        let energy: f64 = seg.iter().map(|v| v * v).sum();
        if (energy / win as f64).sqrt() < cfg.rms_threshold {
            continue;
        }

        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(if k < win { seg[k] } else { 0.0 }, 0.0);
        }
        fwd.process(&mut buf);
        for b in buf.iter_mut() {
            *b = Complex64::new(b.norm_sqr(), 0.0);
        }
        inv.process(&mut buf);
        for k in 0..win {
            prefix[k + 1] = prefix[k] + seg[k] * seg[k];
        }
        let nccf = |lag: usize| -> f64 {
            let num = buf[lag].re / nfft as f64;
            let head = prefix[win - lag];
            let tail = prefix[win] - prefix[lag];
            let den = (head * tail).sqrt();
            if den > 1e-12 {
                num / den
            } else {
                0.0
            }
        };
        let r: Vec<f64> = (0..=max_lag + 1).map(|lag| if lag >= min_lag - 1 { nccf(lag) } else { 0.0 }).collect();

        let peaks: Vec<usize> = (min_lag..=max_lag)
            .filter(|&l| r[l] >= r[l - 1] && r[l] >= r[l + 1] && r[l] > 0.0)
            .collect();
        let best = peaks.iter().map(|&l| r[l]).fold(0.0, f64::max);
        if best < cfg.voicing_threshold {
            continue;
        }
        let Some(&lag) = peaks.iter().find(|&&l| r[l] >= 0.9 * best) else {
            continue;
        };
        let (a, b, c) = (r[lag - 1], r[lag], r[lag + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 1e-12 { (0.5 * (a - c) / denom).clamp(-0.5, 0.5) } else { 0.0 };
        let hz = sr / (lag as f64 + shift);
        if (F0Track::MIN_HZ..=F0Track::MAX_HZ).contains(&hz) {
            *out = hz;
        }
    }
    F0Track::from_hz(f0, cfg.hop).expect("estimator only emits in-range values")
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn harmonic(f0: f64, n_harm: usize, secs: f64) -> Waveform {
        let sr = 22050.0;
        let x = (0..(secs * sr) as usize)
            .map(|n| {
                let t = n as f64 / sr;
                (1..=n_harm)
                    .filter(|&h| h as f64 * f0 < sr / 2.0)
                    .map(|h| (2.0 * PI * h as f64 * f0 * t).sin() / h as f64)
                    .sum::<f64>()
                    * 0.3
            })
            .collect();
        Waveform::new(x, 22050).unwrap()
    }

    fn interior_hits(track: &F0Track, f0: f64, tol_hz: f64) -> f64 {
        let n = track.len();
        let interior = &track.f0()[3..n - 3];
        interior.iter().filter(|&&f| (f - f0).abs() <= tol_hz).count() as f64 / interior.len() as f64
    }

    #[test]
    fn sine_220_tracks_within_2_hz() {
        let tr = estimate_f0(&harmonic(220.0, 1, 1.0));
        assert_eq!(interior_hits(&tr, 220.0, 2.0), 1.0);
    }

    #[test]
    fn sine_440_has_no_octave_error() {
        let tr = estimate_f0(&harmonic(440.0, 1, 1.0));
        assert_eq!(interior_hits(&tr, 440.0, 4.0), 1.0);
        assert!(tr.f0().iter().all(|&f| (f - 220.0).abs() > 20.0));
    }

    #[test]
    fn harmonic_tones_within_two_percent() {
        for f0 in [110.0, 220.0, 330.0, 440.0] {
            let tr = estimate_f0(&harmonic(f0, 8, 1.0));
            assert!(interior_hits(&tr, f0, 0.02 * f0) >= 0.95, "f0 {f0}");
        }
    }

    #[test]
    fn silence_is_unvoiced() {
        let tr = estimate_f0(&Waveform::zeros(22050, 22050));
        assert_eq!(tr.len(), 87);
        assert_eq!(tr.voiced_count(), 0);
    }
}
