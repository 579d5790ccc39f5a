//! Integrated loudness (ITU-R BS.1770): K-weighting, 400 ms gating blocks
//! with 75% overlap, absolute gate at -70 LUFS and relative gate at -10 LU.

use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

pub const LOUDNESS_BLOCK_SECONDS: f64 = 0.4;
const ABSOLUTE_GATE: f64 = -70.0;
const RELATIVE_GATE: f64 = -10.0;

/// Second-order section with `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiquadCoeffs {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

/// The two K-weighting stages (high shelf, then high pass) for `sample_rate`.
///
/// Coefficients are derived from the analog prototypes by the bilinear
/// transform so any sample rate is supported; at 48 kHz they reproduce the
/// tabulated BS.1770 values.
pub fn k_weighting_filters(sample_rate: u32) -> [BiquadCoeffs; 2] {
    let fs = sample_rate as f64;

    let gain_db = 3.999_843_853_97;
    let q = 0.707_175_236_955_419_3;
    let fc = 1_681.974_450_955_531_9;
    let k = (PI * fc / fs).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.499_666_774_155);
    let a0 = 1.0 + k / q + k * k;
    let shelf = BiquadCoeffs {
        b0: (vh + vb * k / q + k * k) / a0,
        b1: 2.0 * (k * k - vh) / a0,
        b2: (vh - vb * k / q + k * k) / a0,
        a1: 2.0 * (k * k - 1.0) / a0,
        a2: (1.0 - k / q + k * k) / a0,
    };

    let q = 0.500_327_037_325_395_3;
    let fc = 38.135_470_876_139_82;
    let k = (PI * fc / fs).tan();
    let a0 = 1.0 + k / q + k * k;
    let high_pass = BiquadCoeffs {
        b0: 1.0,
        b1: -2.0,
        b2: 1.0,
        a1: 2.0 * (k * k - 1.0) / a0,
        a2: (1.0 - k / q + k * k) / a0,
    };

    [shelf, high_pass]
}

fn filter(coeffs: &BiquadCoeffs, x: &[f64]) -> Vec<f64> {
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&x0| {
            let y0 = coeffs.b0 * x0 + coeffs.b1 * x1 + coeffs.b2 * x2 - coeffs.a1 * y1 - coeffs.a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y0
        })
        .collect()
}

fn block_loudness(power: f64) -> f64 {
    -0.691 + 10.0 * power.log10()
}

/// Integrated loudness in LUFS.
///
/// Clips shorter than one 400 ms block are rejected. A signal whose blocks
/// are all gated out yields [`Error::BelowGate`].
pub fn measure_lufs(w: &Waveform) -> Result<f64> {
    let sr = w.sample_rate() as f64;
    let block = (LOUDNESS_BLOCK_SECONDS * sr).round() as usize;
    let step = (0.1 * sr).round() as usize;
    if w.len() < block {
        return Err(Error::invalid(format!(
            "loudness needs at least 400 ms of audio, got {:.1} ms",
            w.duration_secs() * 1e3
        )));
    }
    let [shelf, high_pass] = k_weighting_filters(w.sample_rate());
    let weighted = filter(&high_pass, &filter(&shelf, w.samples()));

    // Prefix sums of squares give every block power in O(1).
    let mut prefix = Vec::with_capacity(weighted.len() + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for z in &weighted {
        acc += z * z;
        prefix.push(acc);
    }
    let n_blocks = (weighted.len() - block) / step + 1;
    let powers: Vec<f64> = (0..n_blocks)
        .map(|j| (prefix[j * step + block] - prefix[j * step]) / block as f64)
        .collect();

    let above_abs: Vec<f64> = powers
        .iter()
        .copied()
        .filter(|&p| p > 0.0 && block_loudness(p) > ABSOLUTE_GATE)
        .collect();
    if above_abs.is_empty() {
        return Err(Error::BelowGate);
    }
    let relative = block_loudness(above_abs.iter().sum::<f64>() / above_abs.len() as f64) + RELATIVE_GATE;
    let gated: Vec<f64> = above_abs
        .into_iter()
        .filter(|&p| block_loudness(p) > relative)
        .collect();
    if gated.is_empty() {
        return Err(Error::BelowGate);
    }
    Ok(block_loudness(gated.iter().sum::<f64>() / gated.len() as f64))
}

/// Scalar gain that brings `w` to `target` LUFS (within 1e-3 LU when the
/// fixed-point iteration converges, which gating makes mildly nonlinear).
pub fn loudness_gain(w: &Waveform, target: f64) -> Result<f64> {
    let current = match measure_lufs(w) {
        Ok(l) => l,
        Err(Error::BelowGate) => return Err(Error::CannotScale),
        Err(e) => return Err(e),
    };
    let mut gain = 10f64.powf((target - current) / 20.0);
    for _ in 0..10 {
        let measured = measure_lufs(&w.scaled(gain)).map_err(|_| Error::CannotScale)?;
        let err = target - measured;
        if err.abs() < 1e-4 {
            break;
        }
        gain *= 10f64.powf(err / 20.0);
    }
    Ok(gain)
}

pub fn scale_to_lufs(w: &Waveform, target: f64) -> Result<Waveform> {
    Ok(w.scaled(loudness_gain(w, target)?))
}
