//! Objective evaluation: mel cepstral distortion and log-F0 RMSE, both on
//! a DTW alignment, plus per-condition corpus reports.

mod report;

use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};

use crate::dsp::{F0Track, MelSpectrogram};
use crate::error::{Error, Result};
use crate::nn::Mat;

pub use report::{evaluate_corpus, evaluate_with, EvalConfig, EvalReport, EvalRow, Rendered, UtteranceScore};

pub const DEFAULT_CEPSTRAL_ORDER: usize = 13;

/// `10 / ln 10 · √2`, the per-frame MCD scale applied to a Euclidean
/// cepstral distance.
pub const MCD_SCALE: f64 = 10.0 / LN_10 * std::f64::consts::SQRT_2;

/// Orthonormal DCT-II of every log-mel frame, keeping coefficients
/// `1..=order` (the energy term c0 is dropped).
pub fn mel_cepstra(m: &MelSpectrogram, order: usize) -> Result<Mat> {
    cepstra_of(m.values(), order)
}

pub fn cepstra_of(values: &Mat, order: usize) -> Result<Mat> {
    let n = values.ncols();
    if order == 0 || order > n {
        return Err(Error::InvalidInput(format!("cepstral order {order} outside 1..={n}")));
    }
    let scale = (2.0 / n as f64).sqrt();
    let basis = Mat::from_shape_fn((n, order), |(i, k)| {
        scale * (PI * (k + 1) as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()
    });
    Ok(values.dot(&basis))
}

/// Monotone, boundary-anchored warping path with its total cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtwPath {
    pub path: Vec<(usize, usize)>,
    pub cost: f64,
}

fn frame_distance(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Dynamic time warping under Euclidean frame distance with steps
/// (1,1), (1,0), (0,1). Ties prefer the diagonal step.
pub fn dtw_align(a: &Mat, b: &Mat) -> Result<DtwPath> {
    let (n, m) = (a.nrows(), b.nrows());
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("dtw of an empty sequence".into()));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "dtw between {}- and {}-dimensional frames",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut acc = Mat::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a, i, b, j);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = prev + d;
        }
    }
    let mut path = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[[i - 1, j - 1]];
            let up = acc[[i - 1, j]];
            let left = acc[[i, j - 1]];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwPath {
        path,
        cost: acc[[n - 1, m - 1]],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McdResult {
    /// Mean over the path, dB.
    pub mcd: f64,
    pub alignment: DtwPath,
}

/// Mel cepstral distortion between two cepstral sequences of equal order.
pub fn mcd(reference: &Mat, synthesized: &Mat) -> Result<McdResult> {
    if reference.ncols() != synthesized.ncols() {
        return Err(Error::InvalidInput(format!(
            "cepstral orders differ: {} vs {}",
            reference.ncols(),
            synthesized.ncols()
        )));
    }
    let alignment = dtw_align(reference, synthesized)?;
    let mcd = MCD_SCALE * alignment.cost / alignment.path.len() as f64;
    Ok(McdResult { mcd, alignment })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum LogF0Rmse {
    Value { rmse: f64, frames: usize },
    /// No frame pair on the path is voiced in both tracks.
    Undefined,
}

impl LogF0Rmse {
    pub fn value(&self) -> Option<f64> {
        match self {
            LogF0Rmse::Value { rmse, .. } => Some(*rmse),
            LogF0Rmse::Undefined => None,
        }
    }
}

/// RMSE of natural-log F0 over path pairs voiced in both tracks. Path
/// indices beyond a track's end are clamped to its last frame.
pub fn log_f0_rmse(reference: &F0Track, synthesized: &F0Track, path: &[(usize, usize)]) -> LogF0Rmse {
    if reference.is_empty() || synthesized.is_empty() {
        return LogF0Rmse::Undefined;
    }
    let (rf, sf) = (reference.f0(), synthesized.f0());
    let (rv, sv) = (reference.voiced(), synthesized.voiced());
    let mut sum = 0.0;
    let mut frames = 0;
    for &(i, j) in path {
        let i = i.min(rf.len() - 1);
        let j = j.min(sf.len() - 1);
        if rv[i] && sv[j] {
            let d = rf[i].ln() - sf[j].ln();
            sum += d * d;
            frames += 1;
        }
    }
    if frames == 0 {
        return LogF0Rmse::Undefined;
    }
    LogF0Rmse::Value {
        rmse: (sum / frames as f64).sqrt(),
        frames,
    }
}

/// Frame-to-frame correspondence for equal-length tracks.
pub fn identity_path(len: usize) -> Vec<(usize, usize)> {
    (0..len).map(|i| (i, i)).collect()
}

#[cfg(test)]
mod tests;
