//! Mel files: raw little-endian `f32`, row-major `frames × n_mels`, with a
//! JSON sidecar next to it (`<stem>.json`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::dsp::MelSpectrogram;
use crate::error::{Error, Result};
use crate::nn::Mat;

pub const MEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelSidecar {
    pub version: u32,
    pub dtype: String,
    /// `[frames, n_mels]`.
    pub shape: [usize; 2],
    pub hop: usize,
    pub frame_size: usize,
    pub sample_rate: u32,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary and its sidecar. Values are narrowed to `f32`.
pub fn write_mel(path: impl AsRef<Path>, mel: &MelSpectrogram, extra: serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(mel.values().len() * 4);
    for v in mel.values().iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    write_atomic(path, &bytes)?;
    let side = MelSidecar {
        version: MEL_FORMAT_VERSION,
        dtype: "f32le".into(),
        shape: [mel.frames(), mel.n_mels()],
        hop: mel.hop(),
        frame_size: mel.frame_size(),
        sample_rate: mel.sample_rate(),
        extra,
    };
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
}

pub fn read_mel(path: impl AsRef<Path>) -> Result<(MelSpectrogram, MelSidecar)> {
    let path = path.as_ref();
    let side_path = sidecar_path(path);
    let text = std::fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: MelSidecar = serde_json::from_str(&text)?;
    if side.version != MEL_FORMAT_VERSION || side.dtype != "f32le" {
        return Err(Error::ArtifactVersion {
            path: side_path,
            expected: format!("mel v{MEL_FORMAT_VERSION} f32le"),
            found: format!("mel v{} {}", side.version, side.dtype),
        });
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let [t, n] = side.shape;
    if bytes.len() != t * n * 4 {
        return Err(Error::InvalidInput(format!(
            "{}: {} bytes for shape {t}×{n}",
            path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = Mat::from_shape_vec((t, n), values).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mel = MelSpectrogram::new(m, side.frame_size, side.hop, side.sample_rate)?;
    Ok((mel, side))
}
