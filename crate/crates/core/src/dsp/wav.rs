use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

/// Reads a mono WAV (16/24/32-bit PCM or 32-bit float) and resamples it to
/// `target_rate` when the file rate differs.
pub fn read_wav(path: impl AsRef<Path>, target_rate: u32) -> Result<Waveform> {
    let path = path.as_ref();
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::invalid(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match spec.sample_format {
        SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(wav_err)?,
        SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(wav_err)?
        }
    };
    let samples = if spec.sample_rate == target_rate {
        samples
    } else {
        resample(&samples, spec.sample_rate, target_rate)
    };
    Waveform::new(samples, target_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = match format {
        WavFormat::Pcm16 => WavSpec {
            channels: 1,
            sample_rate: w.sample_rate(),
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        },
        WavFormat::Float32 => WavSpec {
            channels: 1,
            sample_rate: w.sample_rate(),
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in w.samples() {
        match format {
            WavFormat::Pcm16 => writer
                .write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)
                .map_err(wav_err)?,
            WavFormat::Float32 => writer.write_sample(s as f32).map_err(wav_err)?,
        }
    }
    writer.finalize().map_err(wav_err)
}

const SINC_HALF_WIDTH: f64 = 32.0;

/// Band-limited resampling with a Hann-windowed sinc kernel. The cutoff
/// follows the lower of the two Nyquist rates.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0) * 0.97;
    let half = SINC_HALF_WIDTH / cutoff;
    let out_len = ((samples.len() as f64) * ratio).round() as usize;
    (0..out_len)
        .map(|i| {
            let center = i as f64 / ratio;
            let lo = (center - half).ceil().max(0.0) as usize;
            let hi = ((center + half).floor() as usize).min(samples.len() - 1);
            (lo..=hi)
                .map(|j| {
                    let x = j as f64 - center;
                    let arg = PI * cutoff * x;
                    let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
                    let window = 0.5 + 0.5 * (PI * x / half).cos();
                    samples[j] * cutoff * sinc * window
                })
                .sum()
        })
        .collect()
}
