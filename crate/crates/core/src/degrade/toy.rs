//! Synthetic multi-speaker "speech" with ground-truth phoneme durations.
//!
//! Voiced phonemes are harmonic complexes shaped by three formant-like
//! resonances; a few phonemes are band-limited noise. Speakers differ in
//! base F0 and a vocal-tract scale factor.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{Manifest, UtteranceRecord};
use super::mix::DegradationCondition;
use crate::dsp::{scale_to_lufs, write_wav, WavFormat, Waveform};
use crate::error::{Error, Result};
use crate::seed::keyed_rng;

pub const SILENCE: &str = "sil";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ToyCorpusSpec {
    pub n_speakers: usize,
    pub utterances_per_speaker: usize,
    /// Inventory size, not counting the silence symbol.
    pub n_phonemes: usize,
    /// Phonemes per utterance, inclusive range, excluding edge silences.
    pub phonemes_per_utterance: [usize; 2],
    /// Frames per phoneme, inclusive range.
    pub duration_frames: [usize; 2],
    /// Frames of silence at each end of every utterance.
    pub edge_silence_frames: usize,
    pub speech_lufs: f64,
    pub n_noise_clips: usize,
    pub noise_clip_secs: f64,
    /// Base F0 of the lowest and highest speaker.
    pub f0_range: [f64; 2],
    /// Utterances per speaker held out as the test split.
    pub test_utterances_per_speaker: usize,
}

impl Default for ToyCorpusSpec {
    fn default() -> Self {
        ToyCorpusSpec {
            n_speakers: 4,
            utterances_per_speaker: 6,
            n_phonemes: 12,
            phonemes_per_utterance: [5, 9],
            duration_frames: [4, 20],
            edge_silence_frames: 6,
            speech_lufs: -24.0,
            n_noise_clips: 6,
            noise_clip_secs: 2.0,
            f0_range: [95.0, 235.0],
            test_utterances_per_speaker: 1,
        }
    }
}

impl ToyCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        if self.n_speakers == 0 || self.utterances_per_speaker == 0 || self.n_phonemes == 0 {
            return Err(Error::Config("toy corpus needs speakers, utterances and phonemes".into()));
        }
        if !ordered(self.phonemes_per_utterance) || !ordered(self.duration_frames) {
            return Err(Error::Config("toy corpus ranges must be ordered and positive".into()));
        }
        if self.test_utterances_per_speaker >= self.utterances_per_speaker {
            return Err(Error::Config("toy corpus must keep training utterances for every speaker".into()));
        }
        if self.n_noise_clips == 0 || !(self.noise_clip_secs > 0.0) {
            return Err(Error::Config("toy corpus needs at least one noise clip".into()));
        }
        if !(self.f0_range[0] >= 60.0 && self.f0_range[0] <= self.f0_range[1] && self.f0_range[1] <= 400.0) {
            return Err(Error::Config(format!("f0 range {:?} outside 60..400 Hz", self.f0_range)));
        }
        Ok(())
    }

    pub fn speaker_f0(&self, speaker: usize) -> f64 {
        if self.n_speakers == 1 {
            return self.f0_range[0];
        }
        let t = speaker as f64 / (self.n_speakers - 1) as f64;
        self.f0_range[0] + t * (self.f0_range[1] - self.f0_range[0])
    }

    pub fn inventory(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.n_phonemes).map(phoneme_name).collect();
        v.push(SILENCE.to_string());
        v
    }
}

fn phoneme_name(i: usize) -> String {
    format!("p{i:02}")
}

#[derive(Clone, Debug)]
struct PhonemeShape {
    formants: [f64; 3],
    gains: [f64; 3],
    bandwidth: f64,
    voiced: bool,
}

fn phoneme_shapes(spec: &ToyCorpusSpec, seed: u64) -> Vec<PhonemeShape> {
    let mut rng = keyed_rng(seed, "toy/inventory");
    (0..spec.n_phonemes)
        .map(|i| PhonemeShape {
            formants: [
                rng.random_range(300.0..900.0),
                rng.random_range(1000.0..2400.0),
                rng.random_range(2500.0..3600.0),
            ],
            gains: [1.0, rng.random_range(0.3..0.9), rng.random_range(0.1..0.4)],
            bandwidth: rng.random_range(90.0..160.0),
            // Every fourth phoneme is a fricative-like noise band.
            voiced: i % 4 != 3,
        })
        .collect()
}

/// Clean corpus plus the noise clips used to degrade it.
#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub manifest: Manifest,
    pub waveforms: Vec<Waveform>,
    pub noises: Vec<Waveform>,
}

/// Renders the corpus in memory. Records point at
/// `clean/spkNNN/<id>.wav`, which [`write_toy_corpus`] materializes.
pub fn generate_toy_corpus(spec: &ToyCorpusSpec, seed: u64, sample_rate: u32, hop: usize) -> Result<ToyCorpus> {
    spec.validate()?;
    let shapes = phoneme_shapes(spec, seed);
    let jobs: Vec<(usize, usize)> = (0..spec.n_speakers)
        .flat_map(|s| (0..spec.utterances_per_speaker).map(move |u| (s, u)))
        .collect();
    let rendered: Vec<(UtteranceRecord, Waveform)> = jobs
        .par_iter()
        .map(|&(spk, utt)| render_utterance(spec, &shapes, seed, spk, utt, sample_rate, hop))
        .collect::<Result<_>>()?;
    let noises = (0..spec.n_noise_clips)
        .map(|i| noise_clip(i, spec.noise_clip_secs, seed, sample_rate))
        .collect::<Result<_>>()?;
    let (records, waveforms) = rendered.into_iter().unzip();
    Ok(ToyCorpus {
        manifest: Manifest::new(records, ""),
        waveforms,
        noises,
    })
}

/// Writes clean audio, noise clips (`noise_clips/noise_NN.wav`) and the
/// clean manifest under `out_dir`.
pub fn write_toy_corpus(corpus: &ToyCorpus, out_dir: &Path, manifest_name: &str) -> Result<Manifest> {
    corpus
        .manifest
        .records
        .par_iter()
        .zip(&corpus.waveforms)
        .try_for_each(|(rec, w)| write_wav(out_dir.join(&rec.clean_path), w, WavFormat::Float32))?;
    for (i, n) in corpus.noises.iter().enumerate() {
        write_wav(out_dir.join(noise_clip_path(i)), n, WavFormat::Float32)?;
    }
    let manifest = Manifest::new(corpus.manifest.records.clone(), out_dir);
    manifest.save(out_dir.join(manifest_name))?;
    Ok(manifest)
}

pub fn noise_clip_path(i: usize) -> String {
    format!("noise_clips/noise_{i:02}.wav")
}

fn render_utterance(
    spec: &ToyCorpusSpec,
    shapes: &[PhonemeShape],
    seed: u64,
    speaker: usize,
    utt: usize,
    sample_rate: u32,
    hop: usize,
) -> Result<(UtteranceRecord, Waveform)> {
    let id = format!("spk{speaker:03}_{utt:03}");
    let mut rng = keyed_rng(seed, &format!("toy/{id}"));
    let n = rng.random_range(spec.phonemes_per_utterance[0]..=spec.phonemes_per_utterance[1]);
    let mut phonemes = vec![SILENCE.to_string()];
    let mut durations = vec![spec.edge_silence_frames];
    let mut ids: Vec<Option<usize>> = vec![None];
    for _ in 0..n {
        let p = rng.random_range(0..spec.n_phonemes);
        phonemes.push(phoneme_name(p));
        durations.push(rng.random_range(spec.duration_frames[0]..=spec.duration_frames[1]));
        ids.push(Some(p));
    }
    phonemes.push(SILENCE.to_string());
    durations.push(spec.edge_silence_frames);
    ids.push(None);

    let len: usize = durations.iter().sum::<usize>() * hop;
    let sr = sample_rate as f64;
    let f0_base = spec.speaker_f0(speaker);
    // Vocal-tract scale shifts all formants per speaker.
    let tract = 0.9 + 0.2 * keyed_rng(seed, &format!("toy/tract/{speaker}")).random::<f64>();
    let contour_phase = rng.random_range(0.0..2.0 * PI);
    let contour_rate = rng.random_range(0.5..1.5);

    // Per-sample F0 with a slow declination-like wobble, and the running
    // phase that keeps harmonics continuous across phoneme boundaries.
    let f0_at = |i: usize| {
        let t = i as f64 / sr;
        f0_base * (1.0 + 0.06 * (2.0 * PI * contour_rate * t + contour_phase).sin())
    };
    let mut phase = vec![0.0; len];
    let mut acc = 0.0;
    for (i, p) in phase.iter_mut().enumerate() {
        *p = acc;
        acc += 2.0 * PI * f0_at(i) / sr;
    }

    let ramp = (hop / 2).max(1);
    let mut y = vec![0.0; len];
    let mut start = 0;
    for (k, (&d, pid)) in durations.iter().zip(&ids).enumerate() {
        let seg = d * hop;
        let end = start + seg;
        if let Some(p) = pid {
            let shape = &shapes[*p];
            let lo = start.saturating_sub(ramp);
            let hi = (end + ramp).min(len);
            let gain = |i: usize| -> f64 {
                let rise = if k == 0 || i >= start + ramp { 1.0 } else { (i + ramp - start) as f64 / (2 * ramp) as f64 };
                let fall = if i + ramp <= end { 1.0 } else { (end + ramp - i) as f64 / (2 * ramp) as f64 };
                rise.min(fall).clamp(0.0, 1.0)
            };
            if shape.voiced {
                let f0_mid = f0_at((start + end) / 2);
                let n_harm = ((5000.0 / f0_mid) as usize).max(1);
                let amps: Vec<f64> = (1..=n_harm)
                    .map(|h| harmonic_amplitude(shape, tract, h as f64 * f0_mid) / (h as f64).sqrt())
                    .collect();
                for i in lo..hi {
                    let g = gain(i);
                    let mut s = 0.0;
                    for (h, a) in amps.iter().enumerate() {
                        s += a * ((h + 1) as f64 * phase[i]).sin();
                    }
                    y[i] += g * s;
                }
            } else {
                let center = shape.formants[2] * tract;
                let noise: Vec<f64> = (lo..hi).map(|_| StandardNormal.sample(&mut rng)).collect();
                let filtered = bandpass(&noise, center, 0.35, sr);
                for (j, i) in (lo..hi).enumerate() {
                    y[i] += 0.5 * gain(i) * filtered[j];
                }
            }
        }
        start = end;
    }
    let w = Waveform::new(y, sample_rate)?;
    let w = scale_to_lufs(&w, spec.speech_lufs).or_else(|_| {
        let rms = w.rms();
        Ok::<_, Error>(if rms > 0.0 { w.scaled(0.05 / rms) } else { w.clone() })
    })?;
    let record = UtteranceRecord {
        id: id.clone(),
        speaker_id: speaker,
        phonemes,
        durations,
        condition: DegradationCondition::Clean,
        clean_path: format!("clean/spk{speaker:03}/{id}.wav"),
        degraded_path: format!("clean/spk{speaker:03}/{id}.wav"),
        noise_lufs: None,
        rir_seed: None,
        noise_path: None,
        rir_gain: None,
    };
    Ok((record, w))
}

fn harmonic_amplitude(shape: &PhonemeShape, tract: f64, f: f64) -> f64 {
    let mut a = 0.02;
    for (fc, g) in shape.formants.iter().zip(&shape.gains) {
        let d = (f - fc * tract) / shape.bandwidth;
        a += g * (-0.5 * d * d).exp();
    }
    a
}

/// Second-order band-pass (constant peak gain) centred on `center` Hz with
/// bandwidth `rel_bw · center`.
fn bandpass(x: &[f64], center: f64, rel_bw: f64, sr: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * center.min(0.45 * sr) / sr;
    let q = 1.0 / rel_bw;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&v| {
            let out = b0 * v + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = out;
            out
        })
        .collect()
}

/// Noise clip `i`: cycles through amplitude-modulated pink noise, gated
/// bursts, band noise, and crackle.
pub fn noise_clip(i: usize, secs: f64, seed: u64, sample_rate: u32) -> Result<Waveform> {
    let mut rng = keyed_rng(seed, &format!("toy/noise/{i}"));
    let len = (secs * sample_rate as f64).round() as usize;
    let sr = sample_rate as f64;
    let white: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x: Vec<f64> = match i % 4 {
        0 => {
            let pink = pink(&white);
            let rate = rng.random_range(1.0..4.0);
            pink.iter()
                .enumerate()
                .map(|(n, v)| v * (1.0 + 0.6 * (2.0 * PI * rate * n as f64 / sr).sin()))
                .collect()
        }
        1 => {
            let mut gate = vec![0.0; len];
            let mut pos = 0;
            while pos < len {
                let on = rng.random_range(0.05..0.25) * sr;
                let off = rng.random_range(0.05..0.3) * sr;
                let level = rng.random_range(0.4..1.0);
                for g in gate.iter_mut().skip(pos).take(on as usize) {
                    *g = level;
                }
                pos += (on + off) as usize;
            }
            white.iter().zip(&gate).map(|(v, g)| v * g).collect()
        }
        2 => {
            let center = rng.random_range(600.0..4000.0);
            bandpass(&white, center, 0.25, sr)
        }
        _ => {
            let density = rng.random_range(0.002..0.01);
            let mut out = vec![0.0; len];
            let mut state = 0.0;
            for o in out.iter_mut() {
                if rng.random::<f64>() < density {
                    state += rng.random_range(-1.0..1.0);
                }
                state *= 0.92;
                *o = state;
            }
            let floor = pink(&white);
            out.iter().zip(&floor).map(|(a, b)| a + 0.05 * b).collect()
        }
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    Waveform::new(x.iter().map(|v| v * scale).collect(), sample_rate)
}

/// Approximate 1/f noise from white noise (Kellet's filter).
fn pink(white: &[f64]) -> Vec<f64> {
    let mut b = [0.0; 7];
    white
        .iter()
        .map(|&w| {
            b[0] = 0.99886 * b[0] + w * 0.0555179;
            b[1] = 0.99332 * b[1] + w * 0.0750759;
            b[2] = 0.96900 * b[2] + w * 0.153852;
            b[3] = 0.86650 * b[3] + w * 0.3104856;
            b[4] = 0.55000 * b[4] + w * 0.5329522;
            b[5] = -0.7616 * b[5] - w * 0.0168980;
            let out = b.iter().sum::<f64>() + w * 0.5362;
            b[6] = w * 0.115926;
            out
        })
        .collect()
}
