use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::room::{simulate_rir, RoomSpec};
use crate::dsp::{scale_to_lufs, Waveform};
use crate::error::{Error, Result};

/// Noise loudness range for the degraded corpus, LUFS.
pub const DEFAULT_NOISE_LUFS: [f64; 2] = [-40.0, -32.0];

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema,
)]
pub enum DegradationCondition {
    Clean,
    Noise,
    Reverb,
    NoiseReverb,
}

impl DegradationCondition {
    pub const ALL: [DegradationCondition; 4] = [
        DegradationCondition::Clean,
        DegradationCondition::Noise,
        DegradationCondition::Reverb,
        DegradationCondition::NoiseReverb,
    ];

    pub fn has_noise(self) -> bool {
        matches!(self, DegradationCondition::Noise | DegradationCondition::NoiseReverb)
    }

    pub fn has_reverb(self) -> bool {
        matches!(self, DegradationCondition::Reverb | DegradationCondition::NoiseReverb)
    }

    /// Directory-safe name used in the output layout.
    pub fn slug(self) -> &'static str {
        match self {
            DegradationCondition::Clean => "clean",
            DegradationCondition::Noise => "noise",
            DegradationCondition::Reverb => "reverb",
            DegradationCondition::NoiseReverb => "noise_reverb",
        }
    }
}

impl fmt::Display for DegradationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DegradationCondition::Clean => "Clean",
            DegradationCondition::Noise => "Noise",
            DegradationCondition::Reverb => "Reverb",
            DegradationCondition::NoiseReverb => "Noise+Reverb",
        };
        f.write_str(s)
    }
}

impl FromStr for DegradationCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "clean" => Ok(DegradationCondition::Clean),
            "noise" => Ok(DegradationCondition::Noise),
            "reverb" => Ok(DegradationCondition::Reverb),
            "noisereverb" => Ok(DegradationCondition::NoiseReverb),
            _ => Err(Error::invalid(format!("unknown degradation condition '{s}'"))),
        }
    }
}

/// Parses a comma-separated condition list such as `Clean,Noise`.
pub fn parse_conditions(s: &str) -> Result<Vec<DegradationCondition>> {
    let mut out: Vec<DegradationCondition> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::invalid("empty condition list"));
    }
    Ok(out)
}

/// Linear convolution of `x` with `h`, truncated to the first `out_len`
/// samples.
pub fn convolve(x: &[f64], h: &[f64], out_len: usize) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; out_len];
    }
    if x.len().min(h.len()) <= 64 || x.len() * h.len() <= 1 << 16 {
        let mut y = vec![0.0; out_len];
        for (i, &xi) in x.iter().enumerate() {
            if i >= out_len {
                break;
            }
            for (j, &hj) in h.iter().take(out_len - i).enumerate() {
                y[i + j] += xi * hj;
            }
        }
        return y;
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let pad = |v: &[f64]| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for (b, &s) in buf.iter_mut().zip(v) {
            b.re = s;
        }
        buf
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    (0..out_len)
        .map(|i| if i < n { a[i].re / n as f64 } else { 0.0 })
        .collect()
}

/// Convolution with a room response, truncated to the input length. If the
/// result would clip, it is scaled back to the input's peak and the applied
/// gain is returned alongside; otherwise the gain is 1.
pub fn apply_rir_with_gain(w: &Waveform, rir: &Waveform) -> Result<(Waveform, f64)> {
    if w.sample_rate() != rir.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rate mismatch: signal {} Hz, impulse response {} Hz",
            w.sample_rate(),
            rir.sample_rate()
        )));
    }
    let y = convolve(w.samples(), rir.samples(), w.len());
    let out = Waveform::new(y, w.sample_rate())?;
    let peak = out.peak();
    if peak > 1.0 {
        let gain = w.peak() / peak;
        Ok((out.scaled(gain), gain))
    } else {
        Ok((out, 1.0))
    }
}

pub fn apply_rir(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    Ok(apply_rir_with_gain(w, rir)?.0)
}

/// Tiles `noise` and truncates to exactly `n_samples`.
pub fn fit_noise_length(noise: &Waveform, n_samples: usize) -> Result<Waveform> {
    if noise.is_empty() {
        return Err(Error::invalid("noise clip is empty"));
    }
    let src = noise.samples();
    let samples = (0..n_samples).map(|i| src[i % src.len()]).collect();
    Waveform::new(samples, noise.sample_rate())
}

/// What was done to one utterance.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DegradationMeta {
    /// Integrated loudness the noise clip was scaled to.
    pub noise_lufs: Option<f64>,
    /// Provenance seed drawn for reverberant conditions. The image-source
    /// response itself is deterministic given the room.
    pub rir_seed: Option<u64>,
    /// Anti-clipping gain applied after convolving the speech, if not 1.
    pub rir_gain: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Degraded {
    pub waveform: Waveform,
    /// The additive noise as it appears in the mixture (reverberated for
    /// Noise+Reverb), if any.
    pub noise_component: Option<Waveform>,
    pub meta: DegradationMeta,
}

/// Precomputed speech and noise room responses for one room and rate.
#[derive(Clone, Debug)]
pub struct Degrader {
    sample_rate: u32,
    noise_lufs: [f64; 2],
    speech_rir: Waveform,
    noise_rir: Waveform,
}

impl Degrader {
    pub fn new(room: &RoomSpec, sample_rate: u32, noise_lufs: [f64; 2]) -> Result<Self> {
        if !(noise_lufs[0] <= noise_lufs[1]) {
            return Err(Error::Config(format!("noise LUFS range {noise_lufs:?} is empty")));
        }
        Ok(Degrader {
            sample_rate,
            noise_lufs,
            speech_rir: simulate_rir(room, &room.source_pos, &room.mic_pos, sample_rate)?,
            noise_rir: simulate_rir(room, &room.noise_pos, &room.mic_pos, sample_rate)?,
        })
    }

    pub fn speech_rir(&self) -> &Waveform {
        &self.speech_rir
    }

    pub fn noise_rir(&self) -> &Waveform {
        &self.noise_rir
    }

    pub fn degrade<R: Rng>(
        &self,
        clean: &Waveform,
        noise: &Waveform,
        cond: DegradationCondition,
        rng: &mut R,
    ) -> Result<Degraded> {
        if clean.sample_rate() != self.sample_rate || noise.sample_rate() != self.sample_rate {
            return Err(Error::invalid(format!(
                "expected {} Hz audio, got speech at {} Hz and noise at {} Hz",
                self.sample_rate,
                clean.sample_rate(),
                noise.sample_rate()
            )));
        }
        let mut meta = DegradationMeta::default();
        let noise_part = if cond.has_noise() {
            let u = rng.random_range(self.noise_lufs[0]..=self.noise_lufs[1]);
            meta.noise_lufs = Some(u);
            Some(scale_to_lufs(&fit_noise_length(noise, clean.len())?, u)?)
        } else {
            None
        };
        if cond.has_reverb() {
            meta.rir_seed = Some(rng.random());
        }
        let speech = if cond.has_reverb() {
            let (y, gain) = apply_rir_with_gain(clean, &self.speech_rir)?;
            if gain != 1.0 {
                meta.rir_gain = Some(gain);
            }
            y
        } else {
            clean.clone()
        };
        let noise_component = match noise_part {
            Some(n) if cond.has_reverb() => Some(apply_rir(&n, &self.noise_rir)?),
            other => other,
        };
        let waveform = match &noise_component {
            Some(n) => speech.add(n)?,
            None => speech,
        };
        Ok(Degraded {
            waveform,
            noise_component,
            meta,
        })
    }
}

/// One-shot degradation; builds the room responses on every call, so corpus
/// builders should hold a [`Degrader`] instead.
pub fn degrade_utterance<R: Rng>(
    clean: &Waveform,
    noise: &Waveform,
    cond: DegradationCondition,
    room: &RoomSpec,
    rng: &mut R,
) -> Result<(Waveform, DegradationMeta)> {
    let d = Degrader::new(room, clean.sample_rate(), DEFAULT_NOISE_LUFS)?.degrade(clean, noise, cond, rng)?;
    Ok((d.waveform, d.meta))
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::dsp::measure_lufs;
    use crate::seed::seeded_rng;

    fn tone(len: usize, freq: f64, amp: f64) -> Waveform {
        let x = (0..len)
            .map(|n| amp * (2.0 * PI * freq * n as f64 / 22050.0).sin())
            .collect();
        Waveform::new(x, 22050).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = seeded_rng(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-0.3..0.3)).collect(), 22050).unwrap()
    }

    #[test]
    fn unit_impulse_is_identity() {
        let w = noise(3000, 1);
        let y = apply_rir(&w, &Waveform::new(vec![1.0], 22050).unwrap()).unwrap();
        assert_eq!(y, w);
    }

    #[test]
    fn delayed_impulse_shifts() {
        let w = noise(5000, 2);
        let mut h = vec![0.0; 500];
        h[37] = 1.0;
        let y = apply_rir(&w, &Waveform::new(h, 22050).unwrap()).unwrap();
        for i in 0..w.len() {
            let expected = if i >= 37 { w.samples()[i - 37] } else { 0.0 };
            assert!((y.samples()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_and_direct_convolution_agree() {
        let x = noise(3000, 3).into_samples();
        let h = noise(700, 4).into_samples();
        let fast = convolve(&x, &h, 3000);
        let mut slow = vec![0.0; 3000];
        for i in 0..3000 {
            for j in 0..700.min(i + 1) {
                slow[i] += x[i - j] * h[j];
            }
        }
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn clipping_is_peak_normalized() {
        let w = tone(4000, 440.0, 0.9);
        let (y, gain) = apply_rir_with_gain(&w, &Waveform::new(vec![1.0, 1.0, 1.0], 22050).unwrap()).unwrap();
        assert!(gain < 1.0);
        assert!((y.peak() - w.peak()).abs() < 1e-12);
    }

    #[test]
    fn fit_noise_tiles_and_truncates() {
        let n = Waveform::new((0..100).map(|i| i as f64 / 100.0).collect(), 22050).unwrap();
        let y = fit_noise_length(&n, 250).unwrap();
        let mut expected = n.samples().to_vec();
        expected.extend_from_slice(n.samples());
        expected.extend_from_slice(&n.samples()[..50]);
        assert_eq!(y.samples(), &expected[..]);
        assert_eq!(fit_noise_length(&n, 100).unwrap(), n);
        assert!(fit_noise_length(&n, 0).unwrap().is_empty());
        assert!(fit_noise_length(&Waveform::zeros(0, 22050), 5).is_err());
    }

    #[test]
    fn conditions_parse_and_display() {
        assert_eq!(
            parse_conditions("clean, Noise+Reverb").unwrap(),
            vec![DegradationCondition::Clean, DegradationCondition::NoiseReverb]
        );
        assert!(parse_conditions("dry").is_err());
        for c in DegradationCondition::ALL {
            assert_eq!(c.to_string().parse::<DegradationCondition>().unwrap(), c);
        }
    }

    #[test]
    fn clean_is_bit_identical_and_noise_lands_in_range() {
        let room = RoomSpec::default();
        let d = Degrader::new(&room, 22050, DEFAULT_NOISE_LUFS).unwrap();
        let clean = tone(22050, 200.0, 0.3);
        let n = noise(9000, 5);
        let mut rng = seeded_rng(9);
        let out = d.degrade(&clean, &n, DegradationCondition::Clean, &mut rng).unwrap();
        assert_eq!(out.waveform, clean);
        for cond in DegradationCondition::ALL {
            let out = d.degrade(&clean, &n, cond, &mut rng).unwrap();
            assert_eq!(out.waveform.len(), clean.len());
            if cond == DegradationCondition::Noise {
                let u = out.meta.noise_lufs.unwrap();
                assert!((-40.0..=-32.0).contains(&u));
                let measured = measure_lufs(out.noise_component.as_ref().unwrap()).unwrap();
                assert!((measured - u).abs() < 0.1);
            }
        }
    }

    #[test]
    fn silent_noise_cannot_be_scaled() {
        let room = RoomSpec::default();
        let mut rng = seeded_rng(0);
        let r = degrade_utterance(
            &tone(22050, 200.0, 0.3),
            &Waveform::zeros(100, 22050),
            DegradationCondition::Noise,
            &room,
            &mut rng,
        );
        assert!(matches!(r, Err(Error::CannotScale)));
    }

    #[test]
    fn same_seed_same_output() {
        let room = RoomSpec::default();
        let clean = tone(22050, 150.0, 0.3);
        let n = noise(5000, 6);
        let run = |s| {
            let mut rng = seeded_rng(s);
            degrade_utterance(&clean, &n, DegradationCondition::NoiseReverb, &room, &mut rng).unwrap()
        };
        assert_eq!(run(11), run(11));
    }
}
