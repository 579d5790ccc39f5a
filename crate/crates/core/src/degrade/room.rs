//! Shoebox room impulse responses by the image-source method.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

/// Sabine's constant `24 ln 10 / c` at c = 343 m/s.
pub const SABINE_CONSTANT: f64 = 0.161;
/// Taps of the windowed-sinc fractional-delay kernel.
pub const FRACTIONAL_DELAY_TAPS: usize = 81;

pub type Point = [f64; 3];

/// Room geometry and reverberation target. Defaults are the 10 × 7.5 × 3.5 m
/// room with a standing talker, a low microphone and a floor-level noise
/// source, at T60 = 0.2 s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct RoomSpec {
    pub dims: Point,
    pub source_pos: Point,
    pub mic_pos: Point,
    pub noise_pos: Point,
    pub t60: f64,
    pub speed_of_sound: f64,
}

impl Default for RoomSpec {
    fn default() -> Self {
        RoomSpec {
            dims: [10.0, 7.5, 3.5],
            source_pos: [5.0, 3.0, 1.6],
            mic_pos: [0.5, 4.0, 0.5],
            noise_pos: [3.0, 7.0, 0.2],
            t60: 0.2,
            speed_of_sound: 343.0,
        }
    }
}

impl RoomSpec {
    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface_area(&self) -> f64 {
        let [l, w, h] = self.dims;
        2.0 * (l * w + l * h + w * h)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.iter().zip(&self.dims).all(|(&x, &d)| x > 0.0 && x < d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::DegenerateGeometry(format!("room dims {:?}", self.dims)));
        }
        for (name, p) in [
            ("source_pos", &self.source_pos),
            ("mic_pos", &self.mic_pos),
            ("noise_pos", &self.noise_pos),
        ] {
            if !self.contains(p) {
                return Err(Error::DegenerateGeometry(format!("{name} {p:?} is not strictly inside the room")));
            }
        }
        if !(self.t60 > 0.0 && self.t60.is_finite()) {
            return Err(Error::invalid(format!("t60 must be positive, got {}", self.t60)));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::invalid("speed of sound must be positive"));
        }
        Ok(())
    }
}

/// Uniform wall absorption from Sabine's formula, `0.161 V / (S T60)`.
pub fn sabine_absorption(room: &RoomSpec) -> Result<f64> {
    room.validate()?;
    let alpha = SABINE_CONSTANT * room.volume() / (room.surface_area() * room.t60);
    if alpha > 1.0 {
        return Err(Error::UnachievableReverb { alpha });
    }
    Ok(alpha)
}

fn distance(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Impulse response from `src` to `mic` using the Sabine absorption.
pub fn simulate_rir(room: &RoomSpec, src: &Point, mic: &Point, sample_rate: u32) -> Result<Waveform> {
    let alpha = sabine_absorption(room)?;
    simulate_rir_with_absorption(room, src, mic, sample_rate, alpha)
}

/// Image-source impulse response with an explicit energy absorption.
///
/// Each image with `k` wall reflections at distance `d` contributes
/// `(1 - α)^(k/2) / (4π d)` at delay `d / c`, spread over an 81-tap
/// Hann-windowed sinc. Images are enumerated out to the distance sound
/// travels in the response length, which is at least `1.5 · T60`.
pub fn simulate_rir_with_absorption(
    room: &RoomSpec,
    src: &Point,
    mic: &Point,
    sample_rate: u32,
    alpha: f64,
) -> Result<Waveform> {
    room.validate()?;
    if !room.contains(src) || !room.contains(mic) {
        return Err(Error::DegenerateGeometry("source and microphone must be inside the room".into()));
    }
    if distance(src, mic) < 1e-9 {
        return Err(Error::DegenerateGeometry("source and microphone coincide".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::UnachievableReverb { alpha });
    }
    let fs = sample_rate as f64;
    let c = room.speed_of_sound;
    let half_taps = (FRACTIONAL_DELAY_TAPS / 2) as isize;
    let direct_delay = distance(src, mic) / c * fs;
    let len = ((1.5 * room.t60 * fs).ceil() as usize).max(direct_delay.ceil() as usize + FRACTIONAL_DELAY_TAPS + 1);
    let max_dist = (len as f64 - half_taps as f64 - 1.0) / fs * c;
    let reflection = (1.0 - alpha).sqrt();

    // Per-axis image coordinates and reflection counts (Allen & Berkley).
    let axis_images = |axis: usize| -> Vec<(f64, i32)> {
        let size = room.dims[axis];
        let order = (max_dist / (2.0 * size)).ceil() as i32 + 1;
        let mut out = Vec::new();
        for n in -order..=order {
            for q in 0..2 {
                let coord = (1 - 2 * q) as f64 * src[axis] + 2.0 * n as f64 * size;
                out.push((coord - mic[axis], (n - q).abs() + n.abs()));
            }
        }
        out
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));

    let mut h = vec![0.0; len];
    for &(dx, kx) in &xs {
        if dx.abs() > max_dist {
            continue;
        }
        for &(dy, ky) in &ys {
            if (dx * dx + dy * dy).sqrt() > max_dist {
                continue;
            }
            for &(dz, kz) in &zs {
                let d = (dx * dx + dy * dy + dz * dz).sqrt();
                if d > max_dist {
                    continue;
                }
                let k = kx + ky + kz;
                let gain = if k == 0 { 1.0 } else { reflection.powi(k) };
                if gain == 0.0 {
                    continue;
                }
                let amp = gain / (4.0 * PI * d);
                add_fractional_impulse(&mut h, d / c * fs, amp, half_taps);
            }
        }
    }
    Waveform::new(h, sample_rate)
}

fn add_fractional_impulse(h: &mut [f64], delay: f64, amp: f64, half_taps: isize) {
    let center = delay.round() as isize;
    let width = (half_taps + 1) as f64;
    for i in center - half_taps..=center + half_taps {
        if i < 0 || i as usize >= h.len() {
            continue;
        }
        let x = i as f64 - delay;
        let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
        let window = 0.5 * (1.0 + (PI * x / width).cos());
        h[i as usize] += amp * sinc * window;
    }
}

/// T60 from Schroeder backward integration, extrapolating the -5 to -35 dB
/// decay of the energy decay curve. `None` if the curve never reaches -35 dB.
pub fn schroeder_t60(rir: &Waveform) -> Option<f64> {
    let h = rir.samples();
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    if acc <= 0.0 {
        return None;
    }
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / acc).log10()).collect();
    let i5 = db.iter().position(|&v| v <= -5.0)?;
    let i35 = db.iter().position(|&v| v <= -35.0)?;
    Some((i35 - i5) as f64 / rir.sample_rate() as f64 * 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sabine_hand_calculation() {
        let room = RoomSpec::default();
        assert_eq!(room.volume(), 262.5);
        assert_eq!(room.surface_area(), 272.5);
        let alpha = sabine_absorption(&room).unwrap();
        assert!((alpha - 0.775).abs() < 0.001, "{alpha}");
    }

    #[test]
    fn sabine_inversion_gives_one_tenth() {
        let mut room = RoomSpec::default();
        room.t60 = 10.0 * SABINE_CONSTANT * room.volume() / room.surface_area();
        assert!((sabine_absorption(&room).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn tiny_room_is_unachievable() {
        let room = RoomSpec {
            dims: [1.0, 1.0, 1.0],
            source_pos: [0.2, 0.2, 0.2],
            mic_pos: [0.7, 0.7, 0.7],
            noise_pos: [0.5, 0.5, 0.5],
            t60: 0.01,
            ..RoomSpec::default()
        };
        assert!(matches!(sabine_absorption(&room), Err(Error::UnachievableReverb { .. })));
    }

    #[test]
    fn coincident_source_and_mic_is_degenerate() {
        let room = RoomSpec::default();
        let p = room.source_pos;
        assert!(matches!(simulate_rir(&room, &p, &p, 22050), Err(Error::DegenerateGeometry(_))));
    }

    fn anechoic_peak(room: &RoomSpec) -> (usize, Vec<f64>) {
        let h = simulate_rir_with_absorption(room, &room.source_pos, &room.mic_pos, 22050, 1.0).unwrap();
        let s = h.samples().to_vec();
        let peak = (0..s.len()).max_by(|&a, &b| s[a].abs().partial_cmp(&s[b].abs()).unwrap()).unwrap();
        (peak, s)
    }

    #[test]
    fn anechoic_direct_path_delay() {
        let room = RoomSpec::default();
        let d = distance(&room.source_pos, &room.mic_pos);
        assert!((d - 4.739).abs() < 1e-3);
        let (peak, s) = anechoic_peak(&room);
        assert!((peak as i64 - 305).abs() <= 1, "peak at {peak}");
        // Nothing but the direct-path kernel: every tap outside its support
        // is below 1% of the peak.
        let half = FRACTIONAL_DELAY_TAPS / 2;
        for (i, v) in s.iter().enumerate() {
            if i + half < peak || i > peak + half {
                assert!(v.abs() < 0.01 * s[peak].abs(), "tap {i}");
            }
        }
    }

    #[test]
    fn doubling_geometry_doubles_delay() {
        let room = RoomSpec::default();
        let scale = |p: Point| [2.0 * p[0], 2.0 * p[1], 2.0 * p[2]];
        let big = RoomSpec {
            dims: scale(room.dims),
            source_pos: scale(room.source_pos),
            mic_pos: scale(room.mic_pos),
            noise_pos: scale(room.noise_pos),
            ..room.clone()
        };
        let (p1, _) = anechoic_peak(&room);
        let (p2, _) = anechoic_peak(&big);
        let d = distance(&room.source_pos, &room.mic_pos) / 343.0 * 22050.0;
        assert!((p2 as f64 - 2.0 * d).abs() <= 0.5 + 1e-9);
        assert!((p2 as i64 - 2 * p1 as i64).abs() <= 1);
    }

    #[test]
    fn schroeder_estimate_near_target() {
        let room = RoomSpec::default();
        let h = simulate_rir(&room, &room.source_pos, &room.mic_pos, 22050).unwrap();
        assert!(h.len() as f64 >= 1.5 * 0.2 * 22050.0);
        let t60 = schroeder_t60(&h).unwrap();
        assert!((t60 - 0.2).abs() <= 0.05, "t60 {t60}");
    }

    #[test]
    fn late_energy_is_below_early_energy() {
        let room = RoomSpec::default();
        let h = simulate_rir(&room, &room.noise_pos, &room.mic_pos, 22050).unwrap();
        let s = h.samples();
        let n = |t: f64| (t * 22050.0) as usize;
        let energy = |a: usize, b: usize| s[a..b.min(s.len())].iter().map(|x| x * x).sum::<f64>();
        assert!(s.iter().all(|x| x.is_finite()));
        assert!(energy(n(0.2), n(0.3)) < energy(0, n(0.1)));
    }
}
