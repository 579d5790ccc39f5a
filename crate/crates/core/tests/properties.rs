use std::collections::BTreeMap;

use proptest::prelude::*;

use envtts::config::{apply_env_overrides, PipelineConfig};
use envtts::degrade::{convolve, parse_conditions, DegradationCondition, Manifest, UtteranceRecord};
use envtts::dsp::{measure_lufs, MelSpectrogram, Waveform};
use envtts::infer::{read_mel, write_mel};
use envtts::metrics::{dtw_align, mcd};
use envtts::model::length_regulate;
use envtts::nn::Mat;
use envtts::separation::{si_snr_slices, SI_SNR_CAP_DB};
use envtts::train::{fit_frames, total_loss};

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-5.0..5.0f64, rows * cols).prop_map(move |v| Mat::from_shape_vec((rows, cols), v).unwrap())
}

fn seq_pair() -> impl Strategy<Value = (Mat, Mat)> {
    (1usize..12, 1usize..12, 1usize..5).prop_flat_map(|(n, m, d)| (mat(n, d), mat(m, d)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn length_regulate_repeats_each_row_by_its_duration(
        (h, d) in (1usize..8, 1usize..6).prop_flat_map(|(n, w)| (mat(n, w), prop::collection::vec(0usize..6, n)))
    ) {
        let total: usize = d.iter().sum();
        match length_regulate(&h, &d) {
            Err(_) => prop_assert_eq!(total, 0),
            Ok(out) => {
                prop_assert_eq!(out.nrows(), total);
                let mut t = 0;
                for (i, &k) in d.iter().enumerate() {
                    for _ in 0..k {
                        prop_assert_eq!(out.row(t), h.row(i));
                        t += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn dtw_path_is_monotone_anchored_and_costed((a, b) in seq_pair()) {
        let p = dtw_align(&a, &b).unwrap();
        prop_assert_eq!(p.path[0], (0, 0));
        prop_assert_eq!(*p.path.last().unwrap(), (a.nrows() - 1, b.nrows() - 1));
        for w in p.path.windows(2) {
            let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
            prop_assert!(matches!((di, dj), (1, 1) | (1, 0) | (0, 1)));
        }
        let along: f64 = p
            .path
            .iter()
            .map(|&(i, j)| (&a.row(i) - &b.row(j)).mapv(|x| x * x).sum().sqrt())
            .sum();
        prop_assert!((along - p.cost).abs() <= 1e-9 * (1.0 + p.cost));
        let back = dtw_align(&b, &a).unwrap();
        prop_assert!((back.cost - p.cost).abs() <= 1e-9 * (1.0 + p.cost));
    }

    #[test]
    fn mcd_is_a_nonnegative_symmetric_divergence((a, b) in seq_pair()) {
        let ab = mcd(&a, &b).unwrap().mcd;
        let ba = mcd(&b, &a).unwrap().mcd;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-9 * (1.0 + ab));
        prop_assert_eq!(mcd(&a, &a).unwrap().mcd, 0.0);
    }

    #[test]
    fn total_loss_is_affine(main in 0.0..100.0f64, avg in 0.0..100.0f64, alpha in 0.0..4.0f64) {
        let t = total_loss(main, avg, alpha);
        prop_assert!((t - (main + alpha * avg)).abs() <= 1e-9);
        prop_assert_eq!(total_loss(main, avg, 0.0), main);
    }

    #[test]
    fn si_snr_ignores_scale_and_respects_the_cap(
        t in prop::collection::vec(-1.0..1.0f64, 64..256),
        noise_seed in any::<u64>(),
        g in 0.01..100.0f64,
    ) {
        let spread = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - t.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let e: Vec<f64> = t
            .iter()
            .enumerate()
            .map(|(i, x)| x + 0.1 * (((i as u64).wrapping_mul(noise_seed | 1) % 1000) as f64 / 500.0 - 1.0))
            .collect();
        let base = si_snr_slices(&e, &t).unwrap();
        let scaled: Vec<f64> = e.iter().map(|x| g * x).collect();
        prop_assert!((si_snr_slices(&scaled, &t).unwrap() - base).abs() <= 1e-8);
        prop_assert!(base <= SI_SNR_CAP_DB);
    }

    #[test]
    fn gain_shifts_loudness_by_its_decibels(seed in any::<u64>(), g in 0.05..4.0f64) {
        let mut x = seed | 1;
        let samples: Vec<f64> = (0..22050)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                (x % 2001) as f64 / 1000.0 - 1.0
            })
            .map(|v| 0.2 * v)
            .collect();
        let w = Waveform::new(samples, 22050).unwrap();
        let delta = measure_lufs(&w.scaled(g)).unwrap() - measure_lufs(&w).unwrap();
        prop_assert!((delta - 20.0 * g.log10()).abs() <= 0.05);
    }

    #[test]
    fn fit_frames_keeps_the_shared_prefix(m in mat(6, 3), t in 1usize..12) {
        let f = fit_frames(&m, t);
        prop_assert_eq!(f.nrows(), t);
        for i in 0..t.min(6) {
            prop_assert_eq!(f.row(i), m.row(i));
        }
        for i in 6..t {
            prop_assert_eq!(f.row(i), m.row(5));
        }
    }

    #[test]
    fn convolution_with_a_delayed_impulse_shifts(
        x in prop::collection::vec(-1.0..1.0f64, 1..200),
        delay in 0usize..20,
    ) {
        let mut h = vec![0.0; delay + 1];
        h[delay] = 1.0;
        let y = convolve(&x, &h, x.len() + delay);
        for (i, v) in x.iter().enumerate() {
            prop_assert!((y[i + delay] - v).abs() < 1e-9);
        }
    }

    #[test]
    fn per_speaker_split_partitions_records(counts in prop::collection::vec(1usize..7, 1..5), k in 0usize..4) {
        let mut records = Vec::new();
        for (s, &n) in counts.iter().enumerate() {
            for u in 0..n {
                records.push(record(&format!("s{s}_{u}"), s));
            }
        }
        let m = Manifest::new(records.clone(), "/tmp");
        let (head, tail) = m.split_per_speaker(k);
        prop_assert_eq!(head.records.len() + tail.records.len(), records.len());
        let mut per: BTreeMap<usize, usize> = BTreeMap::new();
        for r in &tail.records {
            *per.entry(r.speaker_id).or_default() += 1;
        }
        for (s, &n) in counts.iter().enumerate() {
            prop_assert_eq!(per.get(&s).copied().unwrap_or(0), k.min(n));
        }
        let last_of = |s: usize| records.iter().filter(|r| r.speaker_id == s).next_back().unwrap().id.clone();
        for (s, &n) in counts.iter().enumerate() {
            if k > 0 {
                prop_assert!(tail.records.iter().any(|r| r.id == last_of(s)), "speaker {} with {} records", s, n);
            }
        }
    }

    #[test]
    fn mel_files_round_trip_at_f32(m in (1usize..20).prop_flat_map(|t| mat(t, 8))) {
        let dir = tempfile::tempdir().unwrap();
        let mel = MelSpectrogram::new(m.clone(), 1024, 256, 22050).unwrap();
        let path = dir.path().join("x.mel");
        write_mel(&path, &mel, serde_json::json!({"k": 1})).unwrap();
        let (back, side) = read_mel(&path).unwrap();
        prop_assert_eq!(side.shape, [m.nrows(), 8]);
        for (a, b) in back.values().iter().zip(m.iter()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn condition_lists_round_trip(mask in 1u8..16) {
        let chosen: Vec<DegradationCondition> =
            DegradationCondition::ALL.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, c)| *c).collect();
        let text = chosen.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        prop_assert_eq!(parse_conditions(&text).unwrap(), chosen);
    }

    #[test]
    fn env_overrides_set_nested_numbers(seed in any::<u32>(), steps in 1u64..100_000) {
        let mut tree = serde_json::to_value(PipelineConfig::default()).unwrap();
        let vars = vec![
            ("ENVTTS_SEED".to_string(), seed.to_string()),
            ("ENVTTS_TRAIN__STEPS".to_string(), steps.to_string()),
            ("OTHER_SEED".to_string(), "1".to_string()),
        ];
        let applied = apply_env_overrides(&mut tree, vars).unwrap();
        prop_assert_eq!(applied.len(), 2);
        let cfg: PipelineConfig = serde_json::from_value(tree).unwrap();
        prop_assert_eq!(cfg.seed, seed as u64);
        prop_assert_eq!(cfg.train.steps, steps);
    }
}

fn record(id: &str, speaker: usize) -> UtteranceRecord {
    UtteranceRecord {
        id: id.into(),
        speaker_id: speaker,
        phonemes: vec!["a".into()],
        durations: vec![1],
        condition: DegradationCondition::Clean,
        clean_path: format!("{id}.wav"),
        degraded_path: format!("{id}.wav"),
        noise_lufs: None,
        rir_seed: None,
        noise_path: None,
        rir_gain: None,
    }
}
