use super::*;
use crate::dsp::{AnalysisConfig, MelSpectrogram};
use crate::seed::seeded_rng;
use rand::Rng;

pub(crate) fn micro_config() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        enc_blocks: 1,
        dec_blocks: 1,
        heads: 2,
        ffn_dim: 16,
        ffn_kernel: 3,
        variance_filter: 8,
        variance_kernel: 3,
        noise_blocks: 4,
        noise_kernel: 3,
        ref_channels: vec![2, 2, 4, 4],
        style_tokens: 10,
        style_heads: 8,
        n_bins: 256,
        n_mels: 80,
        bn_momentum: 0.1,
    }
}

fn micro_model(seed: u64) -> AcousticModel {
    let vocab = (0..6).map(|i| format!("p{i}")).collect();
    AcousticModel::init_seeded(micro_config(), vocab, 3, VarianceStats::identity(256), seed).unwrap()
}

fn random_mel(t: usize, seed: u64) -> Mat {
    let mut r = seeded_rng(seed);
    Mat::from_shape_simple_fn((t, 80), || r.random_range(-11.0..1.0))
}

fn mel_spec(m: Mat) -> MelSpectrogram {
    let c = AnalysisConfig::default();
    MelSpectrogram::new(m, c.frame_size, c.hop, c.sample_rate).unwrap()
}

fn random_env(model: &AcousticModel, seed: u64) -> EnvEmbedding {
    let mut r = seeded_rng(seed);
    EnvEmbedding {
        values: (0..model.env_dim()).map(|_| r.random_range(-1.0..1.0)).collect(),
    }
}

#[test]
fn encoder_shape_and_env_conditioning() {
    let m = micro_model(1);
    let tokens = [0, 3, 2, 5, 1];
    let zero = m.encode_phonemes(&tokens, 1, &EnvEmbedding::zeros(16)).unwrap();
    assert_eq!(zero.dim(), (5, 16));
    let env = random_env(&m, 2);
    let with = m.encode_phonemes(&tokens, 1, &env).unwrap();
    for (a, b) in zero.rows().into_iter().zip(with.rows()) {
        assert!(a.iter().zip(b.iter()).any(|(x, y)| x != y));
    }
    assert_eq!(with, m.encode_phonemes(&tokens, 1, &env).unwrap());
}

#[test]
fn out_of_vocabulary_tokens_are_rejected() {
    let m = micro_model(1);
    assert!(matches!(
        m.encode_phonemes(&[0, 6], 0, &EnvEmbedding::zeros(16)),
        Err(Error::InvalidInput(_))
    ));
    assert!(matches!(m.token_ids(&["zz".to_string()]), Err(Error::InvalidInput(_))));
}

#[test]
fn length_regulate_examples() {
    let h = Mat::from_shape_fn((3, 2), |(i, j)| (10 * i + j) as f64);
    assert_eq!(length_regulate(&h, &[1, 1, 1]).unwrap(), h);
    let out = length_regulate(&h, &[2, 0, 3]).unwrap();
    let rows: Vec<usize> = out.rows().into_iter().map(|r| (r[0] / 10.0) as usize).collect();
    assert_eq!(rows, vec![0, 0, 2, 2, 2]);
    assert!(matches!(length_regulate(&h, &[0, 0, 0]), Err(Error::EmptyExpansion)));
}

#[test]
fn quantizer_ties_go_to_lower_bin() {
    let q = Quantizer::new(0.0, 256.0, 256);
    assert_eq!(q.bin(-5.0), 0);
    assert_eq!(q.bin(0.5), 0);
    assert_eq!(q.bin(1.0), 0);
    assert_eq!(q.bin(1.0 + 1e-9), 1);
    assert_eq!(q.bin(255.0), 254);
    assert_eq!(q.bin(1e9), 255);
    for k in 1..256 {
        assert_eq!(q.bin(q.edge(k)), k - 1);
        assert_eq!(q.bin(q.edge(k)), q.bin(q.edge(k)));
    }
}

#[test]
fn duration_rounding_is_half_up_and_at_least_one() {
    assert_eq!(duration_from_log((3.5f64).ln()), 3);
    assert_eq!(duration_from_log((4.0f64).ln()), 3);
    assert_eq!(duration_from_log((4.5f64).ln()), 4);
    assert_eq!(duration_from_log(-10.0), 1);
    assert_eq!(duration_from_log(f64::NAN), 1);
}

#[test]
fn variance_shapes_and_teacher_forcing() {
    let m = micro_model(3);
    let enc = m.encode_phonemes(&[1, 2, 3], 0, &EnvEmbedding::zeros(16)).unwrap();
    let frames = length_regulate(&enc, &[2, 3, 4]).unwrap();
    let pitch: Vec<f64> = (0..9).map(|i| i as f64 * 0.3 - 1.0).collect();
    let energy: Vec<f64> = (0..9).map(|i| 1.0 - i as f64 * 0.2).collect();
    let v = m.predict_variances(&enc, &frames, Some((&pitch, &energy))).unwrap();
    assert_eq!(v.log_durations.len(), 3);
    assert_eq!(v.pitch.len(), 9);
    assert_eq!(v.energy.len(), 9);
    let pt = m.params.get("pitch_emb").unwrap();
    let et = m.params.get("energy_emb").unwrap();
    for t in 0..9 {
        let pb = m.stats.pitch_bins.bin(pitch[t]);
        let eb = m.stats.energy_bins.bin(energy[t]);
        for c in 0..16 {
            let expected = frames[[t, c]] + pt[[pb, c]] + et[[eb, c]];
            assert_eq!(v.frames[[t, c]], expected);
        }
    }
}

#[test]
fn noise_encoder_shape_locality_and_silence() {
    let m = micro_model(4);
    let mel = random_mel(40, 5);
    let base = m.noise_encode(&mel_spec(mel.clone()), 40).unwrap();
    assert_eq!(base.dim(), (40, 16));
    let t0 = 20;
    let mut probe = mel.clone();
    for c in 0..80 {
        probe[[t0, c]] += 3.0;
    }
    let moved = m.noise_encode(&mel_spec(probe), 40).unwrap();
    for t in 0..40 {
        let changed = base.row(t).iter().zip(moved.row(t).iter()).any(|(a, b)| a != b);
        if (t as isize - t0 as isize).abs() > 8 {
            assert!(!changed, "frame {t} changed");
        }
    }
    assert!(matches!(
        m.noise_encode(&mel_spec(mel), 41),
        Err(Error::FrameMismatch { expected: 41, actual: 40 })
    ));
    let s1 = m.silence_embedding(17).unwrap();
    let s2 = m.silence_embedding(17).unwrap();
    assert_eq!(s1, s2);
    let silence = MelSpectrogram::silence(17, &AnalysisConfig::default());
    assert_eq!(m.noise_encode(&silence, 17).unwrap(), s1);
}

#[test]
fn env_encoder_attention_and_convexity() {
    let m = micro_model(6);
    let enc = m.env_encode(&mel_spec(random_mel(23, 7))).unwrap();
    assert_eq!(enc.embedding.values.len(), 16);
    assert_eq!(enc.attention.dim(), (8, 10));
    for row in enc.attention.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|w| *w >= 0.0));
    }
    let values = m.style_values().unwrap();
    let dh = 2;
    for h in 0..8 {
        for d in 0..dh {
            let col = h * dh + d;
            let combo: f64 = (0..10).map(|j| enc.attention[[h, j]] * values[[j, col]]).sum();
            assert!((combo - enc.embedding.values[col]).abs() < 1e-12);
        }
    }
    let again = m.env_encode(&mel_spec(random_mel(23, 7))).unwrap();
    assert_eq!(again, enc);
}

#[test]
fn env_encoder_sees_time_order() {
    let m = micro_model(6);
    let mel = random_mel(24, 8);
    let mut rev = mel.clone();
    for t in 0..24 {
        rev.row_mut(t).assign(&mel.row(23 - t));
    }
    let a = m.env_encode(&mel_spec(mel)).unwrap();
    let b = m.env_encode(&mel_spec(rev)).unwrap();
    assert_ne!(a.embedding, b.embedding);
}

#[test]
fn decoder_noise_conditioning() {
    let m = micro_model(9);
    let mut r = seeded_rng(1);
    let frames = Mat::from_shape_simple_fn((12, 16), || r.random_range(-1.0..1.0));
    let zero = Mat::zeros((12, 16));
    let a = m.decode(&frames, &zero).unwrap();
    assert_eq!(a.dim(), (12, 80));
    assert_eq!(a, m.decode_unconditioned(&frames).unwrap());
    let other = Mat::from_elem((12, 16), 0.3);
    let b = m.decode(&frames, &other).unwrap();
    let l1: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
    assert!(l1 > 0.0);
    assert!(matches!(
        m.decode(&frames, &Mat::zeros((11, 16))),
        Err(Error::FrameMismatch { .. })
    ));
}

#[test]
fn forward_frame_counts() {
    let m = micro_model(10);
    let input = ModelInput {
        tokens: vec![1, 4, 2],
        speaker: 2,
        env: random_env(&m, 3),
        noise_mel: Some(random_mel(10, 4)),
    };
    let targets = VarianceTargets {
        durations: vec![3, 5, 2],
        pitch: vec![0.1; 10],
        energy: vec![-0.2; 10],
    };
    let p = m.forward(&input, ForwardMode::TeacherForced(&targets)).unwrap();
    assert_eq!(p.mel.nrows(), 10);
    let free = ModelInput { noise_mel: None, ..input };
    let q = m.forward(&free, ForwardMode::Inference { durations: None, pitch: None }).unwrap();
    let expected: usize = q.log_durations.iter().map(|&l| duration_from_log(l)).sum();
    assert_eq!(q.mel.nrows(), expected);
    assert_eq!(q.durations.iter().sum::<usize>(), expected);
}

#[test]
fn forward_matches_step_by_step_composition() {
    let m = micro_model(11);
    let env = random_env(&m, 5);
    let tokens = vec![0, 5, 3, 3];
    let noise = random_mel(13, 6);
    let targets = VarianceTargets {
        durations: vec![4, 1, 6, 2],
        pitch: (0..13).map(|i| (i as f64 * 0.7).sin()).collect(),
        energy: (0..13).map(|i| (i as f64 * 0.3).cos()).collect(),
    };
    let input = ModelInput {
        tokens: tokens.clone(),
        speaker: 1,
        env: env.clone(),
        noise_mel: Some(noise.clone()),
    };
    let full = m.forward(&input, ForwardMode::TeacherForced(&targets)).unwrap();

    let enc = m.encode_phonemes(&tokens, 1, &env).unwrap();
    let frames = length_regulate(&enc, &targets.durations).unwrap();
    let var = m
        .predict_variances(&enc, &frames, Some((&targets.pitch, &targets.energy)))
        .unwrap();
    let h_noise = m.noise_encode(&mel_spec(noise), 13).unwrap();
    let mel = m.decode(&var.frames, &h_noise).unwrap();
    assert_eq!(full.mel, mel);
    assert_eq!(full.log_durations, var.log_durations);
    assert_eq!(full.pitch, var.pitch);
    assert_eq!(full.energy, var.energy);
}

#[test]
fn running_stats_update_and_checkpoint_round_trip() {
    let mut m = micro_model(12);
    let mut g = Graph::new(&m.params);
    let mel = random_mel(9, 1);
    let (_, stats) = m.noise_encode_graph(&mut g, &[&mel], true).unwrap();
    drop(g);
    assert_eq!(stats.len(), 8);
    m.update_running_stats(&stats);
    let b = m.buffers.get("noise.0.bn1.mean").unwrap();
    for (v, s) in b.iter().zip(&stats[0].mean) {
        assert!((v - 0.1 * s).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.save(&p, serde_json::json!({"corpus_hash": "abc"})).unwrap();
    assert_eq!(AcousticModel::load(&p).unwrap(), m);
}
