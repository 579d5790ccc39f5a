use super::*;
use crate::degrade::DegradationCondition as C;
use crate::dsp::LOG_FLOOR;
use crate::nn::Mat;
use crate::model::{duration_from_log, ModelConfig, VarianceStats};
use crate::train::tests::{corpus, model_for};

fn all_conditions() -> BTreeSet<C> {
    [C::Clean, C::Noise, C::Reverb, C::NoiseReverb].into_iter().collect()
}

fn request(render: bool) -> SynthesisRequest {
    SynthesisRequest {
        phonemes: ["p1", "p4", "p2", "p0"].iter().map(|s| s.to_string()).collect(),
        speaker_id: 1,
        durations: None,
        pitch_hz: None,
        render_waveform: render,
    }
}

#[test]
fn average_of_one_is_the_embedding_itself() {
    let f = corpus();
    let m = model_for(&f, 1);
    let only: BTreeSet<C> = [C::Clean].into_iter().collect();
    let one = vec![f[0].clone()];
    let (avg, n) = average_embedding_of_features(&m, &one, &only).unwrap();
    assert_eq!(n, 1);
    assert_eq!(avg, m.env_encode_values(&f[0].denoised_mel).unwrap().embedding);
}

#[test]
fn average_is_order_free_and_inside_the_norm_ball() {
    let f = corpus();
    let m = model_for(&f, 2);
    let conds = all_conditions();
    let (a, n) = average_embedding_of_features(&m, &f, &conds).unwrap();
    assert_eq!(n, f.len());
    let mut rev = f.clone();
    rev.reverse();
    let (b, _) = average_embedding_of_features(&m, &rev, &conds).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() < 1e-12);
    }
    let max_norm = f
        .iter()
        .map(|x| m.env_encode_values(&x.denoised_mel).unwrap().embedding.norm())
        .fold(0.0, f64::max);
    assert!(a.norm() <= max_norm + 1e-12);
}

#[test]
fn no_qualifying_records_is_an_empty_set() {
    let f: Vec<_> = corpus().into_iter().filter(|x| x.condition != C::Clean).collect();
    let m = model_for(&f, 3);
    let only: BTreeSet<C> = [C::Clean].into_iter().collect();
    assert!(matches!(
        average_embedding_of_features(&m, &f, &only),
        Err(Error::EmptySet(_))
    ));
    assert!(matches!(
        CleanEmbeddingArtifact::new(EnvEmbedding::zeros(4), 0, vec![], String::new()),
        Err(Error::EmptySet(_))
    ));
}

#[test]
fn synthesis_is_deterministic_and_frame_consistent() {
    let f = corpus();
    let m = model_for(&f, 4);
    let (clean, _) = average_embedding_of_features(&m, &f, &[C::Clean, C::Noise].into_iter().collect()).unwrap();
    let a = synthesize(&request(false), &m, &clean, &AnalysisConfig::default(), 4).unwrap();
    let b = synthesize(&request(false), &m, &clean, &AnalysisConfig::default(), 4).unwrap();
    assert_eq!(a, b);
    assert!(a.waveform.is_none());
    assert_eq!(a.mel.frames(), a.durations.iter().sum::<usize>());
    let tokens = m.token_ids(&request(false).phonemes).unwrap();
    let free = m
        .forward(
            &ModelInput {
                tokens,
                speaker: 1,
                env: clean.clone(),
                noise_mel: Some(Mat::from_elem((a.mel.frames(), 80), LOG_FLOOR.ln())),
            },
            ForwardMode::Inference { durations: None, pitch: None },
        )
        .unwrap();
    // Silence handled internally equals an explicit zero-waveform mel.
    assert_eq!(&free.mel, a.mel.values());
    let expected: Vec<usize> = free.log_durations.iter().map(|&l| duration_from_log(l)).collect();
    assert_eq!(a.durations, expected);
    let r = synthesize(&request(true), &m, &clean, &AnalysisConfig::default(), 4).unwrap();
    assert_eq!(r.waveform.unwrap().len(), (r.mel.frames() - 1) * 256);
}

#[test]
fn overrides_are_honoured_and_checked() {
    let f = corpus();
    let m = model_for(&f, 5);
    let env = EnvEmbedding::zeros(m.env_dim());
    let mut req = request(false);
    req.durations = Some(vec![2, 3, 1, 4]);
    let a = synthesize(&req, &m, &env, &AnalysisConfig::default(), 4).unwrap();
    assert_eq!(a.mel.frames(), 10);
    req.pitch_hz = Some(vec![150.0; 10]);
    let b = synthesize(&req, &m, &env, &AnalysisConfig::default(), 4).unwrap();
    assert_ne!(a.mel, b.mel);
    req.pitch_hz = Some(vec![150.0; 9]);
    assert!(matches!(
        synthesize(&req, &m, &env, &AnalysisConfig::default(), 4),
        Err(Error::FrameMismatch { expected: 10, actual: 9 })
    ));
    req.durations = None;
    assert!(matches!(
        synthesize(&req, &m, &env, &AnalysisConfig::default(), 4),
        Err(Error::InvalidInput(_))
    ));
    let mut bad = request(false);
    bad.phonemes.push("zz".into());
    assert!(matches!(
        synthesize(&bad, &m, &env, &AnalysisConfig::default(), 4),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn reference_embedding_has_full_width_and_is_stable() {
    let vocab = vec!["a".to_string()];
    let m = AcousticModel::init_seeded(ModelConfig::default(), vocab, 1, VarianceStats::identity(256), 1).unwrap();
    let sep = Separator::init_seeded(
        crate::separation::SeparatorConfig {
            n_filters: 16,
            bottleneck: 8,
            hidden: 8,
            blocks: 2,
            repeats: 1,
            mode: crate::separation::SeparatorMode::Denoise,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let analyzer = MelAnalyzer::new(AnalysisConfig::default()).unwrap();
    let w = Waveform::new(
        (0..8000).map(|n| 0.3 * (n as f64 * 0.05).sin() + 0.01 * (n as f64 * 1.3).cos()).collect(),
        22050,
    )
    .unwrap();
    let a = embed_reference(&m, &sep, &analyzer, &w).unwrap();
    assert_eq!(a.values.len(), 256);
    assert_eq!(a, embed_reference(&m, &sep, &analyzer, &w).unwrap());
}

#[test]
fn artifact_round_trip_and_compatibility() {
    let f = corpus();
    let m = model_for(&f, 6);
    let (e, n) = average_embedding_of_features(&m, &f, &all_conditions()).unwrap();
    let a = CleanEmbeddingArtifact::new(e, n, vec![C::Clean], "abc123".into()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("clean.json");
    a.save(&p).unwrap();
    assert_eq!(CleanEmbeddingArtifact::load(&p).unwrap(), a);
    assert_eq!(a.check_compatible(&m, Some("abc123")).unwrap(), None);
    assert!(a.check_compatible(&m, Some("zzz")).unwrap().is_some());
    let narrow = CleanEmbeddingArtifact::new(EnvEmbedding::zeros(3), 1, vec![], "x".into()).unwrap();
    assert!(matches!(narrow.check_compatible(&m, None), Err(Error::Incompatible(_))));

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    v["version"] = 99.into();
    std::fs::write(&p, v.to_string()).unwrap();
    assert!(matches!(CleanEmbeddingArtifact::load(&p), Err(Error::ArtifactVersion { .. })));
}

#[test]
fn mel_files_round_trip_through_f32() {
    let cfg = AnalysisConfig::default();
    let m = Mat::from_shape_fn((7, 80), |(i, j)| (i as f64 * 0.37 - j as f64 * 0.11).sin() - 4.0);
    let mel = MelSpectrogram::new(m, cfg.frame_size, cfg.hop, cfg.sample_rate).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("out/utt.mel");
    write_mel(&p, &mel, serde_json::json!({"id": "utt"})).unwrap();
    let (back, side) = read_mel(&p).unwrap();
    assert_eq!(side.shape, [7, 80]);
    assert_eq!(side.hop, 256);
    for (a, b) in mel.values().iter().zip(back.values().iter()) {
        assert_eq!(*a as f32, *b as f32);
    }
    let bytes = std::fs::read(&p).unwrap();
    write_mel(&p, &back, serde_json::json!({"id": "utt"})).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), bytes);
    std::fs::write(&p, &bytes[..10]).unwrap();
    assert!(read_mel(&p).is_err());
}
