use rand::Rng;

use super::*;
use crate::degrade::{generate_toy_corpus, write_toy_corpus, DegradationCondition, ToyCorpusSpec};
use crate::dsp::{estimate_f0, AnalysisConfig, MelAnalyzer};
use crate::seed::seeded_rng;

fn random(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = seeded_rng(seed);
    Mat::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

#[test]
fn constant_frames_have_no_cepstrum() {
    let c = cepstra_of(&Mat::from_elem((3, 80), -4.2), 13).unwrap();
    assert_eq!(c.dim(), (3, 13));
    assert!(c.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn cepstra_are_linear_and_energy_preserving() {
    let a = random(4, 80, 1);
    let b = random(4, 80, 2);
    let ca = cepstra_of(&a, 13).unwrap();
    let cb = cepstra_of(&b, 13).unwrap();
    let cs = cepstra_of(&(&a + &b), 13).unwrap();
    for ((x, y), s) in ca.iter().zip(cb.iter()).zip(cs.iter()) {
        assert!((x + y - s).abs() < 1e-12);
    }
    // Parseval with the full basis: c0 is √N times the frame mean.
    let full = cepstra_of(&a, 80).unwrap();
    for t in 0..4 {
        let row = a.row(t);
        let c0 = row.sum() / 80f64.sqrt();
        let energy: f64 = full.row(t).iter().map(|c| c * c).sum::<f64>() + c0 * c0;
        assert!((energy - row.dot(&row)).abs() < 1e-9);
    }
    assert!(cepstra_of(&a, 0).is_err());
    assert!(cepstra_of(&a, 81).is_err());
}

#[test]
fn dtw_identity_and_repeat_absorption() {
    let a = random(6, 3, 3);
    let d = dtw_align(&a, &a).unwrap();
    assert_eq!(d.cost, 0.0);
    assert_eq!(d.path, (0..6).map(|i| (i, i)).collect::<Vec<_>>());

    let mut rows: Vec<_> = a.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.insert(3, rows[2].clone());
    let b = Mat::from_shape_vec((7, 3), rows.concat()).unwrap();
    let d = dtw_align(&a, &b).unwrap();
    assert_eq!(d.cost, 0.0);
    assert_eq!(d.path.len(), 7);
    assert!(dtw_align(&Mat::zeros((0, 3)), &a).is_err());
    assert!(dtw_align(&random(2, 2, 1), &a).is_err());
}

/// Minimum over every monotone, boundary-anchored path.
fn brute_force(a: &Mat, b: &Mat) -> f64 {
    fn go(a: &Mat, b: &Mat, i: usize, j: usize) -> f64 {
        let d = frame_distance(a, i, b, j);
        if i + 1 == a.nrows() && j + 1 == b.nrows() {
            return d;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.nrows() && j + 1 < b.nrows() {
            best = best.min(go(a, b, i + 1, j + 1));
        }
        if i + 1 < a.nrows() {
            best = best.min(go(a, b, i + 1, j));
        }
        if j + 1 < b.nrows() {
            best = best.min(go(a, b, i, j + 1));
        }
        d + best
    }
    go(a, b, 0, 0)
}

#[test]
fn dtw_matches_exhaustive_search_on_5_by_7() {
    for seed in 0..20 {
        let a = random(5, 2, seed);
        let b = random(7, 2, seed + 100);
        let d = dtw_align(&a, &b).unwrap();
        assert!((d.cost - brute_force(&a, &b)).abs() < 1e-9);
        let along: f64 = d.path.iter().map(|&(i, j)| frame_distance(&a, i, &b, j)).sum();
        assert!((along - d.cost).abs() < 1e-9);
    }
}

#[test]
fn mcd_reference_values() {
    let a = random(5, 13, 4);
    assert_eq!(mcd(&a, &a).unwrap().mcd, 0.0);
    let x = Mat::zeros((1, 13));
    let mut y = Mat::zeros((1, 13));
    y[[0, 4]] = 1.0;
    let hand = 10.0 / 10f64.ln() * 2f64.sqrt();
    assert!((mcd(&x, &y).unwrap().mcd - hand).abs() < 1e-12);
    assert!((hand - 6.1419).abs() < 1e-3);
    let b = random(8, 13, 5);
    assert!((mcd(&a, &b).unwrap().mcd - mcd(&b, &a).unwrap().mcd).abs() < 1e-9);
    assert!(mcd(&a, &random(5, 12, 1)).is_err());
}

#[test]
fn log_f0_reference_values() {
    let f0 = vec![0.0, 110.0, 120.0, 0.0, 180.0, 200.0];
    let r = F0Track::from_hz(f0.clone(), 256).unwrap();
    let path = identity_path(6);
    assert_eq!(log_f0_rmse(&r, &r, &path), LogF0Rmse::Value { rmse: 0.0, frames: 4 });
    let up = r.scaled(2.0);
    let v = log_f0_rmse(&r, &up, &path).value().unwrap();
    assert!((v - 2f64.ln()).abs() < 1e-6);
    let silent = F0Track::from_hz(vec![0.0; 6], 256).unwrap();
    assert_eq!(log_f0_rmse(&silent, &r, &path), LogF0Rmse::Undefined);
    let other = F0Track::from_hz(vec![100.0, 0.0, 130.0, 140.0, 170.0, 0.0], 256).unwrap();
    let base = log_f0_rmse(&r, &other, &path).value().unwrap();
    let both = log_f0_rmse(&r.scaled(1.5), &other.scaled(1.5), &path).value().unwrap();
    assert!((base - both).abs() < 1e-9);
}

#[test]
fn self_comparison_report_is_zero_per_condition() {
    let spec = ToyCorpusSpec {
        n_speakers: 2,
        utterances_per_speaker: 2,
        phonemes_per_utterance: [3, 4],
        ..ToyCorpusSpec::default()
    };
    let corpus = generate_toy_corpus(&spec, 3, 22050, 256).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut manifest = write_toy_corpus(&corpus, dir.path(), "clean.jsonl").unwrap();
    manifest.records[1].condition = DegradationCondition::Reverb;
    manifest.records[3].clean_path = "missing.wav".into();
    let analysis = AnalysisConfig::default();
    let analyzer = MelAnalyzer::new(analysis.clone()).unwrap();
    let report = evaluate_with(&manifest, &analysis, &EvalConfig::default(), serde_json::json!({}), |rec| {
        let w = manifest.load_clean(rec, 22050)?;
        Ok(Rendered {
            mel: analyzer.analyze(&w)?,
            f0: estimate_f0(&w),
        })
    })
    .unwrap();
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert_eq!(r.mcd_mean, 0.0);
        assert_eq!(r.logf0_rmse_mean, Some(0.0));
    }
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.row(DegradationCondition::Clean).unwrap().n_failed, 1);
    let table = report.to_table("self");
    assert!(table.contains("Clean") && table.contains("Reverb") && table.contains("Log F0 RMSE"));
    assert!(table.contains("partial"));
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[..4].windows(2).all(|w| w[0].len() == w[1].len()));
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
}
