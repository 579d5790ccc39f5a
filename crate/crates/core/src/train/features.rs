use std::collections::BTreeSet;

use rayon::prelude::*;

use crate::degrade::{DegradationCondition, Manifest, RowError, UtteranceRecord};
use crate::dsp::{estimate_f0, AnalysisConfig, MelAnalyzer, Waveform};
use crate::error::{Error, Result};
use crate::model::{VarianceStats, VarianceTargets};
use crate::nn::Mat;
use crate::separation::Separator;

/// The two frozen pretrained separators.
#[derive(Clone, Debug, PartialEq)]
pub struct Separators {
    pub extractor: Separator,
    pub denoiser: Separator,
}

/// Everything the acoustic model needs from one utterance. All frame-level
/// arrays have exactly `sum(durations)` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceFeatures {
    pub id: String,
    pub speaker: usize,
    pub condition: DegradationCondition,
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    /// Log-mel of the degraded waveform (the reconstruction target).
    pub target_mel: Mat,
    /// Log-mel of the extracted noise, or of silence.
    pub noise_mel: Mat,
    pub denoised_mel: Mat,
    /// F0 of the denoised waveform in Hz, 0 when unvoiced.
    pub f0_hz: Vec<f64>,
    /// Per-frame L2 norm of `target_mel` rows.
    pub energy: Vec<f64>,
}

impl UtteranceFeatures {
    pub fn frames(&self) -> usize {
        self.target_mel.nrows()
    }

    pub fn voiced(&self) -> Vec<bool> {
        self.f0_hz.iter().map(|f| *f > 0.0).collect()
    }

    pub fn targets(&self, stats: &VarianceStats) -> VarianceTargets {
        VarianceTargets {
            durations: self.durations.clone(),
            pitch: self.f0_hz.iter().map(|&f| stats.normalize_f0(f)).collect(),
            energy: self.energy.iter().map(|&e| stats.normalize_energy(e)).collect(),
        }
    }
}

/// Fits pitch/energy statistics on a feature set.
pub fn fit_variance_stats(features: &[UtteranceFeatures], n_bins: usize) -> Result<VarianceStats> {
    let f0: Vec<f64> = features.iter().flat_map(|f| f.f0_hz.iter().copied()).filter(|f| *f > 0.0).collect();
    let energy: Vec<f64> = features.iter().flat_map(|f| f.energy.iter().copied()).collect();
    VarianceStats::fit(&f0, &energy, n_bins)
}

/// Crops or edge-pads rows to exactly `t`.
pub fn fit_frames(m: &Mat, t: usize) -> Mat {
    let last = m.nrows().saturating_sub(1);
    Mat::from_shape_fn((t, m.ncols()), |(i, j)| m[[i.min(last), j]])
}

fn fit_vec(v: &[f64], t: usize) -> Vec<f64> {
    (0..t).map(|i| v[i.min(v.len() - 1)]).collect()
}

pub fn frame_energy(mel: &Mat) -> Vec<f64> {
    mel.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

/// Feature extraction for one record. Conditions in `silence_conditions`
/// get the silence mel as noise input; all others get the mel of the
/// extractor's estimate. The ground-truth noise is never used.
pub fn prepare_features(
    manifest: &Manifest,
    rec: &UtteranceRecord,
    separators: &Separators,
    analyzer: &MelAnalyzer,
    silence_conditions: &BTreeSet<DegradationCondition>,
) -> Result<UtteranceFeatures> {
    rec.validate()?;
    let cfg = analyzer.config();
    let degraded = manifest.load_degraded(rec, cfg.sample_rate)?;
    rec.check_length(degraded.len(), cfg.hop)?;
    let t = rec.total_frames();
    let target_mel = fit_frames(analyzer.analyze(&degraded)?.values(), t);
    let noise_mel = if silence_conditions.contains(&rec.condition) {
        analyzer.silence(t).into_values()
    } else {
        let noise = separators.extractor.forward(&degraded)?;
        fit_frames(analyzer.analyze(&noise)?.values(), t)
    };
    let denoised: Waveform = separators.denoiser.forward(&degraded)?;
    let denoised_mel = fit_frames(analyzer.analyze(&denoised)?.values(), t);
    let f0 = estimate_f0(&denoised);
    let f0_hz = fit_vec(f0.f0(), t);
    let energy = frame_energy(&target_mel);
    Ok(UtteranceFeatures {
        id: rec.id.clone(),
        speaker: rec.speaker_id,
        condition: rec.condition,
        phonemes: rec.phonemes.clone(),
        durations: rec.durations.clone(),
        target_mel,
        noise_mel,
        denoised_mel,
        f0_hz,
        energy,
    })
}

/// Parallel feature extraction; failures are collected per record.
pub fn prepare_batch_features(
    manifest: &Manifest,
    records: &[UtteranceRecord],
    separators: &Separators,
    analysis: &AnalysisConfig,
    silence_conditions: &BTreeSet<DegradationCondition>,
) -> Result<(Vec<UtteranceFeatures>, Vec<RowError>)> {
    let analyzer = MelAnalyzer::new(analysis.clone())?;
    let results: Vec<std::result::Result<UtteranceFeatures, RowError>> = records
        .par_iter()
        .map(|rec| {
            prepare_features(manifest, rec, separators, &analyzer, silence_conditions)
                .map_err(|error| RowError { id: rec.id.clone(), error })
        })
        .collect();
    let mut ok = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(f) => ok.push(f),
            Err(e) => errors.push(e),
        }
    }
    Ok((ok, errors))
}

/// Like [`prepare_batch_features`] but fails on the first bad record.
pub fn prepare_all_features(
    manifest: &Manifest,
    separators: &Separators,
    analysis: &AnalysisConfig,
    silence_conditions: &BTreeSet<DegradationCondition>,
) -> Result<Vec<UtteranceFeatures>> {
    let (ok, errors) = prepare_batch_features(manifest, &manifest.records, separators, analysis, silence_conditions)?;
    if let Some(e) = errors.into_iter().next() {
        return Err(Error::InvalidInput(format!("record {}: {}", e.id, e.error)));
    }
    Ok(ok)
}
