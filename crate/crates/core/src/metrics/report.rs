use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_f0_rmse, mcd, mel_cepstra, LogF0Rmse, DEFAULT_CEPSTRAL_ORDER};
use crate::degrade::{DegradationCondition, Manifest, UtteranceRecord};
use crate::dsp::{estimate_f0, AnalysisConfig, F0Track, MelAnalyzer, MelSpectrogram};
use crate::error::{Error, Result};
use crate::infer::{synthesize, SynthesisRequest, DEFAULT_GRIFFIN_LIM_ITERS};
use crate::model::{AcousticModel, EnvEmbedding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cepstral_order: usize,
    pub griffin_lim_iters: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cepstral_order: DEFAULT_CEPSTRAL_ORDER,
            griffin_lim_iters: DEFAULT_GRIFFIN_LIM_ITERS,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, n_mels: usize) -> Result<()> {
        if self.cepstral_order == 0 || self.cepstral_order > n_mels {
            return Err(Error::Config(format!("eval.cepstral_order must be in 1..={n_mels}")));
        }
        if self.griffin_lim_iters == 0 {
            return Err(Error::Config("eval.griffin_lim_iters must be positive".into()));
        }
        Ok(())
    }
}

/// What the scorer compares against the clean reference.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub mel: MelSpectrogram,
    pub f0: F0Track,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub condition: DegradationCondition,
    pub mcd: f64,
    pub log_f0_rmse: LogF0Rmse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub condition: DegradationCondition,
    pub n_utterances: usize,
    pub mcd_mean: f64,
    /// Mean over utterances with a defined value; `None` when there are none.
    pub logf0_rmse_mean: Option<f64>,
    pub logf0_undefined: usize,
    /// Records of this condition that failed; the row is partial when > 0.
    pub n_failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub utterances: Vec<UtteranceScore>,
    /// `(id, message)` for records that could not be scored.
    pub failures: Vec<(String, String)>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn row(&self, c: DegradationCondition) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.condition == c)
    }

    /// Aligned text table: conditions across, MCD then log-F0 RMSE under
    /// each, one line of scores and one of counts.
    pub fn to_table(&self, label: &str) -> String {
        const W: usize = 11;
        let first = label.len().max(6);
        let mut head1 = format!("{:first$}", "");
        let mut head2 = format!("{:first$}", "");
        let mut scores = format!("{label:first$}");
        let mut counts = format!("{:first$}", "n");
        for r in &self.rows {
            let name = r.condition.to_string();
            let _ = write!(head1, " | {name:<w$}", w = 2 * W + 1);
            let _ = write!(head2, " | {:>W$} {:>W$}", "MCD", "Log F0 RMSE");
            let partial = if r.n_failed > 0 { "*" } else { "" };
            let f0 = r.logf0_rmse_mean.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let _ = write!(scores, " | {:>W$} {f0:>W$}", format!("{:.4}{partial}", r.mcd_mean));
            let _ = write!(counts, " | {:>W$} {:>W$}", r.n_utterances, r.n_utterances - r.logf0_undefined);
        }
        let mut out = [head1, head2, scores, counts].join("\n");
        if self.rows.iter().any(|r| r.n_failed > 0) {
            out.push_str("\n* partial row: some records failed");
        }
        out.push('\n');
        out
    }
}

fn aggregate(
    scores: Vec<UtteranceScore>,
    failures: Vec<(String, String, DegradationCondition)>,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let mut by: BTreeMap<DegradationCondition, Vec<&UtteranceScore>> = BTreeMap::new();
    for s in &scores {
        by.entry(s.condition).or_default().push(s);
    }
    let rows = by
        .iter()
        .map(|(&condition, v)| {
            let defined: Vec<f64> = v.iter().filter_map(|s| s.log_f0_rmse.value()).collect();
            EvalRow {
                condition,
                n_utterances: v.len(),
                mcd_mean: v.iter().map(|s| s.mcd).sum::<f64>() / v.len() as f64,
                logf0_rmse_mean: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
                logf0_undefined: v.len() - defined.len(),
                n_failed: failures.iter().filter(|f| f.2 == condition).count(),
            }
        })
        .collect::<Vec<_>>();
    if rows.is_empty() {
        return Err(Error::EmptySet("no record could be evaluated".into()));
    }
    Ok(EvalReport {
        rows,
        utterances: scores,
        failures: failures.into_iter().map(|(id, msg, _)| (id, msg)).collect(),
        config,
    })
}

/// Scores `render(record)` against each record's clean reference audio.
/// Per-record failures are collected, not fatal.
pub fn evaluate_with<F>(
    manifest: &Manifest,
    analysis: &AnalysisConfig,
    config: &EvalConfig,
    config_echo: serde_json::Value,
    render: F,
) -> Result<EvalReport>
where
    F: Fn(&UtteranceRecord) -> Result<Rendered> + Sync,
{
    config.validate(analysis.n_mels)?;
    let analyzer = MelAnalyzer::new(analysis.clone())?;
    let results: Vec<(UtteranceRecord, Result<UtteranceScore>)> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let score = (|| {
                let clean = manifest.load_clean(rec, analysis.sample_rate)?;
                let ref_mel = analyzer.analyze(&clean)?;
                let ref_f0 = estimate_f0(&clean);
                let out = render(rec)?;
                let m = mcd(
                    &mel_cepstra(&ref_mel, config.cepstral_order)?,
                    &mel_cepstra(&out.mel, config.cepstral_order)?,
                )?;
                Ok(UtteranceScore {
                    id: rec.id.clone(),
                    condition: rec.condition,
                    mcd: m.mcd,
                    log_f0_rmse: log_f0_rmse(&ref_f0, &out.f0, &m.alignment.path),
                })
            })();
            (rec.clone(), score)
        })
        .collect();
    let mut scores = Vec::new();
    let mut failures = Vec::new();
    for (rec, r) in results {
        match r {
            Ok(s) => scores.push(s),
            Err(e) => failures.push((rec.id, e.to_string(), rec.condition)),
        }
    }
    aggregate(scores, failures, config_echo)
}

/// Clean-condition synthesis of every record (predicted durations), scored
/// on the predicted mel and on the F0 of its Griffin-Lim rendering.
pub fn evaluate_corpus(
    model: &AcousticModel,
    clean: &EnvEmbedding,
    manifest: &Manifest,
    analysis: &AnalysisConfig,
    config: &EvalConfig,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    evaluate_with(manifest, analysis, config, config_echo, |rec| {
        let req = SynthesisRequest {
            phonemes: rec.phonemes.clone(),
            speaker_id: rec.speaker_id,
            durations: None,
            pitch_hz: None,
            render_waveform: true,
        };
        let out = synthesize(&req, model, clean, analysis, config.griffin_lim_iters)?;
        let wave = out.waveform.expect("rendered");
        Ok(Rendered {
            mel: out.mel,
            f0: estimate_f0(&wave),
        })
    })
}
