use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use envtts::checkpoint::Checkpoint;
use envtts::config::PipelineConfig;
use envtts::degrade::{
    build_corpus, build_mixtures, generate_toy_corpus, hash_bytes, parse_conditions, write_toy_corpus,
    DegradationCondition, Manifest, RowError,
};
use envtts::dsp::{read_wav, write_wav, WavFormat};
use envtts::infer::{
    compute_average_clean_embedding, synthesize, write_mel, CleanEmbeddingArtifact, SynthesisRequest,
};
use envtts::metrics::evaluate_corpus;
use envtts::model::{AcousticModel, MODEL_KIND, MODEL_VERSION};
use envtts::seed::keyed_rng;
use envtts::separation::{pretrain_separator, Pretrainer, SeparationExample, Separator, SeparatorMode};
use envtts::train::{
    init_model, prepare_batch_features, select_best, train_loop, CheckpointRecord, Separators, Trainer,
};

use crate::fail::CliError;
use crate::lock::DirLock;

type CliResult<T> = Result<T, CliError>;

/// Loaded configuration plus where it came from.
pub struct Context {
    pub config: PipelineConfig,
    pub config_path: Option<PathBuf>,
}

impl Context {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn echo(&self) -> serde_json::Value {
        json!({
            "path": self.config_path,
            "values": self.config,
        })
    }
}

/// Appends one JSON object per line, flushed after every write.
struct JsonlLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlLog {
    fn open(path: PathBuf, append: bool) -> CliResult<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        Ok(JsonlLog {
            out: BufWriter::new(f),
            path,
        })
    }

    fn write<T: Serialize>(&mut self, entry: &T) {
        let ok = serde_json::to_writer(&mut self.out, entry).is_ok()
            && self.out.write_all(b"\n").is_ok()
            && self.out.flush().is_ok();
        if !ok {
            eprintln!("warning: could not append to {}", self.path.display());
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn file_digest(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    Ok(hash_bytes(&bytes))
}

/// Loads an upstream artifact; anything wrong with it is exit code 3.
fn load_artifact<T>(path: &Path, what: &str, load: impl FnOnce(&Path) -> envtts::Result<T>) -> CliResult<T> {
    if !path.is_file() {
        return Err(CliError::artifact(format!("missing {what} artifact: {}", path.display())));
    }
    load(path).map_err(|e| CliError::artifact(format!("cannot use {what} artifact {}: {e}", path.display())))
}

fn load_separator(path: &Path, mode: SeparatorMode) -> CliResult<Separator> {
    let sep = load_artifact(path, &mode.to_string(), |p| Separator::load(p))?;
    if sep.config.mode != mode {
        return Err(CliError::artifact(format!(
            "{} is a {} separator, expected {mode}",
            path.display(),
            sep.config.mode
        )));
    }
    Ok(sep)
}

/// The model and the corpus hash it was trained on, when recorded.
fn load_model(path: &Path) -> CliResult<(AcousticModel, Option<String>)> {
    load_artifact(path, "model", |p| {
        let ck = Checkpoint::load_expect(p, MODEL_KIND, MODEL_VERSION)?;
        let hash = ck
            .meta
            .get("extra")
            .and_then(|e| e.get("corpus_hash"))
            .and_then(|h| h.as_str())
            .map(String::from);
        Ok((AcousticModel::from_checkpoint(&ck)?, hash))
    })
}

fn load_embedding(path: &Path, model: &AcousticModel, model_hash: Option<&str>) -> CliResult<CleanEmbeddingArtifact> {
    let art = load_artifact(path, "clean-embedding", |p| CleanEmbeddingArtifact::load(p))?;
    if let Some(w) = art.check_compatible(model, model_hash)? {
        eprintln!("warning: {w}");
    }
    Ok(art)
}

fn load_manifest(path: &Path) -> CliResult<Manifest> {
    Manifest::load(path).map_err(|e| CliError::runtime(format!("cannot read manifest: {e}")))
}

fn condition_summary(m: &Manifest) -> String {
    let counts = m.condition_counts();
    DegradationCondition::ALL
        .iter()
        .map(|c| format!("{c} {}", counts.get(c).copied().unwrap_or(0)))
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Serialize)]
struct ManifestSummary {
    file: String,
    records: usize,
    sha256: String,
    conditions: std::collections::BTreeMap<DegradationCondition, usize>,
}

fn save_manifest(dir: &Path, name: &str, m: &Manifest) -> CliResult<ManifestSummary> {
    let sha256 = m.save(dir.join(name))?;
    println!("{name}: {} records ({}), sha256 {}", m.records.len(), condition_summary(m), &sha256[..16]);
    Ok(ManifestSummary {
        file: name.to_string(),
        records: m.records.len(),
        sha256,
        conditions: m.condition_counts(),
    })
}

/// Writes failed rows to `<dir>/<stage>_errors.log`; the command then exits 1.
fn record_row_errors(dir: &Path, stage: &str, errors: &[RowError]) -> CliResult<usize> {
    if errors.is_empty() {
        return Ok(0);
    }
    let path = dir.join(format!("{stage}_errors.log"));
    let text: String = errors.iter().map(|e| format!("{}\t{}\n", e.id, e.error)).collect();
    std::fs::write(&path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    for e in errors {
        eprintln!("{stage}: {}: {}", e.id, e.error);
    }
    Ok(errors.len())
}

/// Deterministic hold-out: a keyed shuffle, then the first
/// `round(n · fraction)` items (at least one when `fraction > 0` and `n ≥ 2`).
pub fn split_holdout<T>(items: Vec<T>, fraction: f64, seed: u64, key: &str) -> (Vec<T>, Vec<T>) {
    let n = items.len();
    let mut k = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    } else {
        k = 0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut keyed_rng(seed, key));
    let held: BTreeSet<usize> = order[..k].iter().copied().collect();
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, x) in items.into_iter().enumerate() {
        if held.contains(&i) {
            val.push(x);
        } else {
            train.push(x);
        }
    }
    (train, val)
}

pub fn toy_corpus(ctx: &Context, out: &Path) -> CliResult<()> {
    let _lock = DirLock::acquire(out)?;
    let cfg = &ctx.config;
    let (sr, seed) = (cfg.dsp.sample_rate, ctx.seed());
    let corpus = generate_toy_corpus(&cfg.toy, seed, sr, cfg.dsp.hop)?;
    let clean = write_toy_corpus(&corpus, out, "clean.jsonl")?;
    let degraded = build_corpus(&clean, &corpus.noises, &cfg.degrade, seed, sr, out)?;
    let mut failed = record_row_errors(out, "degrade", &degraded.errors)?;

    let (train_clean, test_clean) = clean.split_per_speaker(cfg.toy.test_utterances_per_speaker);
    let test_ids: BTreeSet<&str> = test_clean.records.iter().map(|r| r.id.as_str()).collect();
    let train = degraded.manifest.filter(|r| !test_ids.contains(r.id.as_str()));
    let test = degraded.manifest.filter(|r| test_ids.contains(r.id.as_str()));
    let mixtures = build_mixtures(&train_clean, &corpus.noises, cfg.degrade.mixture_lufs, seed, sr, out)?;
    failed += record_row_errors(out, "mixtures", &mixtures.errors)?;

    let summaries = vec![
        save_manifest(out, "clean.jsonl", &clean)?,
        save_manifest(out, "degraded.jsonl", &degraded.manifest)?,
        save_manifest(out, "train.jsonl", &train)?,
        save_manifest(out, "test.jsonl", &test)?,
        save_manifest(out, "mixtures.jsonl", &mixtures.manifest)?,
    ];
    write_json(
        &out.join("summary.json"),
        &json!({ "seed": seed, "manifests": summaries, "failed_rows": failed, "config": ctx.echo() }),
    )?;
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} rows failed; see {}", out.display())));
    }
    Ok(())
}

fn read_noise_dir(dir: &Path, sample_rate: u32) -> CliResult<Vec<envtts::dsp::Waveform>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::runtime(format!("no .wav noise clips in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| read_wav(p, sample_rate).map_err(CliError::from))
        .collect()
}

pub fn degrade(ctx: &Context, manifest: &Path, noises: &Path, out: &Path) -> CliResult<()> {
    let _lock = DirLock::acquire(out)?;
    let cfg = &ctx.config;
    let (sr, seed) = (cfg.dsp.sample_rate, ctx.seed());
    let clean = load_manifest(manifest)?;
    let clips = read_noise_dir(noises, sr)?;
    let degraded = build_corpus(&clean, &clips, &cfg.degrade, seed, sr, out)?;
    let mixtures = build_mixtures(&clean, &clips, cfg.degrade.mixture_lufs, seed, sr, out)?;
    let failed = record_row_errors(out, "degrade", &degraded.errors)? + record_row_errors(out, "mixtures", &mixtures.errors)?;
    let summaries = vec![
        save_manifest(out, "degraded.jsonl", &degraded.manifest)?,
        save_manifest(out, "mixtures.jsonl", &mixtures.manifest)?,
    ];
    write_json(
        &out.join("summary.json"),
        &json!({
            "seed": seed,
            "input": manifest,
            "input_sha256": clean.corpus_hash()?,
            "manifests": summaries,
            "failed_rows": failed,
            "config": ctx.echo(),
        }),
    )?;
    if failed > 0 {
        return Err(CliError::runtime(format!("{failed} rows failed; see {}", out.display())));
    }
    Ok(())
}

pub fn pretrain(ctx: &Context, manifest: &Path, mode: SeparatorMode, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let _lock = DirLock::acquire(out)?;
    let cfg = &ctx.config;
    let seed = ctx.seed();
    let m = load_manifest(manifest)?;
    let corpus_hash = m.corpus_hash()?;
    let examples = SeparationExample::from_manifest(&m, cfg.dsp.sample_rate)?;
    let pcfg = cfg.separation.pretrain.clone();
    let (train, val) = split_holdout(examples, pcfg.val_fraction, seed, "pretrain/val");
    if train.is_empty() || val.is_empty() {
        return Err(CliError::runtime("pretraining needs at least two mixtures (train and validation)"));
    }
    let trainer = match resume {
        Some(p) => {
            let t = load_artifact(p, "separator", |p| Pretrainer::resume(p, pcfg.clone()))?;
            if t.mode() != mode {
                return Err(CliError::artifact(format!("{} holds a {} separator, not {mode}", p.display(), t.mode())));
            }
            eprintln!("resuming {mode} pretraining at step {}", t.step);
            t
        }
        None => {
            let sep = Separator::init(cfg.separation.for_mode(mode), &mut keyed_rng(seed, &format!("separator/{mode}")))?;
            Pretrainer::new(sep, pcfg, seed)?
        }
    };
    let extra = json!({ "corpus_hash": corpus_hash, "mode": mode.to_string(), "config": ctx.echo() });
    let ckpt = out.join("separator.ckpt");
    let mut log = JsonlLog::open(out.join("metrics.jsonl"), resume.is_some())?;
    let outcome = pretrain_separator(
        trainer,
        &train,
        &val,
        |e| {
            log.write(e);
            if let Some(v) = e.val_si_snr {
                eprintln!("step {:>6}  loss {:>8.3}  val SI-SNR {v:>7.2} dB  {:>6.1}s", e.step, e.loss, e.wall_secs);
            }
        },
        |t| t.save(&ckpt, extra.clone()),
    )
    .map_err(|e| match e {
        envtts::Error::TrainingDiverged { .. } => {
            CliError::runtime(format!("{e}; the last good checkpoint is kept at {}", ckpt.display()))
        }
        other => other.into(),
    })?;
    write_json(
        &out.join("pretrain_summary.json"),
        &json!({
            "mode": mode.to_string(),
            "best_step": outcome.best_step,
            "best_val_si_snr": outcome.best_val_si_snr,
            "baseline_si_snr": outcome.baseline_si_snr,
            "improvement_db": outcome.best_val_si_snr - outcome.baseline_si_snr,
            "final_step": outcome.final_step,
            "corpus_hash": m.corpus_hash()?,
            "checkpoint": ckpt,
        }),
    )?;
    println!(
        "best validation SI-SNR {:.2} dB at step {} (mixture baseline {:.2} dB)",
        outcome.best_val_si_snr, outcome.best_step, outcome.baseline_si_snr
    );
    Ok(())
}

/// `step_<n>/model.ckpt` directories under `dir`, by step.
fn list_step_checkpoints(dir: &Path) -> Vec<CheckpointRecord> {
    let mut out: Vec<CheckpointRecord> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step_")?.parse().ok()?;
            let path = e.path().join("model.ckpt");
            path.is_file().then_some(CheckpointRecord { step, path })
        })
        .collect();
    out.sort_by_key(|c| c.step);
    out
}

pub fn train(
    ctx: &Context,
    manifest: &Path,
    extractor: &Path,
    denoiser: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> CliResult<()> {
    let _lock = DirLock::acquire(out)?;
    let cfg = &ctx.config;
    let seed = ctx.seed();
    let separators = Separators {
        extractor: load_separator(extractor, SeparatorMode::ExtractNoise)?,
        denoiser: load_separator(denoiser, SeparatorMode::Denoise)?,
    };
    let m = load_manifest(manifest)?;
    let corpus_hash = m.corpus_hash()?;
    eprintln!("extracting features for {} utterances", m.records.len());
    let (features, errors) = prepare_batch_features(&m, &m.records, &separators, &cfg.dsp, &cfg.train.silence_conditions)?;
    let failed = record_row_errors(out, "features", &errors)?;
    if features.is_empty() {
        return Err(CliError::runtime("no utterance survived feature extraction"));
    }
    let (train_set, val_set) = split_holdout(features, cfg.train.val_fraction, seed, "train/val");
    let mut trainer = match resume {
        Some(p) => {
            let t = load_artifact(p, "model", |p| Trainer::resume(p, cfg.train.clone(), train_set.clone()))?;
            eprintln!("resuming training at step {}", t.step);
            t
        }
        None => {
            let model = init_model(cfg.model.clone(), &train_set, m.phoneme_inventory(), m.n_speakers(), seed)?;
            Trainer::new(model, cfg.train.clone(), train_set, seed)?
        }
    };
    trainer.provenance = json!({
        "corpus_hash": corpus_hash,
        "manifest": manifest,
        "extractor": { "path": extractor, "sha256": file_digest(extractor)? },
        "denoiser": { "path": denoiser, "sha256": file_digest(denoiser)? },
        "config": ctx.echo(),
    });
    let mut log = JsonlLog::open(out.join("metrics.jsonl"), resume.is_some())?;
    let report_every = (cfg.train.steps / 20).max(1);
    train_loop(&mut trainer, Some(out), |e| {
        log.write(e);
        if e.step % report_every == 0 {
            eprintln!(
                "step {:>6}  total {:>8.4}  main {:>8.4}  average {:>8.4}  {:>6.1}s",
                e.step, e.loss.total, e.loss.l_main, e.loss.l_average, e.wall_secs
            );
        }
    })?;

    let checkpoints = list_step_checkpoints(out);
    let last = checkpoints.last().ok_or_else(|| CliError::runtime("training wrote no checkpoint"))?;
    let (best, losses) = if val_set.is_empty() {
        (checkpoints.len() - 1, vec![])
    } else {
        select_best(&checkpoints, &val_set)?
    };
    let chosen = &checkpoints[best];
    std::fs::copy(&chosen.path, out.join("model.ckpt")).map_err(|e| CliError::runtime(e.to_string()))?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "best_step": chosen.step,
            "final_step": last.step,
            "validation_mel_l1": checkpoints.iter().zip(&losses).map(|(c, l)| json!({"step": c.step, "mel_l1": l})).collect::<Vec<_>>(),
            "n_train": trainer.features.len(),
            "n_validation": val_set.len(),
            "failed_rows": failed,
            "corpus_hash": corpus_hash,
            "model": out.join("model.ckpt"),
        }),
    )?;
    println!("selected step {} of {}; model written to {}", chosen.step, last.step, out.join("model.ckpt").display());
    Ok(())
}

pub fn embed_clean(
    ctx: &Context,
    model_path: &Path,
    denoiser: &Path,
    manifest: &Path,
    out: &Path,
    conditions: Option<&str>,
) -> CliResult<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let _lock = DirLock::acquire(parent)?;
    let conds: BTreeSet<DegradationCondition> = match conditions {
        Some(s) => parse_conditions(s)
            .map_err(|e| CliError::config(format!("--conditions: {e}")))?
            .into_iter()
            .collect(),
        None => ctx.config.train.clean_env_conditions.clone(),
    };
    let (model, model_hash) = load_model(model_path)?;
    let den = load_separator(denoiser, SeparatorMode::Denoise)?;
    let m = load_manifest(manifest)?;
    let mut art = compute_average_clean_embedding(&model, &den, &m, &ctx.config.dsp, &conds)?;
    art.config = json!({ "config": ctx.echo(), "model": model_path, "model_corpus_hash": model_hash, "manifest": manifest });
    if let Some(h) = &model_hash {
        if *h != art.corpus_hash {
            eprintln!("warning: the model was trained on a different corpus than {}", manifest.display());
        }
    }
    art.save(out)?;
    let names: Vec<String> = conds.iter().map(|c| c.to_string()).collect();
    println!(
        "averaged {} utterances ({}); embedding norm {:.4}; written to {}",
        art.n_utterances,
        names.join(", "),
        art.embedding.norm(),
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct RequestLine {
    id: String,
    #[serde(flatten)]
    request: SynthesisRequest,
}

#[allow(clippy::too_many_arguments)]
pub fn synthesize_cmd(
    ctx: &Context,
    model_path: &Path,
    embedding: &Path,
    out: &Path,
    phonemes: Option<&str>,
    speaker: usize,
    id: &str,
    requests: Option<&Path>,
    wav: bool,
) -> CliResult<()> {
    let (model, model_hash) = load_model(model_path)?;
    let art = load_embedding(embedding, &model, model_hash.as_deref())?;
    let jobs: Vec<(String, SynthesisRequest)> = match (phonemes, requests) {
        (Some(p), _) => vec![(
            id.to_string(),
            SynthesisRequest {
                phonemes: p.split_whitespace().map(String::from).collect(),
                speaker_id: speaker,
                durations: None,
                pitch_hz: None,
                render_waveform: wav,
            },
        )],
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            text.lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
                .map(|(i, l)| {
                    let r: RequestLine = serde_json::from_str(l)
                        .map_err(|e| CliError::runtime(format!("{}:{}: {e}", path.display(), i + 1)))?;
                    Ok((r.id, r.request))
                })
                .collect::<CliResult<_>>()?
        }
        (None, None) => return Err(CliError::config("give --phonemes or --requests")),
    };
    let _lock = DirLock::acquire(out)?;
    for (id, mut req) in jobs {
        req.render_waveform |= wav;
        let s = synthesize(&req, &model, &art.embedding, &ctx.config.dsp, ctx.config.eval.griffin_lim_iters)?;
        let extra = json!({
            "id": id,
            "speaker_id": req.speaker_id,
            "phonemes": req.phonemes,
            "durations": s.durations,
            "model": model_path,
            "embedding": embedding,
            "corpus_hash": art.corpus_hash,
            "config": ctx.echo(),
        });
        write_mel(out.join(format!("{id}.mel")), &s.mel, extra)?;
        if let Some(w) = &s.waveform {
            write_wav(out.join(format!("{id}.wav")), w, WavFormat::Float32)?;
        }
        println!("{id}: {} frames", s.mel.frames());
    }
    Ok(())
}

pub fn evaluate(ctx: &Context, model_path: &Path, embedding: &Path, manifest: &Path, out: &Path, label: &str) -> CliResult<()> {
    let (model, model_hash) = load_model(model_path)?;
    let art = load_embedding(embedding, &model, model_hash.as_deref())?;
    let m = load_manifest(manifest)?;
    let _lock = DirLock::acquire(out)?;
    let echo = json!({
        "config": ctx.echo(),
        "model": model_path,
        "model_corpus_hash": model_hash,
        "embedding": embedding,
        "embedding_corpus_hash": art.corpus_hash,
        "manifest": manifest,
        "corpus_hash": m.corpus_hash()?,
    });
    let report = evaluate_corpus(&model, &art.embedding, &m, &ctx.config.dsp, &ctx.config.eval, echo)?;
    for (id, msg) in &report.failures {
        eprintln!("evaluate: {id}: {msg}");
    }
    write_json(&out.join("eval_report.json"), &report)?;
    let table = report.to_table(label);
    std::fs::write(out.join("eval_report.txt"), &table).map_err(|e| CliError::runtime(e.to_string()))?;
    print!("{table}");
    Ok(())
}
