use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mix::{DegradationCondition, Degrader, DEFAULT_NOISE_LUFS};
use super::room::RoomSpec;
use crate::dsp::{read_wav, scale_to_lufs, write_wav, WavFormat, Waveform};
use crate::error::{Error, Result};
use crate::seed::keyed_rng;

/// One manifest line. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker_id: usize,
    pub phonemes: Vec<String>,
    pub durations: Vec<usize>,
    pub condition: DegradationCondition,
    pub clean_path: String,
    pub degraded_path: String,
    pub noise_lufs: Option<f64>,
    pub rir_seed: Option<u64>,
    /// Additive noise component of the degraded audio, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rir_gain: Option<f64>,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::invalid("record with empty id"));
        }
        if self.phonemes.len() != self.durations.len() {
            return Err(Error::invalid(format!(
                "{}: {} phonemes but {} durations",
                self.id,
                self.phonemes.len(),
                self.durations.len()
            )));
        }
        if self.phonemes.is_empty() {
            return Err(Error::invalid(format!("{}: no phonemes", self.id)));
        }
        if self.total_frames() == 0 {
            return Err(Error::invalid(format!("{}: all durations are zero", self.id)));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Checks that the durations cover an audio clip of `len` samples to
    /// within one hop.
    pub fn check_length(&self, len: usize, hop: usize) -> Result<()> {
        let covered = self.total_frames() * hop;
        if covered.abs_diff(len) > hop {
            return Err(Error::invalid(format!(
                "{}: durations cover {covered} samples but audio has {len}",
                self.id
            )));
        }
        Ok(())
    }
}

/// A JSONL manifest and the directory its relative paths resolve against.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<UtteranceRecord>, base_dir: impl Into<PathBuf>) -> Self {
        Manifest {
            records,
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rec.validate()?;
            records.push(rec);
        }
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { records, base_dir })
    }

    /// Serialized JSONL, one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes the manifest and returns its corpus hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(hash_bytes(text.as_bytes()))
    }

    /// SHA-256 over the manifest lines, hex encoded. Equal to the digest of
    /// the file written by [`Manifest::save`].
    pub fn corpus_hash(&self) -> Result<String> {
        Ok(hash_bytes(self.to_jsonl()?.as_bytes()))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn load_clean(&self, rec: &UtteranceRecord, sample_rate: u32) -> Result<Waveform> {
        read_wav(self.resolve(&rec.clean_path), sample_rate)
    }

    pub fn load_degraded(&self, rec: &UtteranceRecord, sample_rate: u32) -> Result<Waveform> {
        read_wav(self.resolve(&rec.degraded_path), sample_rate)
    }

    pub fn load_noise(&self, rec: &UtteranceRecord, sample_rate: u32) -> Result<Option<Waveform>> {
        rec.noise_path
            .as_ref()
            .map(|p| read_wav(self.resolve(p), sample_rate))
            .transpose()
    }

    pub fn condition_counts(&self) -> BTreeMap<DegradationCondition, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.condition).or_insert(0) += 1;
        }
        counts
    }

    pub fn filter(&self, keep: impl Fn(&UtteranceRecord) -> bool) -> Manifest {
        Manifest {
            records: self.records.iter().filter(|r| keep(r)).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }

    /// Every phoneme symbol used, sorted.
    pub fn phoneme_inventory(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.records.iter().flat_map(|r| &r.phonemes).collect();
        set.into_iter().cloned().collect()
    }

    pub fn n_speakers(&self) -> usize {
        self.records.iter().map(|r| r.speaker_id + 1).max().unwrap_or(0)
    }

    /// Moves the last `k` records of every speaker (in manifest order) to
    /// the second manifest.
    pub fn split_per_speaker(&self, k: usize) -> (Manifest, Manifest) {
        let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
        let totals = self.records.iter().fold(BTreeMap::new(), |mut m, r| {
            *m.entry(r.speaker_id).or_insert(0usize) += 1;
            m
        });
        let (mut head, mut tail) = (Vec::new(), Vec::new());
        for r in &self.records {
            let i = seen.entry(r.speaker_id).or_insert(0);
            if *i + k >= totals[&r.speaker_id] {
                tail.push(r.clone());
            } else {
                head.push(r.clone());
            }
            *i += 1;
        }
        (Manifest::new(head, &self.base_dir), Manifest::new(tail, &self.base_dir))
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `path` expressed relative to `base` when both are on the same root;
/// falls back to the absolute path.
pub fn relative_path(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| -> PathBuf {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        let mut out = PathBuf::new();
        for c in p.components() {
            match c {
                Component::ParentDir => {
                    out.pop();
                }
                Component::CurDir => {}
                other => out.push(other),
            }
        }
        out
    };
    let (p, b) = (abs(path), abs(base));
    let pc: Vec<_> = p.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return p.to_string_lossy().into_owned();
    }
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &pc[common..] {
        rel.push(c);
    }
    rel.to_string_lossy().into_owned()
}

/// Fraction of speakers assigned to each condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct ConditionRatios {
    pub clean: f64,
    pub noise: f64,
    pub reverb: f64,
    pub noise_reverb: f64,
}

impl Default for ConditionRatios {
    fn default() -> Self {
        ConditionRatios {
            clean: 0.25,
            noise: 0.25,
            reverb: 0.25,
            noise_reverb: 0.25,
        }
    }
}

impl ConditionRatios {
    pub fn as_array(&self) -> [f64; 4] {
        [self.clean, self.noise, self.reverb, self.noise_reverb]
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.as_array();
        if r.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config(format!("condition ratios must be non-negative, got {r:?}")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("condition ratios sum to {sum}, expected 1")));
        }
        Ok(())
    }
}

/// Speaker counts per condition by largest remainder, with every condition
/// of positive ratio getting at least one speaker when there are enough.
pub fn condition_counts(n_speakers: usize, ratios: &ConditionRatios) -> Result<[usize; 4]> {
    ratios.validate()?;
    let r = ratios.as_array();
    let exact: Vec<f64> = r.iter().map(|x| x * n_speakers as f64).collect();
    let mut counts: [usize; 4] = [0; 4];
    for i in 0..4 {
        counts[i] = exact[i].floor() as usize;
    }
    let positive = r.iter().filter(|&&x| x > 0.0).count();
    if n_speakers >= positive {
        for i in 0..4 {
            if r[i] > 0.0 && counts[i] == 0 {
                counts[i] = 1;
            }
        }
        while counts.iter().sum::<usize>() > n_speakers {
            let j = (0..4).filter(|&j| counts[j] > 1).max_by_key(|&j| counts[j]).expect("some count above one");
            counts[j] -= 1;
        }
    }
    let mut order: Vec<usize> = (0..4).filter(|&i| r[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut k = 0;
    while counts.iter().sum::<usize>() < n_speakers && !order.is_empty() {
        counts[order[k % order.len()]] += 1;
        k += 1;
    }
    Ok(counts)
}

/// Random speaker → condition partition.
pub fn assign_conditions<R: Rng>(
    speakers: &[usize],
    ratios: &ConditionRatios,
    rng: &mut R,
) -> Result<BTreeMap<usize, DegradationCondition>> {
    let mut unique: Vec<usize> = speakers.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    unique.shuffle(rng);
    let counts = condition_counts(unique.len(), ratios)?;
    let mut out = BTreeMap::new();
    let mut it = unique.into_iter();
    for (cond, &n) in DegradationCondition::ALL.iter().zip(&counts) {
        for spk in it.by_ref().take(n) {
            out.insert(spk, *cond);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeConfig {
    pub room: RoomSpec,
    /// Noise loudness range for the degraded TTS corpus.
    pub noise_lufs: [f64; 2],
    /// Noise loudness range for separator pretraining mixtures.
    pub mixture_lufs: [f64; 2],
    pub ratios: ConditionRatios,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            room: RoomSpec::default(),
            noise_lufs: DEFAULT_NOISE_LUFS,
            mixture_lufs: [-38.0, -30.0],
            ratios: ConditionRatios::default(),
        }
    }
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        self.ratios.validate()?;
        for (name, r) in [("noise_lufs", self.noise_lufs), ("mixture_lufs", self.mixture_lufs)] {
            if !(r[0] <= r[1] && r[1] < 0.0) {
                return Err(Error::Config(format!("{name} {r:?} must be an ordered range below 0 LUFS")));
            }
        }
        self.room.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug)]
pub struct RowError {
    pub id: String,
    pub error: Error,
}

/// Result of a corpus build: the manifest of rows that succeeded plus the
/// rows that failed.
#[derive(Debug)]
pub struct BuildOutcome {
    pub manifest: Manifest,
    pub errors: Vec<RowError>,
}

impl BuildOutcome {
    pub fn counts(&self) -> BTreeMap<DegradationCondition, usize> {
        self.manifest.condition_counts()
    }
}

fn wav_rel(cond: &str, speaker: usize, id: &str) -> String {
    format!("{cond}/spk{speaker:03}/{id}.wav")
}

/// Degrades every record of `input` into `out_dir`, assigning conditions
/// per speaker. The manifest is returned but not written.
pub fn build_corpus(
    input: &Manifest,
    noises: &[Waveform],
    config: &DegradeConfig,
    seed: u64,
    sample_rate: u32,
    out_dir: &Path,
) -> Result<BuildOutcome> {
    config.validate()?;
    if noises.is_empty() {
        return Err(Error::invalid("no noise clips supplied"));
    }
    let speakers: Vec<usize> = input.records.iter().map(|r| r.speaker_id).collect();
    let assignment = assign_conditions(&speakers, &config.ratios, &mut keyed_rng(seed, "speaker-partition"))?;
    let degrader = Degrader::new(&config.room, sample_rate, config.noise_lufs)?;

    let results: Vec<std::result::Result<UtteranceRecord, RowError>> = input
        .records
        .par_iter()
        .map(|rec| {
            let cond = assignment[&rec.speaker_id];
            degrade_record(input, rec, cond, noises, &degrader, seed, sample_rate, out_dir)
                .map_err(|error| RowError { id: rec.id.clone(), error })
        })
        .collect();

    let mut records = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e),
        }
    }
    Ok(BuildOutcome {
        manifest: Manifest::new(records, out_dir),
        errors,
    })
}

#[allow(clippy::too_many_arguments)]
fn degrade_record(
    input: &Manifest,
    rec: &UtteranceRecord,
    cond: DegradationCondition,
    noises: &[Waveform],
    degrader: &Degrader,
    seed: u64,
    sample_rate: u32,
    out_dir: &Path,
) -> Result<UtteranceRecord> {
    let clean_abs = input.resolve(&rec.clean_path);
    let clean = read_wav(&clean_abs, sample_rate)?;
    let mut rng = keyed_rng(seed, &rec.id);
    let noise = &noises[rng.random_range(0..noises.len())];
    let d = degrader.degrade(&clean, noise, cond, &mut rng)?;

    let degraded_rel = wav_rel(cond.slug(), rec.speaker_id, &rec.id);
    write_wav(out_dir.join(&degraded_rel), &d.waveform, WavFormat::Float32)?;
    let noise_path = match &d.noise_component {
        Some(n) => {
            let rel = format!("noise/{}", wav_rel(cond.slug(), rec.speaker_id, &rec.id));
            write_wav(out_dir.join(&rel), n, WavFormat::Float32)?;
            Some(rel)
        }
        None => None,
    };
    Ok(UtteranceRecord {
        id: rec.id.clone(),
        speaker_id: rec.speaker_id,
        phonemes: rec.phonemes.clone(),
        durations: rec.durations.clone(),
        condition: cond,
        clean_path: relative_path(&clean_abs, out_dir),
        degraded_path: degraded_rel,
        noise_lufs: d.meta.noise_lufs,
        rir_seed: d.meta.rir_seed,
        noise_path,
        rir_gain: d.meta.rir_gain,
    })
}

/// Speech + noise mixtures for separator pretraining: each clean utterance
/// gets a random clip scaled to a loudness drawn from `lufs`, without
/// reverberation. Records carry condition `Noise` and a `noise_path`.
pub fn build_mixtures(
    input: &Manifest,
    noises: &[Waveform],
    lufs: [f64; 2],
    seed: u64,
    sample_rate: u32,
    out_dir: &Path,
) -> Result<BuildOutcome> {
    if noises.is_empty() {
        return Err(Error::invalid("no noise clips supplied"));
    }
    let results: Vec<std::result::Result<UtteranceRecord, RowError>> = input
        .records
        .par_iter()
        .map(|rec| {
            mix_record(input, rec, noises, lufs, seed, sample_rate, out_dir)
                .map_err(|error| RowError { id: rec.id.clone(), error })
        })
        .collect();
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => errors.push(e),
        }
    }
    Ok(BuildOutcome {
        manifest: Manifest::new(records, out_dir),
        errors,
    })
}

fn mix_record(
    input: &Manifest,
    rec: &UtteranceRecord,
    noises: &[Waveform],
    lufs: [f64; 2],
    seed: u64,
    sample_rate: u32,
    out_dir: &Path,
) -> Result<UtteranceRecord> {
    let clean_abs = input.resolve(&rec.clean_path);
    let clean = read_wav(&clean_abs, sample_rate)?;
    let mut rng = keyed_rng(seed, &format!("mix/{}", rec.id));
    let clip = &noises[rng.random_range(0..noises.len())];
    // Random circular offset so short clip lists still give varied mixtures.
    let offset = rng.random_range(0..clip.len());
    let rotated: Vec<f64> = (0..clean.len()).map(|i| clip.samples()[(i + offset) % clip.len()]).collect();
    let u = rng.random_range(lufs[0]..=lufs[1]);
    let noise = scale_to_lufs(&Waveform::new(rotated, sample_rate)?, u)?;
    let mixture = clean.add(&noise)?;
    let id = format!("mix_{}", rec.id);
    let mix_rel = format!("mix/spk{:03}/{id}.wav", rec.speaker_id);
    let noise_rel = format!("mix_noise/spk{:03}/{id}.wav", rec.speaker_id);
    write_wav(out_dir.join(&mix_rel), &mixture, WavFormat::Float32)?;
    write_wav(out_dir.join(&noise_rel), &noise, WavFormat::Float32)?;
    Ok(UtteranceRecord {
        id,
        speaker_id: rec.speaker_id,
        phonemes: rec.phonemes.clone(),
        durations: rec.durations.clone(),
        condition: DegradationCondition::Noise,
        clean_path: relative_path(&clean_abs, out_dir),
        degraded_path: mix_rel,
        noise_lufs: Some(u),
        rir_seed: None,
        noise_path: Some(noise_rel),
        rir_gain: None,
    })
}
