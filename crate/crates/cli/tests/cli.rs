use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use envtts::degrade::Manifest;
use envtts::infer::CleanEmbeddingArtifact;
use envtts::model::{AcousticModel, EnvEmbedding, ModelConfig, VarianceStats};
use envtts::separation::{Pretrainer, PretrainConfig, Separator, SeparatorConfig, SeparatorMode};
use serde_json::{json, Value};

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn envtts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_envtts"))
        .args(args)
        .env_remove("ENVTTS_SEED")
        .output()
        .expect("spawn envtts")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_model(path: &Path, hidden: usize) {
    let config = ModelConfig {
        hidden,
        ffn_dim: 16,
        variance_filter: 8,
        noise_blocks: 1,
        ref_channels: vec![4, 4],
        style_tokens: 4,
        style_heads: 2,
        heads: 2,
        enc_blocks: 1,
        dec_blocks: 1,
        n_bins: 8,
        ..ModelConfig::default()
    };
    let f0: Vec<f64> = (0..50).map(|i| 100.0 + i as f64).collect();
    let energy: Vec<f64> = (0..50).map(|i| i as f64).collect();
    let stats = VarianceStats::fit(&f0, &energy, config.n_bins).unwrap();
    let vocab = vec!["sil".to_string(), "a".to_string()];
    let m = AcousticModel::init_seeded(config, vocab, 1, stats, 3).unwrap();
    m.save(path, json!({})).unwrap();
}

fn embedding(path: &Path, dim: usize) {
    CleanEmbeddingArtifact::new(EnvEmbedding::zeros(dim), 1, vec![], "h".into())
        .unwrap()
        .save(path)
        .unwrap();
}

#[test]
fn missing_config_file_is_exit_2_and_names_the_schema() {
    let o = envtts(&["--config", "/nonexistent/cfg.json", "toy-corpus", "--out", "/tmp/unused"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("schema/pipeline.schema.json"));
}

#[test]
fn bad_env_override_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_envtts"))
        .args(["toy-corpus", "--out", p(dir.path())])
        .env("ENVTTS_TRAIN__ALPHA", "\"lots\"")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_envtts"))
        .args(["toy-corpus", "--out", p(dir.path())])
        .env("ENVTTS_NO_SUCH_KEY", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": {"hiden": 3}}"#).unwrap();
    let o = envtts(&["--config", p(&cfg), "toy-corpus", "--out", p(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn seeded_toy_corpus_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| -> Value {
        let out = dir.path().join(name);
        let o = envtts(&["--seed", seed, "toy-corpus", "--out", p(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
    };
    let hashes = |v: &Value| -> Vec<String> {
        v["manifests"]
            .as_array()
            .unwrap()
            .iter()
            .map(|m| m["sha256"].as_str().unwrap().to_string())
            .collect()
    };
    let a = run("a", "5");
    let b = run("b", "5");
    let c = run("c", "6");
    assert_eq!(hashes(&a), hashes(&b));
    assert_ne!(hashes(&a), hashes(&c));

    // Each clean utterance lands in exactly one of train/test, degraded once.
    let clean = Manifest::load(dir.path().join("a/clean.jsonl")).unwrap();
    let train = Manifest::load(dir.path().join("a/train.jsonl")).unwrap();
    let test = Manifest::load(dir.path().join("a/test.jsonl")).unwrap();
    assert_eq!(train.records.len() + test.records.len(), clean.records.len());
    let manifests = a["manifests"].as_array().unwrap();
    let degraded = manifests.iter().find(|m| m["file"] == "degraded.jsonl").unwrap();
    let total: u64 = degraded["conditions"].as_object().unwrap().values().map(|v| v.as_u64().unwrap()).sum();
    assert_eq!(total as usize, clean.records.len());
    assert_eq!(a["failed_rows"], 0);
    assert!(test.records.iter().all(|r| !r.degraded_path.is_empty()));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(envtts_cli::lock::LOCK_NAME), "1").unwrap();
    let o = envtts(&["toy-corpus", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("locked"));
    assert!(dir.path().join(envtts_cli::lock::LOCK_NAME).exists());
    assert!(!dir.path().join("clean.jsonl").exists());
}

#[test]
fn synthesize_without_embedding_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.ckpt");
    tiny_model(&model, 8);
    let o = envtts(&[
        "synthesize",
        "--model",
        p(&model),
        "--embedding",
        p(&dir.path().join("missing.json")),
        "--out",
        p(&dir.path().join("syn")),
        "--phonemes",
        "sil a sil",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn embedding_dimension_mismatch_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.ckpt");
    tiny_model(&model, 8);
    let emb = dir.path().join("emb.json");
    embedding(&emb, 9);
    let o = envtts(&[
        "synthesize",
        "--model",
        p(&model),
        "--embedding",
        p(&emb),
        "--out",
        p(&dir.path().join("syn")),
        "--phonemes",
        "sil a sil",
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn synthesize_writes_mel_with_sidecar_and_wav() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.ckpt");
    tiny_model(&model, 8);
    let emb = dir.path().join("emb.json");
    embedding(&emb, 8);
    let out = dir.path().join("syn");
    let o = envtts(&[
        "synthesize",
        "--model",
        p(&model),
        "--embedding",
        p(&emb),
        "--out",
        p(&out),
        "--phonemes",
        "sil a a sil",
        "--id",
        "x1",
        "--wav",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (mel, side) = envtts::infer::read_mel(out.join("x1.mel")).unwrap();
    assert_eq!(side.shape, [mel.frames(), 80]);
    assert_eq!(side.extra["phonemes"], json!(["sil", "a", "a", "sil"]));
    assert!(side.extra.get("config").is_some());
    assert!(out.join("x1.wav").is_file());

    let reqs = dir.path().join("reqs.jsonl");
    std::fs::write(
        &reqs,
        "{\"id\":\"r1\",\"phonemes\":[\"sil\",\"a\"],\"speaker_id\":0,\"durations\":[2,3]}\n",
    )
    .unwrap();
    let o = envtts(&["synthesize", "--model", p(&model), "--embedding", p(&emb), "--out", p(&out), "--requests", p(&reqs)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (mel, _) = envtts::infer::read_mel(out.join("r1.mel")).unwrap();
    assert_eq!(mel.frames(), 5);

    let o = envtts(&["synthesize", "--model", p(&model), "--embedding", p(&emb), "--out", p(&out), "--phonemes", "zz"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn bad_conditions_flag_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = envtts(&[
        "embed-clean",
        "--model",
        p(&dir.path().join("m")),
        "--denoiser",
        p(&dir.path().join("d")),
        "--manifest",
        p(&dir.path().join("x.jsonl")),
        "--out",
        p(&dir.path().join("e.json")),
        "--conditions",
        "Clean,Sunny",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn train_with_missing_or_wrong_separators_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&envtts(&["toy-corpus", "--out", p(&corpus)])), 0);
    let sc = SeparatorConfig {
        n_filters: 8,
        filter_len: 16,
        bottleneck: 4,
        hidden: 8,
        blocks: 1,
        repeats: 1,
        ..SeparatorConfig::default()
    };
    let ext = dir.path().join("ext.ckpt");
    Separator::init_seeded(sc.clone(), 1).unwrap().save(&ext, json!({})).unwrap();
    let manifest = corpus.join("train.jsonl");
    let run = |e: &Path, d: &Path| {
        envtts(&[
            "train",
            "--manifest",
            p(&manifest),
            "--extractor",
            p(e),
            "--denoiser",
            p(d),
            "--out",
            p(&dir.path().join("model")),
        ])
    };
    let o = run(&ext, &dir.path().join("nope.ckpt"));
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    // An extractor offered as the denoiser.
    let o = run(&ext, &ext);
    assert_eq!(code(&o), 3, "{}", stderr(&o));

    // Resuming pretraining from a checkpoint of the other mode.
    let den = Separator::init_seeded(SeparatorConfig { mode: SeparatorMode::Denoise, ..sc }, 2).unwrap();
    let pt = Pretrainer::new(den, PretrainConfig::default(), 1).unwrap();
    let state = dir.path().join("den_state.ckpt");
    pt.save(&state, json!({})).unwrap();
    let o = envtts(&[
        "pretrain",
        "--manifest",
        p(&corpus.join("mixtures.jsonl")),
        "--mode",
        "extract-noise",
        "--out",
        p(&dir.path().join("pt")),
        "--resume",
        p(&state),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn published_schema_is_current() {
    let path = workspace_root().join(envtts::config::SCHEMA_PATH);
    let on_disk: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(on_disk, envtts::config::schema(), "regenerate with `envtts schema > {}`", envtts::config::SCHEMA_PATH);
}

#[test]
fn shipped_configs_load() {
    for entry in std::fs::read_dir(workspace_root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        envtts::config::PipelineConfig::load(Some(&path), Vec::new())
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

#[test]
fn holdout_split_is_deterministic_and_nonempty() {
    use envtts_cli::commands::split_holdout;
    let (t, v) = split_holdout((0..10).collect::<Vec<_>>(), 0.2, 3, "k");
    assert_eq!((t.len(), v.len()), (8, 2));
    assert_eq!(split_holdout((0..10).collect::<Vec<_>>(), 0.2, 3, "k").1, v);
    let (t, v) = split_holdout(vec![1, 2], 0.01, 3, "k");
    assert_eq!((t.len(), v.len()), (1, 1));
    let (t, v) = split_holdout(vec![1, 2, 3], 0.0, 3, "k");
    assert_eq!((t.len(), v.len()), (3, 0));
}
