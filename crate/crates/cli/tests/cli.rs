mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;

use petrocap_core::model::{save_model, CaptionerModel, ModelConfig, StubExtractor};
use petrocap_core::text::{TextConfig, Vocabulary};

fn petrocap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_petrocap"))
        .args(args)
        .env_remove("PETROCAP_MODEL_DIR")
        .env_remove("PETROCAP_BACKBONE_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Untrained model biased so greedy decoding emits a known word.
fn talking_model(dir: &Path) -> PathBuf {
    let text = TextConfig { vocab_size: 16, seq_len: 6 };
    let vocab = Vocabulary::build(&["se trata de una andesita"], &text).unwrap();
    let config = ModelConfig {
        embed_dim: 8,
        ff_dim: 8,
        ..ModelConfig::with_text(&text)
    };
    let word = vocab.id_of("andesita").unwrap() as usize;
    let mut model = CaptionerModel::new("cli-test", config, vocab, Arc::new(StubExtractor), 1).unwrap();
    let bias = model.transformer.params().id_of("dec.output.bias").unwrap();
    model.transformer.params_mut().get_mut(bias)[[0, word]] = 50.0;
    let out = dir.join("model");
    save_model(&model, &out).unwrap();
    out
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    let top = petrocap(&["--help"]);
    assert_eq!(top.status.code(), Some(0));
    for sub in [
        "build-manifest",
        "validate-dataset",
        "build-vocab",
        "train",
        "evaluate",
        "describe",
        "serve",
    ] {
        assert!(stdout(&top).contains(sub), "{sub} missing from help");
        let o = petrocap(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub} --help");
        assert!(stdout(&o).contains("Usage"), "{sub} --help prints usage");
    }
}

#[test]
fn usage_errors_exit_one() {
    let o = petrocap(&["describe", "--model", "m", "--image", "x.jpg", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(petrocap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(petrocap(&[]).status.code(), Some(1));
    assert_eq!(petrocap(&["validate-dataset"]).status.code(), Some(1));
}

#[test]
fn dataset_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    common::write_corpus(root, 2, 48);
    let manifest = root.join("manifest.json");
    let o = petrocap(&[
        "build-manifest",
        "--images",
        p(&root.join("images")),
        "--captions",
        p(&root.join("captions.txt")),
        "--lights",
        p(&root.join("lights.tsv")),
        "--out",
        p(&manifest),
        "--strict",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("total 28"));

    let o = petrocap(&["validate-dataset", "--manifest", p(&manifest), "--require-balanced"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("ok"));

    let config = root.join("pipeline.toml");
    std::fs::write(
        &config,
        "[text]\nvocab_size = 200\nseq_len = 60\n\n[model]\nembed_dim = 16\nff_dim = 16\n\n[train]\nepochs = 2\nbatch_size = 8\naugment = false\n\n[split]\ntrain_fraction = 0.75\n",
    )
    .unwrap();
    let vocab = root.join("vocab.txt");
    let o = petrocap(&["build-vocab", "--manifest", p(&manifest), "--config", p(&config), "--out", p(&vocab)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let tokens = std::fs::read_to_string(&vocab).unwrap();
    assert!(tokens.lines().any(|t| t == "andesita"));

    let model = root.join("model");
    let o = petrocap(&[
        "train",
        "--manifest",
        p(&manifest),
        "--vocab",
        p(&vocab),
        "--extractor",
        "stub",
        "--config",
        p(&config),
        "--out-model",
        p(&model),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("21 training / 7 validation"));
    for f in ["architecture.json", "vocab.txt", "weights.safetensors", "history.csv"] {
        assert!(model.join(f).is_file(), "{f} missing");
    }
    let history = std::fs::read_to_string(model.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(history.starts_with("epoch,train_loss,train_acc,val_loss,val_acc"));

    let report = root.join("report.csv");
    let o = petrocap(&["evaluate", "--model", p(&model), "--testset", p(&manifest), "--out", p(&report)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 16);
    assert!(lines[0].starts_with("category,bleu,"));
    assert!(lines[15].starts_with("promedio,"));
    assert!(stdout(&o).contains("promedio"));
}

#[test]
fn validate_dataset_lists_offenders() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    common::write_corpus(root, 1, 32);
    let manifest = root.join("manifest.json");
    let o = petrocap(&[
        "build-manifest",
        "--images",
        p(&root.join("images")),
        "--captions",
        p(&root.join("captions.txt")),
        "--out",
        p(&manifest),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&manifest)
        .unwrap()
        .replace("\"101_00001.jpg\"", "\"115_00001.jpg\"")
        .replacen("\"102_00401.jpg\"", "\"101_00401.jpg\"", 1);
    let bad = root.join("bad.json");
    std::fs::write(&bad, text).unwrap();
    let o = petrocap(&["validate-dataset", "--manifest", p(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("115_00001.jpg"), "{err}");
    assert!(err.contains("101_00401.jpg"), "{err}");

    std::fs::remove_file(root.join("images").join("103_00801.jpg")).unwrap();
    let o = petrocap(&["validate-dataset", "--manifest", p(&manifest)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("103_00801.jpg"));
    let o = petrocap(&["validate-dataset", "--manifest", p(&manifest), "--no-file-check"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    std::fs::write(&bad, "not json").unwrap();
    assert_eq!(petrocap(&["validate-dataset", "--manifest", p(&bad)]).status.code(), Some(1));
    let missing = root.join("missing.json");
    assert_eq!(petrocap(&["validate-dataset", "--manifest", p(&missing)]).status.code(), Some(2));
}

#[test]
fn build_manifest_reports_bad_captions() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    common::write_corpus(root, 1, 32);
    let captions = root.join("captions.txt");
    let out = root.join("m.json");
    let o = petrocap(&[
        "build-manifest",
        "--images",
        p(&root.join("images")),
        "--captions",
        p(&captions),
        "--out",
        p(&out),
        "--ascii",
    ]);
    assert_eq!(o.status.code(), Some(1), "accented captions are not ASCII");
    assert!(stderr(&o).contains("non-ASCII"));

    std::fs::write(root.join("images").join("999_00001.jpg"), b"x").unwrap();
    let images = root.join("images");
    let args = [
        "build-manifest",
        "--images",
        p(&images),
        "--captions",
        p(&captions),
        "--out",
        p(&out),
    ];
    let o = petrocap(&args);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("999_00001.jpg"));
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(petrocap(&strict).status.code(), Some(1));
}

#[test]
fn describe_prints_text_and_writes_audio() {
    let dir = tempfile::tempdir().unwrap();
    let model = talking_model(dir.path());
    let image = dir.path().join("101_00001.jpg");
    let img = common::image(petrocap_core::dataset::RockCategory::Andesita, 0, petrocap_core::dataset::LightType::Ppl, 64);
    std::fs::write(&image, common::jpeg_bytes(&img)).unwrap();
    let audio = dir.path().join("out").join("a.mp3");
    let o = petrocap(&["describe", "--model", p(&model), "--image", p(&image), "--audio", p(&audio)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).trim().starts_with("andesita"));
    let mp3 = std::fs::read(&audio).unwrap();
    assert!(petrocap_service::is_mp3(&mp3));

    let o = petrocap(&["describe", "--model", p(&model), "--image", p(&image)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(!dir.path().join("a.mp3").exists());
}

#[test]
fn describe_failures_use_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let model = talking_model(dir.path());
    let text_file = dir.path().join("notes.jpg");
    std::fs::write(&text_file, "plain text").unwrap();
    let o = petrocap(&["describe", "--model", p(&model), "--image", p(&text_file)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let nowhere = dir.path().join("no-model");
    let o = petrocap(&["describe", "--model", p(&nowhere), "--image", p(&text_file)]);
    assert_eq!(o.status.code(), Some(2));

    let o = petrocap(&[
        "describe",
        "--model",
        p(&model),
        "--image",
        p(&text_file),
        "--audio",
        "x.mp3",
        "--tts",
        "espeak",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("espeak"));
}

#[test]
fn train_rejects_bad_config_and_unknown_extractor() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    common::write_corpus(root, 1, 32);
    let manifest = root.join("manifest.json");
    assert_eq!(
        petrocap(&[
            "build-manifest",
            "--images",
            p(&root.join("images")),
            "--captions",
            p(&root.join("captions.txt")),
            "--out",
            p(&manifest),
        ])
        .status
        .code(),
        Some(0)
    );
    let vocab = root.join("vocab.txt");
    assert_eq!(
        petrocap(&["build-vocab", "--manifest", p(&manifest), "--out", p(&vocab)]).status.code(),
        Some(0)
    );
    let config = root.join("bad.toml");
    std::fs::write(&config, "[model]\nembed_dim = 10\ndec_heads = 3\n").unwrap();
    let out_model = root.join("m");
    let base = [
        "train",
        "--manifest",
        p(&manifest),
        "--vocab",
        p(&vocab),
        "--out-model",
        p(&out_model),
    ];
    let mut with_config = base.to_vec();
    with_config.extend(["--config", p(&config)]);
    assert_eq!(petrocap(&with_config).status.code(), Some(1));

    let mut with_extractor = base.to_vec();
    with_extractor.extend(["--extractor", "efficientnet-b7"]);
    let o = petrocap(&with_extractor);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("efficientnet-b7"));
}

#[test]
fn serve_answers_health_and_rejects_bad_engine() {
    let o = petrocap(&["serve", "--tts", "espeak"]);
    assert_eq!(o.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let model = talking_model(dir.path());
    let mut child = Command::new(env!("CARGO_BIN_EXE_petrocap"))
        .args([
            "serve",
            "--model",
            p(&model),
            "--bind",
            "127.0.0.1:0",
            "--comments",
            p(&dir.path().join("c.jsonl")),
        ])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let line = lines.next().unwrap().unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect("listening line").to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /api/health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"model\":\"loaded\""), "{response}");
    assert!(response.contains("\"extractor\":\"stub\""), "{response}");
    assert!(response.contains("\"tts\":\"offline-stub\""), "{response}");
}
