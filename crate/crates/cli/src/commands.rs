use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, Context};

use petrocap_core::dataset::{
    build_manifest as scan, load_image, parse_captions_file, parse_light_sidecar, preprocess_image, split_dataset,
    validate_document, Charset, DatasetManifest, ManifestDocument,
};
use petrocap_core::eval::{evaluate_testset, BleuConfig, SegmentSchema};
use petrocap_core::model::{load_model, resolve_extractor, save_model, CaptionerModel};
use petrocap_core::text::Vocabulary;
use petrocap_core::training::{export_history, prepare_samples, train as fit, EpochMetrics};
use petrocap_service::{resolve_tts, serve as run_service, ServiceConfig};

use crate::config::PipelineConfig;
use crate::{BuildManifestArgs, BuildVocabArgs, DescribeArgs, EvaluateArgs, ServeArgs, TrainArgs, ValidateArgs};

#[derive(Debug, Clone, Copy)]
pub enum Kind {
    Validation,
    Runtime,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Validation => 1,
            Kind::Runtime => 2,
        }
    }
}

pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

type Outcome = Result<(), Failure>;

trait Classify<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind: Kind::Validation,
            error: e.into(),
        })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            kind: Kind::Runtime,
            error: e.into(),
        })
    }
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .runtime()
}

fn write(path: &Path, content: impl AsRef<[u8]>) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))
            .runtime()?;
    }
    std::fs::write(path, content)
        .with_context(|| format!("cannot write {}", path.display()))
        .runtime()
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    match path {
        Some(p) => {
            let text = String::from_utf8(read(p)?)
                .with_context(|| format!("{} is not UTF-8", p.display()))
                .invalid()?;
            PipelineConfig::parse(&text)
                .with_context(|| format!("invalid configuration {}", p.display()))
                .invalid()
        }
        None => Ok(PipelineConfig::default()),
    }
}

/// Reads a manifest and fails with the full offender list if any entry is bad.
fn load_manifest(path: &Path) -> Result<DatasetManifest, Failure> {
    let doc: ManifestDocument = serde_json::from_slice(&read(path)?)
        .with_context(|| format!("{} is not a manifest document", path.display()))
        .invalid()?;
    let (manifest, problems) = validate_document(&doc);
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("  {p}");
        }
        return Err(anyhow!("{}: {} invalid record(s)", path.display(), problems.len())).invalid();
    }
    Ok(manifest)
}

fn print_counts(manifest: &DatasetManifest) {
    for (cat, n) in manifest.category_counts() {
        println!("{:>3} {:<18} {n}", cat.code(), cat.name());
    }
    println!("total {}", manifest.len());
}

pub fn build_manifest(a: BuildManifestArgs) -> Outcome {
    let charset = if a.ascii { Charset::Ascii } else { Charset::Utf8 };
    let captions = parse_captions_file(&read(&a.captions)?, charset)
        .with_context(|| format!("{}", a.captions.display()))
        .invalid()?;
    let lights = match &a.lights {
        Some(p) => {
            let text = String::from_utf8_lossy(&read(p)?).into_owned();
            parse_light_sidecar(&text)
                .map_err(|e| anyhow!("{}: {e}", p.display()))
                .invalid()?
        }
        None => HashMap::new(),
    };
    let built = scan(&a.images, &captions, &lights).invalid()?;
    for d in &built.diagnostics {
        eprintln!("warning: {d}");
    }
    write(&a.out, built.manifest.to_json())?;
    print_counts(&built.manifest);
    if a.strict && !built.diagnostics.is_empty() {
        return Err(anyhow!("{} diagnostic(s) in strict mode", built.diagnostics.len())).invalid();
    }
    Ok(())
}

pub fn validate_dataset(a: ValidateArgs) -> Outcome {
    let doc: ManifestDocument = serde_json::from_slice(&read(&a.manifest)?)
        .with_context(|| format!("{} is not a manifest document", a.manifest.display()))
        .invalid()?;
    let (manifest, mut problems) = validate_document(&doc);
    let mut offenders: Vec<String> = problems.drain(..).map(|p| p.to_string()).collect();
    if !a.no_file_check {
        for r in &manifest.records {
            if !r.path.is_file() {
                offenders.push(format!("{}: image file {} not found", r.filename, r.path.display()));
            }
        }
    }
    if a.require_balanced && !manifest.is_balanced() {
        offenders.push("categories hold different numbers of images".to_string());
    }
    print_counts(&manifest);
    if offenders.is_empty() {
        println!("ok");
        return Ok(());
    }
    for o in &offenders {
        eprintln!("  {o}");
    }
    Err(anyhow!("{} problem(s) found", offenders.len())).invalid()
}

pub fn build_vocab(a: BuildVocabArgs) -> Outcome {
    let cfg = load_config(a.config.as_deref())?;
    let manifest = load_manifest(&a.manifest)?;
    let corpus: Vec<&str> = manifest.captions.values().map(|c| c.text.as_str()).collect();
    let vocab = Vocabulary::build(&corpus, &cfg.text).invalid()?;
    write(&a.out, vocab.to_text())?;
    println!("{} tokens written to {}", vocab.len(), a.out.display());
    Ok(())
}

fn read_vocab(path: &Path) -> Result<Vocabulary, Failure> {
    let text = String::from_utf8(read(path)?)
        .with_context(|| format!("{} is not UTF-8", path.display()))
        .invalid()?;
    Vocabulary::from_text(&text)
        .with_context(|| format!("{}", path.display()))
        .invalid()
}

pub fn train(a: TrainArgs) -> Outcome {
    let cfg = load_config(a.config.as_deref())?;
    let manifest = load_manifest(&a.manifest)?;
    let vocab = read_vocab(&a.vocab)?;
    let extractor = resolve_extractor(&a.extractor, a.backbone_dir.as_deref()).invalid()?;
    let name = a.name.unwrap_or_else(|| format!("petrocap-{}", a.extractor));
    let seed = cfg.model.init_seed.unwrap_or(cfg.train.seed);
    let mut model = CaptionerModel::new(name, cfg.model_config(), vocab, extractor, seed).invalid()?;

    let (train_records, val_records) = split_dataset(&manifest, &cfg.split_config());
    if train_records.is_empty() || val_records.is_empty() {
        return Err(anyhow!(
            "split of {} images leaves an empty training or validation set",
            manifest.len()
        ))
        .invalid();
    }
    eprintln!(
        "{} training / {} validation images, {} parameters",
        train_records.len(),
        val_records.len(),
        model.transformer.params().num_scalars()
    );
    let prepare = |records| {
        prepare_samples(&manifest.subset(records), &model.vocab, &model.text, model.extractor.as_ref())
    };
    let train_set = prepare(train_records).runtime()?;
    let val_set = prepare(val_records).runtime()?;
    let mut report = |epoch: usize, t: EpochMetrics, v: EpochMetrics| {
        eprintln!(
            "epoch {epoch:>3}  loss {:.4}  acc {:.4}  val_loss {:.4}  val_acc {:.4}",
            t.loss, t.accuracy, v.loss, v.accuracy
        );
    };
    let outcome = fit(&mut model, &train_set, &val_set, &cfg.train, Some(&mut report)).runtime()?;
    save_model(&model, &a.out_model).runtime()?;
    write(&a.out_model.join("history.csv"), export_history(&outcome.history))?;
    if let Some(best) = &outcome.best {
        println!(
            "best epoch {} (val_loss {:.4}) of {}{}; model saved to {}",
            best.epoch,
            best.val_loss,
            outcome.history.len(),
            if outcome.stopped_early { ", stopped early" } else { "" },
            a.out_model.display()
        );
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Outcome {
    let model = load_model(&a.model, a.backbone_dir.as_deref(), None).runtime()?;
    let testset = load_manifest(&a.testset)?;
    let report = evaluate_testset(&model, &testset, &BleuConfig::default(), &SegmentSchema::default()).runtime()?;
    for cat in &report.omitted {
        eprintln!("warning: no test images for {}, row omitted", cat.name());
    }
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write(out, report.to_csv())?;
    }
    Ok(())
}

pub fn describe(a: DescribeArgs) -> Outcome {
    let tts = match &a.audio {
        Some(_) => Some(resolve_tts(&a.tts, a.tts_endpoint.as_deref()).invalid()?),
        None => None,
    };
    let model = load_model(&a.model, a.backbone_dir.as_deref(), None).runtime()?;
    let raw = load_image(&a.image).invalid()?;
    let prepared = preprocess_image(&raw, a.image.display().to_string()).invalid()?;
    let description = model.generate_caption(&prepared, model.text.seq_len).runtime()?;
    if description.trim().is_empty() {
        return Err(anyhow!("the model produced an empty description")).runtime();
    }
    println!("{description}");
    if let (Some(path), Some(tts)) = (&a.audio, tts) {
        let mp3 = tts.synthesize(&description).runtime()?;
        write(path, mp3)?;
        eprintln!("audio written to {}", path.display());
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Outcome {
    if a.ttl_secs == 0 || a.sweep_secs == 0 {
        return Err(anyhow!("--ttl-secs and --sweep-secs must be positive")).invalid();
    }
    resolve_tts(&a.tts, a.tts_endpoint.as_deref()).invalid()?;
    let config = ServiceConfig {
        model_dir: a.model,
        backbone_dir: a.backbone_dir,
        tts: a.tts,
        tts_endpoint: a.tts_endpoint,
        ttl: Duration::from_secs(a.ttl_secs),
        sweep_interval: Duration::from_secs(a.sweep_secs),
        bind: a.bind,
        comments_path: a.comments,
        static_dir: a.static_dir,
    };
    let runtime = tokio::runtime::Runtime::new().runtime()?;
    runtime.block_on(run_service(config)).runtime()
}
