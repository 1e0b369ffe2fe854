//! `petrocap`: dataset preparation, training, evaluation, offline description
//! and the HTTP service behind one binary.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, dataset),
//! 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "petrocap", version, about = "Thin-section rock image captioning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Match image files with their #0 captions and write a manifest.
    BuildManifest(BuildManifestArgs),
    /// Check a manifest and list every offending record.
    ValidateDataset(ValidateArgs),
    /// Build the vocabulary from the captions of a manifest.
    BuildVocab(BuildVocabArgs),
    /// Train a captioner and save the model artifact.
    Train(TrainArgs),
    /// Score greedy captions of a test manifest with BLEU.
    Evaluate(EvaluateArgs),
    /// Describe one image, optionally writing the spoken MP3.
    Describe(DescribeArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct BuildManifestArgs {
    /// Directory scanned recursively for CCC_NNNNN.jpg files.
    #[arg(long)]
    images: PathBuf,
    /// Tab-separated captions file.
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Optional FILENAME<TAB>PPL|XPL file.
    #[arg(long)]
    lights: Option<PathBuf>,
    /// Reject captions containing non-ASCII bytes.
    #[arg(long)]
    ascii: bool,
    /// Treat any diagnostic as a validation failure.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Require the same number of images in every category.
    #[arg(long)]
    require_balanced: bool,
    /// Skip checking that image files exist.
    #[arg(long)]
    no_file_check: bool,
}

#[derive(Debug, Args)]
struct BuildVocabArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pipeline TOML; its [text] section sets vocab_size and seq_len.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// `stub` or the name of a backbone in --backbone-dir.
    #[arg(long, default_value = "stub")]
    extractor: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long, env = "PETROCAP_BACKBONE_DIR")]
    backbone_dir: Option<PathBuf>,
    /// Model name stored in the artifact.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    testset: PathBuf,
    /// CSV report path; the table is always printed.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "PETROCAP_BACKBONE_DIR")]
    backbone_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DescribeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Also synthesize speech into this MP3 file.
    #[arg(long)]
    audio: Option<PathBuf>,
    #[arg(long, default_value = petrocap_service::OFFLINE_STUB)]
    tts: String,
    #[arg(long)]
    tts_endpoint: Option<String>,
    #[arg(long, env = "PETROCAP_BACKBONE_DIR")]
    backbone_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    /// Model artifact directory; without it /api/describe answers 503.
    #[arg(long, env = "PETROCAP_MODEL_DIR")]
    model: Option<PathBuf>,
    #[arg(long, env = "PETROCAP_BACKBONE_DIR")]
    backbone_dir: Option<PathBuf>,
    #[arg(long, env = "PETROCAP_TTS", default_value = petrocap_service::OFFLINE_STUB)]
    tts: String,
    #[arg(long, env = "PETROCAP_TTS_ENDPOINT")]
    tts_endpoint: Option<String>,
    /// Seconds an audio file stays retrievable.
    #[arg(long, env = "PETROCAP_TTL_SECS", default_value_t = 900)]
    ttl_secs: u64,
    #[arg(long, env = "PETROCAP_SWEEP_SECS", default_value_t = 60)]
    sweep_secs: u64,
    #[arg(long, env = "PETROCAP_BIND", default_value = "127.0.0.1:8080")]
    bind: std::net::SocketAddr,
    #[arg(long, env = "PETROCAP_COMMENTS", default_value = "comments.jsonl")]
    comments: PathBuf,
    /// Directory of static web assets served at /.
    #[arg(long, env = "PETROCAP_STATIC_DIR")]
    static_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::BuildManifest(a) => commands::build_manifest(a),
        Command::ValidateDataset(a) => commands::validate_dataset(a),
        Command::BuildVocab(a) => commands::build_vocab(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Describe(a) => commands::describe(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.kind.code())
        }
    }
}
