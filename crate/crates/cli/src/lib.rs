//! `miscope` command line: each subcommand reads declared inputs and writes report files.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use commands::CliError;

/// Exit status for a usage error (bad flags or subcommand).
pub const EXIT_USAGE: i32 = 2;
/// Exit status for a data or model error.
pub const EXIT_DATA: i32 = 1;

pub const DATA_DIR_ENV: &str = "MISCOPE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "miscope", version, about = "MI-code labeling and conversation analytics")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Data directory holding default inputs and outputs.
    #[arg(long, global = true, env = DATA_DIR_ENV, default_value = ".")]
    pub data_dir: PathBuf,
    /// Corpus file (newline-delimited JSON). Default: DATA_DIR/corpus.jsonl
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    /// Label file or label store directory; repeatable. Default: DATA_DIR/labels.jsonl
    #[arg(long, global = true)]
    pub labels: Vec<PathBuf>,
    /// Model registry directory. Default: DATA_DIR/models
    #[arg(long, global = true)]
    pub models: Option<PathBuf>,
    /// Output file (ingest, label) or directory (everything else).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Context size: number of preceding utterances joined to the target.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true, default_value_t = 0.7)]
    pub suggest_threshold: f64,
    #[arg(long, global = true, default_value_t = 0.5)]
    pub label_threshold: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, default_value_t = 365)]
    pub min_span_days: i64,
    #[arg(long, global = true, default_value_t = 500)]
    pub min_sessions: usize,
    #[arg(long, global = true, default_value_t = 50)]
    pub min_utterances: usize,
    /// Fail on the first malformed corpus record instead of skipping it.
    #[arg(long, global = true)]
    pub strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PastRating {
    LeaveOneOut,
    Temporal,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and normalize a transcript file into a canonical corpus file.
    Ingest,
    /// Generate a synthetic corpus with ground-truth labels.
    Simgen {
        #[arg(long, default_value = "sample")]
        preset: String,
        /// Generator spec JSON; overrides --preset.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        conversations: Option<usize>,
    },
    /// Train one-vs-all classifiers on human labels.
    Train {
        /// Train only these codes; repeatable. Default: all 17.
        #[arg(long)]
        code: Vec<String>,
    },
    /// Label every listener utterance with the trained models.
    Label {
        #[arg(long)]
        model_id: Option<String>,
    },
    /// Positive-class precision, recall and F1 of the registry on held-out human labels.
    Evaluate {
        /// Evaluate on every labeled utterance rather than the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// Per-code Krippendorff alpha between human annotators.
    Agree,
    /// Model suggestions for utterances not yet verified.
    Suggest {
        #[arg(long, default_value_t = 20)]
        limit: usize,
        #[arg(long)]
        annotator: Option<String>,
    },
    /// Weighted logistic regression of satisfaction on code counts.
    Satisfy {
        #[arg(long, value_enum, default_value_t = PastRating::LeaveOneOut)]
        past_rating: PastRating,
    },
    /// Code usage by listener tenure bucket.
    Trends,
    /// Pearson correlation matrices at utterance, conversation and listener level.
    Corr,
    /// Top TF-IDF words per code.
    Topwords {
        #[arg(long, default_value_t = 5)]
        n: usize,
    },
    /// Agreement on a random sample, with and without the model as an observer.
    Validate {
        #[arg(long, default_value_t = 100)]
        n: usize,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

/// Runs with the process's stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(args, &mut stdout.lock(), &mut stderr.lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            let _ = writeln!(err, "{}", json!({ "error": first, "code": "usage" }));
            return EXIT_USAGE;
        }
    };
    match commands::dispatch(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "{}", json!({ "error": e.to_string(), "code": e.kind() }));
            e.exit_code()
        }
    }
}
