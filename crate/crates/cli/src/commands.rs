use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use miscope_core::annotation::{
    agreement_report, suggest, unverified_contexts, validation_sample, verified_utterances, LabelStore,
};
use miscope_core::classifier::{
    labeled_examples, label_corpus, retrain, stratified_split, EvalReport, Hyper, ModelRegistry,
};
use miscope_core::corpus::{listener_join_times, parse_corpus, write_corpus, Cohort, Corpus};
use miscope_core::labels::{read_label_file, resolve_labels, write_label_file, LabelRecord};
use miscope_core::satisfaction::{analyze, build_design, satisfaction_json, satisfaction_table, PastRatingMode};
use miscope_core::simgen::{generate_corpus, GeneratorSpec};
use miscope_core::trends::{
    code_fraction_with_joins, conversation_corr, cooccurrence_matrix, listener_corr, trend_svg, utterance_labels,
    TopWordsIndex,
};
use miscope_core::{Error, MiCode};
use miscope_service::{ServiceConfig, ServiceError};
use serde::Serialize;
use serde_json::json;

use crate::{Cli, Command, Common, PastRating, EXIT_DATA};

const DEFAULT_K: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("invalid SOURCE_DATE_EPOCH {0:?}")]
    SourceDateEpoch(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Service(e) => e.kind(),
            CliError::SourceDateEpoch(_) => "invalid",
        }
    }

    pub fn exit_code(&self) -> i32 {
        EXIT_DATA
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Derives the seed a subcommand uses from the global one.
pub fn sub_seed(seed: u64, namespace: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in namespace.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fixed time from `SOURCE_DATE_EPOCH`, if set.
fn source_date_epoch() -> Result<Option<DateTime<Utc>>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(raw) => raw
            .trim()
            .parse::<i64>()
            .ok()
            .and_then(|s| Utc.timestamp_opt(s, 0).single())
            .map(Some)
            .ok_or(CliError::SourceDateEpoch(raw)),
        Err(_) => Ok(None),
    }
}

impl Common {
    fn input(&self) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.data_dir.join("corpus.jsonl"))
    }

    fn models(&self) -> PathBuf {
        self.models.clone().unwrap_or_else(|| self.data_dir.join("models"))
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.data_dir.join("reports"))
    }

    fn k(&self) -> usize {
        self.k.unwrap_or(DEFAULT_K)
    }

    fn cohort(&self) -> Cohort {
        Cohort {
            min_span_days: self.min_span_days,
            min_sessions: self.min_sessions,
            min_utterances: self.min_utterances,
        }
    }

    fn corpus(&self) -> Result<Corpus> {
        Ok(parse_corpus(&self.input(), self.strict)?.corpus)
    }

    /// Records from every `--labels` path in order; a directory is read as a label store.
    fn records(&self) -> Result<Vec<LabelRecord>> {
        let paths = if self.labels.is_empty() {
            vec![self.data_dir.join("labels.jsonl")]
        } else {
            self.labels.clone()
        };
        let mut out = Vec::new();
        for p in paths {
            if p.is_dir() {
                out.extend(LabelStore::read_snapshot(&p)?);
            } else {
                out.extend(read_label_file(&p)?);
            }
        }
        Ok(out)
    }

    fn registry(&self) -> Result<ModelRegistry> {
        Ok(ModelRegistry::load(&self.models())?)
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    write_file(path, s.as_bytes())
}

fn say(out: &mut dyn Write, text: &str) {
    let _ = out.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = out.write_all(b"\n");
    }
}

pub(crate) fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Ingest => ingest(c, out),
        Command::Simgen {
            preset,
            spec,
            conversations,
        } => simgen(c, preset, spec.as_deref(), *conversations, out),
        Command::Train { code } => train(c, code, out),
        Command::Label { model_id } => label(c, model_id.as_deref(), out),
        Command::Evaluate { all } => evaluate(c, *all, out),
        Command::Agree => agree(c, out),
        Command::Suggest { limit, annotator } => suggest_cmd(c, *limit, annotator.as_deref(), out),
        Command::Satisfy { past_rating } => satisfy(c, *past_rating, out),
        Command::Trends => trends(c, out),
        Command::Corr => corr(c, out),
        Command::Topwords { n } => topwords(c, *n, out),
        Command::Validate { n } => validate(c, *n, out),
        Command::Serve { host, port } => serve(c, host, *port),
    }
}

fn ingest(c: &Common, out: &mut dyn Write) -> Result<()> {
    let parsed = parse_corpus(&c.input(), c.strict)?;
    let dest = c.out.clone().unwrap_or_else(|| c.data_dir.join("corpus.normalized.jsonl"));
    if let Some(parent) = dest.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_corpus(&parsed.corpus, &dest)?;
    for e in &parsed.errors {
        say(out, &json!({ "skipped_line": e.line, "error": e.message }).to_string());
    }
    say(
        out,
        &json!({
            "conversations": parsed.corpus.len(),
            "utterances": parsed.corpus.utterance_count(),
            "skipped": parsed.errors.len(),
            "output": dest,
        })
        .to_string(),
    );
    Ok(())
}

fn simgen(
    c: &Common,
    preset: &str,
    spec_path: Option<&Path>,
    conversations: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<GeneratorSpec>(&raw).map_err(|e| Error::InvalidSpec(e.to_string()))?
        }
        None => GeneratorSpec::preset(preset, sub_seed(c.seed, "simgen"))?,
    };
    if let Some(n) = conversations {
        spec.n_conversations = n;
    }
    let generated = generate_corpus(&spec)?;
    let dir = c.out.clone().unwrap_or_else(|| c.data_dir.clone());
    generated.write_to(&dir)?;
    say(
        out,
        &json!({
            "conversations": generated.corpus.len(),
            "utterances": generated.corpus.utterance_count(),
            "labels": generated.labels.len(),
            "output": dir,
        })
        .to_string(),
    );
    Ok(())
}

fn eval_text(reports: &[EvalReport]) -> String {
    let mut s = String::from("code                    k  precision  recall     f1  support\n");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<22} {:>2}  {:>9.3}  {:>6.3}  {:>5.3}  {:>7}",
            r.code.name(),
            r.k,
            r.precision,
            r.recall,
            r.f1,
            r.support
        );
    }
    s
}

fn parse_codes(raw: &[String]) -> Result<Vec<MiCode>> {
    if raw.is_empty() {
        return Ok(MiCode::ALL.to_vec());
    }
    Ok(raw.iter().map(|s| s.parse()).collect::<std::result::Result<_, Error>>()?)
}

fn train(c: &Common, code: &[String], out: &mut dyn Write) -> Result<()> {
    let codes = parse_codes(code)?;
    let corpus = c.corpus()?;
    let records = c.records()?;
    let k = c.k();
    let models = c.models();
    let mut registry = if models.join("registry.json").exists() {
        c.registry()?
    } else {
        ModelRegistry::new()
    };
    let hyper = Hyper {
        seed: sub_seed(c.seed, "train"),
        ..Hyper::default()
    };
    let trained_at = Some(source_date_epoch()?.unwrap_or_else(Utc::now));
    let evals = retrain(&mut registry, &corpus, &records, &codes, k, hyper, c.label_threshold, trained_at)?;
    registry.save(&models)?;
    let dir = c.out_dir();
    let text = eval_text(&evals);
    write_file(&dir.join(format!("eval_k{k}.txt")), text.as_bytes())?;
    write_json(&dir.join(format!("eval_k{k}.json")), &evals)?;
    say(out, &text);
    Ok(())
}

fn label(c: &Common, model_id: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let registry = c.registry()?;
    let k = c.k();
    let decided_at = match source_date_epoch()? {
        Some(t) => t,
        None => registry
            .entries()
            .filter(|((_, ek), _)| *ek == k)
            .filter_map(|(_, e)| e.meta.trained_at)
            .max()
            .unwrap_or(DateTime::UNIX_EPOCH),
    };
    let id = model_id.map(str::to_string).unwrap_or_else(|| format!("miscope-k{k}"));
    let records = label_corpus(&registry, &corpus, k, c.label_threshold, &id, decided_at)?;
    let dest = c.out.clone().unwrap_or_else(|| c.data_dir.join("labels.model.jsonl"));
    write_label_file(&dest, &records)?;
    say(out, &json!({ "labeled": records.len(), "model_id": id, "output": dest }).to_string());
    Ok(())
}

fn evaluate(c: &Common, all: bool, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let records = c.records()?;
    let registry = c.registry()?;
    let k = c.k();
    let labels = resolve_labels(records.iter().filter(|r| r.source.is_human()));
    let examples = labeled_examples(&corpus, &labels, k)?;
    if examples.is_empty() {
        return Err(Error::Insufficient("no human-labeled listener utterances in the corpus".into()).into());
    }
    let items: Vec<_> = examples.iter().map(|e| e.cu.clone()).collect();
    let rows = registry.score_batch(k, &items)?;
    let seed = sub_seed(c.seed, "train");
    let mut reports = Vec::new();
    for code in MiCode::ALL {
        if registry.get(code, k).is_none() {
            continue;
        }
        let y: Vec<bool> = examples.iter().map(|e| e.codes.contains(code)).collect();
        let idx: Vec<usize> = if all {
            (0..y.len()).collect()
        } else {
            stratified_split(&y, code, seed).1
        };
        let pairs = idx.iter().map(|&i| {
            let p = rows[i][code.index()].unwrap_or(0.0);
            (p >= c.label_threshold, y[i])
        });
        reports.push(EvalReport::from_predictions(code, k, pairs));
    }
    if reports.is_empty() {
        return Err(Error::MissingModel {
            code: "any".into(),
            k,
        }
        .into());
    }
    let dir = c.out_dir();
    let text = eval_text(&reports);
    write_file(&dir.join(format!("evaluate_k{k}.txt")), text.as_bytes())?;
    write_json(&dir.join(format!("evaluate_k{k}.json")), &reports)?;
    say(out, &text);
    Ok(())
}

fn agree(c: &Common, out: &mut dyn Write) -> Result<()> {
    let report = agreement_report(&c.records()?);
    let dir = c.out_dir();
    let text = report.to_text();
    write_file(&dir.join("agreement.txt"), text.as_bytes())?;
    write_json(&dir.join("agreement.json"), &report)?;
    say(out, &text);
    Ok(())
}

fn suggest_cmd(c: &Common, limit: usize, annotator: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let records = c.records()?;
    let registry = c.registry()?;
    let k = c.k();
    let verified: HashSet<String> = verified_utterances(records.iter(), annotator);
    let pending = unverified_contexts(&corpus, &verified, k)?;
    let mut items = suggest(&registry, &pending, c.suggest_threshold, k)?;
    let total = items.len();
    items.truncate(limit);
    write_json(
        &c.out_dir().join("suggestions.json"),
        &json!({ "total": total, "threshold": c.suggest_threshold, "k": k, "items": items }),
    )?;
    for it in &items {
        say(out, &serde_json::to_string(it).expect("item serializes"));
    }
    Ok(())
}

fn satisfy(c: &Common, mode: PastRating, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let labels = resolve_labels(&c.records()?);
    let mode = match mode {
        PastRating::LeaveOneOut => PastRatingMode::LeaveOneOut,
        PastRating::Temporal => PastRatingMode::Temporal,
    };
    let analysis = analyze(&build_design(&corpus, &labels, mode))?;
    let dir = c.out_dir();
    let table = satisfaction_table(&analysis);
    write_file(&dir.join("satisfaction.txt"), table.as_bytes())?;
    write_json(&dir.join("satisfaction.json"), &satisfaction_json(&analysis))?;
    say(out, &table);
    Ok(())
}

/// The cohort-filtered corpus; tenure still counts from each listener's first utterance anywhere.
fn cohort_corpus(c: &Common, corpus: &Corpus) -> Result<Corpus> {
    let cohort = c.cohort();
    let filtered = cohort.apply(corpus);
    if filtered.is_empty() {
        return Err(Error::Insufficient(format!(
            "no conversations pass the cohort filters (min_span_days={}, min_sessions={}, min_utterances={})",
            cohort.min_span_days, cohort.min_sessions, cohort.min_utterances
        ))
        .into());
    }
    Ok(filtered)
}

fn trends(c: &Common, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let labels = resolve_labels(&c.records()?);
    let joins = listener_join_times(&corpus);
    let filtered = cohort_corpus(c, &corpus)?;
    let series = code_fraction_with_joins(&filtered, &labels, &joins)?;
    let dir = c.out_dir();
    let csv = series.to_csv();
    write_file(&dir.join("trends.csv"), csv.as_bytes())?;
    write_json(&dir.join("trends.json"), &series)?;
    write_file(&dir.join("trends.svg"), trend_svg(&series).as_bytes())?;
    say(out, &csv);
    Ok(())
}

fn corr(c: &Common, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let labels = resolve_labels(&c.records()?);
    let filtered = cohort_corpus(c, &corpus)?;
    let matrices = [
        cooccurrence_matrix(utterance_labels(&filtered, &labels))?,
        conversation_corr(&filtered, &labels)?,
        listener_corr(&filtered, &labels)?,
    ];
    let dir = c.out_dir();
    for (name, m) in ["utterance", "conversation", "listener"].iter().zip(&matrices) {
        write_file(&dir.join(format!("corr_{name}.csv")), m.to_csv().as_bytes())?;
    }
    write_json(&dir.join("corr.json"), &matrices)?;
    for m in &matrices {
        say(
            out,
            &json!({ "level": m.level, "variables": m.variables.len(), "n": m.n }).to_string(),
        );
    }
    Ok(())
}

fn topwords(c: &Common, n: usize, out: &mut dyn Write) -> Result<()> {
    let corpus = c.corpus()?;
    let labels = resolve_labels(&c.records()?);
    let report = TopWordsIndex::build(&corpus, &labels).report(n);
    let dir = c.out_dir();
    let text = report.to_text();
    write_file(&dir.join("topwords.txt"), text.as_bytes())?;
    write_json(&dir.join("topwords.json"), &report)?;
    say(out, &text);
    Ok(())
}

fn validate(c: &Common, n: usize, out: &mut dyn Write) -> Result<()> {
    let report = validation_sample(&c.records()?, n, sub_seed(c.seed, "validate"))?;
    let dir = c.out_dir();
    let text = report.to_text();
    write_file(&dir.join("validation.txt"), text.as_bytes())?;
    write_json(&dir.join("validation.json"), &report)?;
    say(out, &text);
    Ok(())
}

fn serve(c: &Common, host: &str, port: u16) -> Result<()> {
    let store = c
        .labels
        .first()
        .cloned()
        .unwrap_or_else(|| c.data_dir.join("store"));
    let mut config = ServiceConfig::new(c.input(), store, c.models());
    config.host = host.to_string();
    config.port = port;
    config.suggest_threshold = c.suggest_threshold;
    config.label_threshold = c.label_threshold;
    config.k = c.k();
    config.seed = sub_seed(c.seed, "serve");
    config.cohort = c.cohort();
    config.strict = c.strict;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(miscope_service::serve(config))?;
    Ok(())
}
