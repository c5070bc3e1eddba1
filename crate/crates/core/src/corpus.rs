//! Conversation data model, transcript ingestion, context windows and cohort filters.
//!
//! Transcript files are newline-delimited JSON with two record kinds: a
//! conversation header and an utterance (distinguished by the presence of
//! `utterance_id`). Malformed records are collected and skipped unless the
//! caller asks for strict parsing.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Marker placed between utterances of a context window.
pub const CONTEXT_MARKER: char = '⟂';
/// Stand-in written in place of [`CONTEXT_MARKER`] when it appears in transcript text.
pub const MARKER_ESCAPE: char = '⊥';
const CONTEXT_JOIN: &str = " ⟂ ";

const MONTH_SECS: i64 = 30 * 86_400;
const HALF_YEAR_SECS: i64 = 180 * 86_400;
const YEAR_SECS: i64 = 365 * 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpeakerRole {
    Listener,
    Member,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub utterance_id: String,
    pub conversation_id: String,
    pub index: usize,
    pub speaker: SpeakerRole,
    #[serde(with = "timestamp")]
    pub timestamp: DateTime<Utc>,
    pub text: String,
}

/// A member rating on the 1..5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct Rating(u8);

impl Rating {
    pub fn new(value: i64) -> Result<Self> {
        if (1..=5).contains(&value) {
            Ok(Rating(value as u8))
        } else {
            Err(Error::InvalidRating(value))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SatisfactionClass {
    Satisfactory,
    Unsatisfactory,
}

/// Ratings of 4 and 5 are satisfactory; 1 to 3 are not.
pub fn binarize_rating(rating: i64) -> Result<SatisfactionClass> {
    let r = Rating::new(rating)?;
    Ok(if r.get() >= 4 {
        SatisfactionClass::Satisfactory
    } else {
        SatisfactionClass::Unsatisfactory
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Conversation {
    pub conversation_id: String,
    pub listener_id: String,
    pub member_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub listener_age: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_age: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating: Option<Rating>,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    pub fn start_time(&self) -> Option<DateTime<Utc>> {
        self.utterances.first().map(|u| u.timestamp)
    }

    pub fn listener_utterances(&self) -> impl Iterator<Item = (usize, &Utterance)> {
        self.utterances
            .iter()
            .enumerate()
            .filter(|(_, u)| u.speaker == SpeakerRole::Listener)
    }

    pub fn satisfaction(&self) -> Option<SatisfactionClass> {
        self.rating.map(|r| {
            binarize_rating(r.get() as i64).expect("Rating is always within 1..5")
        })
    }
}

/// An immutable collection of conversations ordered by `conversation_id`.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    conversations: Vec<Conversation>,
    by_utterance: HashMap<String, (usize, usize)>,
}

impl Corpus {
    pub fn new(mut conversations: Vec<Conversation>) -> Self {
        conversations.sort_by(|a, b| a.conversation_id.cmp(&b.conversation_id));
        let mut by_utterance = HashMap::new();
        for (ci, c) in conversations.iter().enumerate() {
            for (ui, u) in c.utterances.iter().enumerate() {
                by_utterance.insert(u.utterance_id.clone(), (ci, ui));
            }
        }
        Corpus {
            conversations,
            by_utterance,
        }
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.conversations
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn utterance_count(&self) -> usize {
        self.by_utterance.len()
    }

    pub fn conversation(&self, id: &str) -> Option<&Conversation> {
        self.conversations
            .binary_search_by(|c| c.conversation_id.as_str().cmp(id))
            .ok()
            .map(|i| &self.conversations[i])
    }

    /// Locates an utterance by id, returning its conversation and position.
    pub fn locate(&self, utterance_id: &str) -> Option<(&Conversation, usize)> {
        self.by_utterance
            .get(utterance_id)
            .map(|&(ci, ui)| (&self.conversations[ci], ui))
    }

    pub fn utterance(&self, utterance_id: &str) -> Option<&Utterance> {
        self.locate(utterance_id).map(|(c, i)| &c.utterances[i])
    }

    pub fn listener_ids(&self) -> BTreeSet<String> {
        self.conversations
            .iter()
            .map(|c| c.listener_id.clone())
            .collect()
    }

    /// Keeps the conversations accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&Conversation) -> bool) -> Corpus {
        Corpus::new(
            self.conversations
                .iter()
                .filter(|c| keep(c))
                .cloned()
                .collect(),
        )
    }
}

/// One skipped record and why.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ParsedCorpus {
    pub corpus: Corpus,
    pub errors: Vec<RecordError>,
}

impl ParsedCorpus {
    pub fn skipped(&self) -> usize {
        self.errors.len()
    }
}

#[derive(Deserialize)]
struct HeaderRecord {
    conversation_id: String,
    listener_id: String,
    member_id: String,
    #[serde(default)]
    listener_age: Option<u32>,
    #[serde(default)]
    member_age: Option<u32>,
    #[serde(default)]
    rating: Option<i64>,
}

#[derive(Deserialize)]
struct UtteranceRecord {
    utterance_id: String,
    conversation_id: String,
    index: usize,
    speaker: SpeakerRole,
    #[serde(with = "timestamp")]
    timestamp: DateTime<Utc>,
    text: String,
}

/// NFC-normalizes, trims outer whitespace and escapes the context marker.
pub fn normalize_text(text: &str) -> String {
    text.nfc()
        .map(|c| if c == CONTEXT_MARKER { MARKER_ESCAPE } else { c })
        .collect::<String>()
        .trim()
        .to_string()
}

pub fn parse_corpus(path: &Path, strict: bool) -> Result<ParsedCorpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_corpus_reader(BufReader::new(file), strict).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_corpus_reader(reader: impl BufRead, strict: bool) -> Result<ParsedCorpus> {
    let mut errors = Vec::new();
    let mut reject = |line: usize, message: String| -> Result<()> {
        if strict {
            return Err(Error::Record { line, message });
        }
        errors.push(RecordError { line, message });
        Ok(())
    };

    let mut headers: BTreeMap<String, (usize, HeaderRecord)> = BTreeMap::new();
    let mut utterances: Vec<(usize, UtteranceRecord)> = Vec::new();
    let mut seen_utterances: HashSet<String> = HashSet::new();

    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                reject(lineno, format!("malformed JSON: {e}"))?;
                continue;
            }
        };
        let is_utterance = value.get("utterance_id").is_some();
        if is_utterance {
            let rec: UtteranceRecord = match serde_json::from_value(value) {
                Ok(r) => r,
                Err(e) => {
                    reject(lineno, format!("invalid utterance record: {e}"))?;
                    continue;
                }
            };
            if !seen_utterances.insert(rec.utterance_id.clone()) {
                reject(lineno, format!("duplicate utterance_id {:?}", rec.utterance_id))?;
                continue;
            }
            utterances.push((lineno, rec));
        } else {
            let rec: HeaderRecord = match serde_json::from_value(value) {
                Ok(r) => r,
                Err(e) => {
                    reject(lineno, format!("invalid conversation record: {e}"))?;
                    continue;
                }
            };
            if let Some(r) = rec.rating {
                if let Err(e) = Rating::new(r) {
                    reject(lineno, e.to_string())?;
                    continue;
                }
            }
            if headers.contains_key(&rec.conversation_id) {
                reject(
                    lineno,
                    format!("duplicate conversation_id {:?}", rec.conversation_id),
                )?;
                continue;
            }
            headers.insert(rec.conversation_id.clone(), (lineno, rec));
        }
    }

    let mut grouped: BTreeMap<String, Vec<(usize, UtteranceRecord)>> = BTreeMap::new();
    for (lineno, u) in utterances {
        if !headers.contains_key(&u.conversation_id) {
            reject(
                lineno,
                format!("utterance references unknown conversation {:?}", u.conversation_id),
            )?;
            continue;
        }
        grouped.entry(u.conversation_id.clone()).or_default().push((lineno, u));
    }

    let mut conversations = Vec::with_capacity(headers.len());
    for (id, (_, h)) in headers {
        let mut records = grouped.remove(&id).unwrap_or_default();
        records.sort_by_key(|(lineno, u)| (u.index, *lineno));
        let mut kept: Vec<Utterance> = Vec::with_capacity(records.len());
        for (lineno, u) in records {
            let text = normalize_text(&u.text);
            if text.is_empty() {
                reject(lineno, "utterance text is empty".to_string())?;
                continue;
            }
            if let Some(prev) = kept.last() {
                if prev.index == u.index {
                    reject(lineno, format!("duplicate index {} in conversation {id:?}", u.index))?;
                    continue;
                }
                if u.timestamp < prev.timestamp {
                    reject(
                        lineno,
                        format!("timestamp decreases at index {} in conversation {id:?}", u.index),
                    )?;
                    continue;
                }
            }
            kept.push(Utterance {
                utterance_id: u.utterance_id,
                conversation_id: u.conversation_id,
                index: u.index,
                speaker: u.speaker,
                timestamp: u.timestamp,
                text,
            });
        }
        conversations.push(Conversation {
            conversation_id: h.conversation_id,
            listener_id: h.listener_id,
            member_id: h.member_id,
            listener_age: h.listener_age,
            member_age: h.member_age,
            rating: h.rating.map(|r| Rating::new(r).expect("validated above")),
            utterances: kept,
        });
    }

    errors.sort_by_key(|e| e.line);
    Ok(ParsedCorpus {
        corpus: Corpus::new(conversations),
        errors,
    })
}

/// Writes a corpus in the transcript format: each header followed by its utterances.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_corpus_to(corpus, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_corpus_to(corpus: &Corpus, w: &mut impl Write) -> std::io::Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        conversation_id: &'a str,
        listener_id: &'a str,
        member_id: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        listener_age: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        member_age: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        rating: Option<u8>,
    }
    for c in corpus.conversations() {
        let header = Header {
            conversation_id: &c.conversation_id,
            listener_id: &c.listener_id,
            member_id: &c.member_id,
            listener_age: c.listener_age,
            member_age: c.member_age,
            rating: c.rating.map(Rating::get),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for u in &c.utterances {
            serde_json::to_writer(&mut *w, u)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// A target utterance with up to `k` preceding utterances prepended.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualUtterance {
    pub target: Utterance,
    pub k: usize,
    pub context_text: String,
}

pub fn build_context(conversation: &Conversation, index: usize, k: usize) -> Result<ContextualUtterance> {
    let len = conversation.utterances.len();
    if index >= len {
        return Err(Error::InvalidIndex {
            conversation_id: conversation.conversation_id.clone(),
            index,
            len,
        });
    }
    let start = index - k.min(index);
    let window = &conversation.utterances[start..=index];
    let context_text = if window.len() == 1 {
        window[0].text.clone()
    } else {
        window
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(CONTEXT_JOIN)
    };
    Ok(ContextualUtterance {
        target: conversation.utterances[index].clone(),
        k,
        context_text,
    })
}

/// Listeners whose listener-utterance span is at least `min_span` and who took
/// part in at least `min_sessions` distinct conversations.
pub fn filter_active_listeners(
    corpus: &Corpus,
    min_span: Duration,
    min_sessions: usize,
) -> BTreeSet<String> {
    struct Activity {
        first: Option<DateTime<Utc>>,
        last: Option<DateTime<Utc>>,
        sessions: usize,
    }
    let mut by_listener: HashMap<&str, Activity> = HashMap::new();
    for c in corpus.conversations() {
        let a = by_listener.entry(&c.listener_id).or_insert(Activity {
            first: None,
            last: None,
            sessions: 0,
        });
        a.sessions += 1;
        for (_, u) in c.listener_utterances() {
            a.first = Some(a.first.map_or(u.timestamp, |f| f.min(u.timestamp)));
            a.last = Some(a.last.map_or(u.timestamp, |l| l.max(u.timestamp)));
        }
    }
    by_listener
        .into_iter()
        .filter(|(_, a)| {
            let span = match (a.first, a.last) {
                (Some(f), Some(l)) => l - f,
                _ => Duration::zero(),
            };
            span >= min_span && a.sessions >= min_sessions
        })
        .map(|(id, _)| id.to_string())
        .collect()
}

pub fn filter_min_length(corpus: &Corpus, min_utterances: usize) -> Corpus {
    corpus.filtered(|c| c.utterances.len() >= min_utterances)
}

/// Cohort used by the tenure and correlation analyses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub min_span_days: i64,
    pub min_sessions: usize,
    pub min_utterances: usize,
}

impl Default for Cohort {
    fn default() -> Self {
        Cohort {
            min_span_days: 365,
            min_sessions: 500,
            min_utterances: 50,
        }
    }
}

impl Cohort {
    pub const NONE: Cohort = Cohort {
        min_span_days: 0,
        min_sessions: 0,
        min_utterances: 0,
    };

    /// Conversations of active listeners that are long enough. Activity is judged on the full corpus.
    pub fn apply(&self, corpus: &Corpus) -> Corpus {
        let active = filter_active_listeners(corpus, Duration::days(self.min_span_days), self.min_sessions);
        corpus.filtered(|c| active.contains(&c.listener_id) && c.utterances.len() >= self.min_utterances)
    }
}

/// Experience interval since a listener's first utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TenureBucket {
    M0to1,
    M1to6,
    M6to12,
    Y1plus,
}

impl TenureBucket {
    pub const ALL: [TenureBucket; 4] = [
        TenureBucket::M0to1,
        TenureBucket::M1to6,
        TenureBucket::M6to12,
        TenureBucket::Y1plus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TenureBucket::M0to1 => "M0to1",
            TenureBucket::M1to6 => "M1to6",
            TenureBucket::M6to12 => "M6to12",
            TenureBucket::Y1plus => "Y1plus",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Buckets are lower-inclusive at 30, 180 and 365 days.
pub fn tenure_bucket(first_utterance: DateTime<Utc>, at: DateTime<Utc>) -> Result<TenureBucket> {
    let secs = (at - first_utterance).num_seconds();
    if secs < 0 {
        return Err(Error::NegativeTenure(-secs));
    }
    Ok(if secs < MONTH_SECS {
        TenureBucket::M0to1
    } else if secs < HALF_YEAR_SECS {
        TenureBucket::M1to6
    } else if secs < YEAR_SECS {
        TenureBucket::M6to12
    } else {
        TenureBucket::Y1plus
    })
}

/// First listener-utterance timestamp per listener.
pub fn listener_join_times(corpus: &Corpus) -> HashMap<String, DateTime<Utc>> {
    let mut joins: HashMap<String, DateTime<Utc>> = HashMap::new();
    for c in corpus.conversations() {
        for (_, u) in c.listener_utterances() {
            joins
                .entry(c.listener_id.clone())
                .and_modify(|t| *t = (*t).min(u.timestamp))
                .or_insert(u.timestamp);
        }
    }
    joins
}

pub(crate) mod timestamp {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn format(t: &DateTime<Utc>) -> String {
        t.to_rfc3339_opts(SecondsFormat::Secs, true)
    }

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&format(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

pub use timestamp::format as format_timestamp;

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(secs: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_577_836_800 + secs, 0).unwrap()
    }

    fn utt(conv: &str, i: usize, speaker: SpeakerRole, text: &str, t: i64) -> Utterance {
        Utterance {
            utterance_id: format!("{conv}-{i}"),
            conversation_id: conv.to_string(),
            index: i,
            speaker,
            timestamp: ts(t),
            text: text.to_string(),
        }
    }

    fn conv(id: &str, listener: &str, utts: Vec<Utterance>) -> Conversation {
        Conversation {
            conversation_id: id.to_string(),
            listener_id: listener.to_string(),
            member_id: "m1".to_string(),
            listener_age: Some(30),
            member_age: Some(25),
            rating: Some(Rating::new(5).unwrap()),
            utterances: utts,
        }
    }

    #[test]
    fn binarize() {
        assert_eq!(binarize_rating(4).unwrap(), SatisfactionClass::Satisfactory);
        assert_eq!(binarize_rating(5).unwrap(), SatisfactionClass::Satisfactory);
        for r in 1..=3 {
            assert_eq!(binarize_rating(r).unwrap(), SatisfactionClass::Unsatisfactory);
        }
        assert!(binarize_rating(0).is_err());
        assert!(binarize_rating(6).is_err());
    }

    #[test]
    fn context_examples() {
        let c = conv(
            "c1",
            "l1",
            vec![
                utt("c1", 0, SpeakerRole::Member, "hi", 0),
                utt("c1", 1, SpeakerRole::Listener, "hello", 10),
            ],
        );
        assert_eq!(build_context(&c, 1, 0).unwrap().context_text, "hello");
        assert_eq!(build_context(&c, 1, 1).unwrap().context_text, "hi ⟂ hello");
        assert_eq!(build_context(&c, 0, 5).unwrap().context_text, "hi");
        assert!(matches!(
            build_context(&c, 2, 0),
            Err(Error::InvalidIndex { index: 2, len: 2, .. })
        ));
    }

    #[test]
    fn marker_is_escaped_at_ingestion() {
        assert_eq!(normalize_text("  a ⟂ b \n"), "a ⊥ b");
        // NFC: e + combining acute -> é
        assert_eq!(normalize_text("e\u{301}"), "\u{e9}");
    }

    #[test]
    fn tenure_boundaries() {
        let day = 86_400;
        let b = |d: i64| tenure_bucket(ts(0), ts(d * day)).unwrap();
        assert_eq!(b(15), TenureBucket::M0to1);
        assert_eq!(b(29), TenureBucket::M0to1);
        assert_eq!(b(30), TenureBucket::M1to6);
        assert_eq!(b(179), TenureBucket::M1to6);
        assert_eq!(b(180), TenureBucket::M6to12);
        assert_eq!(b(364), TenureBucket::M6to12);
        assert_eq!(b(365), TenureBucket::Y1plus);
        assert_eq!(b(400), TenureBucket::Y1plus);
        assert!(matches!(tenure_bucket(ts(10), ts(0)), Err(Error::NegativeTenure(10))));
    }

    fn listener_corpus(sessions: usize, span_days: i64) -> Corpus {
        let convs = (0..sessions)
            .map(|i| {
                let t = if sessions > 1 {
                    span_days * 86_400 * i as i64 / (sessions as i64 - 1)
                } else {
                    0
                };
                let id = format!("c{i:05}");
                conv(&id, "l1", vec![utt(&id, 0, SpeakerRole::Listener, "hello", t)])
            })
            .collect();
        Corpus::new(convs)
    }

    #[test]
    fn active_listener_thresholds() {
        let keep = |sessions, days| {
            !filter_active_listeners(&listener_corpus(sessions, days), Duration::days(365), 500)
                .is_empty()
        };
        assert!(keep(600, 400));
        assert!(!keep(600, 200));
        assert!(!keep(499, 730));
        assert!(keep(500, 365));
    }

    #[test]
    fn min_length_boundary() {
        let mk = |id: &str, n: usize| {
            conv(
                id,
                "l1",
                (0..n).map(|i| utt(id, i, SpeakerRole::Listener, "x", i as i64)).collect(),
            )
        };
        let corpus = Corpus::new(vec![mk("a", 49), mk("b", 50)]);
        let kept = filter_min_length(&corpus, 50);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept.conversations()[0].conversation_id, "b");
    }

    #[test]
    fn parse_skips_bad_records_and_reports_them() {
        let input = r#"{"conversation_id":"c2","listener_id":"l1","member_id":"m1","rating":4}
{"conversation_id":"c1","listener_id":"l1","member_id":"m2","listener_age":30}
{"conversation_id":"c3","listener_id":"l1","member_id":"m2","rating":6}
{"utterance_id":"u1","conversation_id":"c1","index":0,"speaker":"member","timestamp":"2020-01-01T00:00:00Z","text":"hi"}
{"utterance_id":"u2","conversation_id":"c1","index":1,"speaker":"listener","timestamp":"2020-01-01T00:00:10Z","text":"hello"}
{"utterance_id":"u2","conversation_id":"c1","index":2,"speaker":"listener","timestamp":"2020-01-01T00:00:20Z","text":"dup"}
{"utterance_id":"u3","conversation_id":"c2","index":0,"speaker":"listener","timestamp":"2020-01-01T00:00:00Z","text":"   "}
not json
"#;
        let parsed = parse_corpus_reader(input.as_bytes(), false).unwrap();
        assert_eq!(parsed.corpus.len(), 2);
        assert_eq!(parsed.corpus.conversations()[0].conversation_id, "c1");
        assert_eq!(parsed.corpus.conversations()[0].utterances.len(), 2);
        assert_eq!(parsed.skipped(), 4);
        let lines: Vec<_> = parsed.errors.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![3, 6, 7, 8]);

        let strict = parse_corpus_reader(input.as_bytes(), true);
        assert!(matches!(strict, Err(Error::Record { line: 3, .. })));
    }

    #[test]
    fn write_then_parse_is_identity() {
        let c = conv(
            "c1",
            "l1",
            vec![
                utt("c1", 0, SpeakerRole::Member, "hi", 0),
                utt("c1", 1, SpeakerRole::Listener, "hello there", 10),
            ],
        );
        let corpus = Corpus::new(vec![c.clone()]);
        let mut buf = Vec::new();
        write_corpus_to(&corpus, &mut buf).unwrap();
        let parsed = parse_corpus_reader(buf.as_slice(), true).unwrap();
        assert_eq!(parsed.corpus.conversations(), &[c]);
    }

    #[test]
    fn unrestricted_filter_returns_every_listener() {
        let corpus = Corpus::new(vec![
            conv("a", "l1", vec![utt("a", 0, SpeakerRole::Listener, "x", 0)]),
            conv("b", "l2", vec![utt("b", 0, SpeakerRole::Member, "y", 0)]),
        ]);
        let all = filter_active_listeners(&corpus, Duration::zero(), 0);
        assert_eq!(all, corpus.listener_ids());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn context_window_shape(texts in proptest::collection::vec("[a-z ]{1,12}", 1..12), k in 0usize..7) {
                let texts: Vec<String> = texts.into_iter().map(|t| format!("w{t}")).collect();
                let c = conv("c", "l", texts.iter().enumerate().map(|(i, t)| {
                    utt("c", i, if i % 2 == 0 { SpeakerRole::Member } else { SpeakerRole::Listener }, &normalize_text(t), i as i64)
                }).collect());
                for i in 0..texts.len() {
                    let k0 = build_context(&c, i, 0).unwrap();
                    prop_assert_eq!(&k0.context_text, &c.utterances[i].text);
                    let cu = build_context(&c, i, k).unwrap();
                    let markers = cu.context_text.chars().filter(|&ch| ch == CONTEXT_MARKER).count();
                    prop_assert_eq!(markers, k.min(i));
                    prop_assert_eq!(cu.context_text.split(CONTEXT_JOIN).count(), k.min(i) + 1);
                }
            }

            #[test]
            fn tenure_is_monotone(a in 0i64..1000 * 86_400, b in 0i64..1000 * 86_400) {
                let (lo, hi) = (a.min(b), a.max(b));
                prop_assert!(tenure_bucket(ts(0), ts(lo)).unwrap() <= tenure_bucket(ts(0), ts(hi)).unwrap());
            }
        }
    }
}
