//! Label records and the label file format shared by ingestion, annotation and analysis.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::codes::{CodeSet, MiCode};
use crate::corpus::timestamp;
use crate::error::{Error, Result};

pub const MAX_CODES: usize = 3;
/// Annotator id of the reconciled labels agreed in disagreement-resolution meetings.
pub const CONSENSUS: &str = "consensus";

/// Who produced a label record.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    Human(String),
    Model(String),
}

impl Source {
    pub fn consensus() -> Self {
        Source::Human(CONSENSUS.to_string())
    }

    pub fn is_human(&self) -> bool {
        matches!(self, Source::Human(_))
    }

    pub fn is_consensus(&self) -> bool {
        matches!(self, Source::Human(id) if id == CONSENSUS)
    }

    pub fn id(&self) -> &str {
        match self {
            Source::Human(id) | Source::Model(id) => id,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Human(id) => write!(f, "human:{id}"),
            Source::Model(id) => write!(f, "model:{id}"),
        }
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, id) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("source {s:?} lacks a kind prefix")))?;
        if id.is_empty() {
            return Err(Error::Invalid(format!("source {s:?} has an empty id")));
        }
        match kind {
            "human" => Ok(Source::Human(id.to_string())),
            "model" => Ok(Source::Model(id.to_string())),
            _ => Err(Error::Invalid(format!("source kind {kind:?} must be human or model"))),
        }
    }
}

impl Serialize for Source {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Source {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub utterance_id: String,
    pub source: Source,
    pub codes: Vec<MiCode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<BTreeMap<MiCode, f64>>,
    #[serde(with = "timestamp")]
    pub decided_at: DateTime<Utc>,
}

impl LabelRecord {
    pub fn validate(&self) -> Result<()> {
        if self.codes.is_empty() {
            return Err(Error::NoCodes);
        }
        if self.codes.len() > MAX_CODES {
            return Err(Error::TooManyCodes);
        }
        if self.code_set().len() != self.codes.len() {
            return Err(Error::Invalid("duplicate code in label record".into()));
        }
        if let Some(conf) = &self.confidence {
            for (code, p) in conf {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Invalid(format!("confidence {p} for {code} outside [0,1]")));
                }
            }
        }
        Ok(())
    }

    pub fn code_set(&self) -> CodeSet {
        self.codes.iter().copied().collect()
    }
}

/// Resolved label set per utterance id.
pub type LabelMap = HashMap<String, CodeSet>;

pub fn read_label_file(path: &Path) -> Result<Vec<LabelRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LabelRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_label_file(path: &Path, records: &[LabelRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Invalid(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn precedence(source: &Source) -> u8 {
    match source {
        s if s.is_consensus() => 2,
        Source::Human(_) => 1,
        Source::Model(_) => 0,
    }
}

/// Collapses records to one label set per utterance.
///
/// Consensus records win, then other human records, then model records; within
/// a tier the latest `decided_at` wins, ties going to the later record in `records`.
pub fn resolve_labels<'a>(records: impl IntoIterator<Item = &'a LabelRecord>) -> LabelMap {
    let mut best: HashMap<&str, (u8, DateTime<Utc>, CodeSet)> = HashMap::new();
    for r in records {
        let key = (precedence(&r.source), r.decided_at);
        match best.get(r.utterance_id.as_str()) {
            Some(&(p, t, _)) if (p, t) > key => {}
            _ => {
                best.insert(&r.utterance_id, (key.0, key.1, r.code_set()));
            }
        }
    }
    best.into_iter()
        .map(|(id, (_, _, set))| (id.to_string(), set))
        .collect()
}
