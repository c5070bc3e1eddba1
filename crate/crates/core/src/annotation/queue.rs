use std::collections::HashSet;

use chrono::{DateTime, Utc};
use serde::Serialize;

use crate::classifier::{ModelRegistry, ScoreRow};
use crate::codes::MiCode;
use crate::corpus::{build_context, ContextualUtterance, Corpus};
use crate::error::{Error, Result};
use crate::labels::{LabelRecord, Source, MAX_CODES};

pub const SUGGEST_THRESHOLD: f64 = 0.7;
pub const SUGGEST_K: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Suggestion {
    pub code: MiCode,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuggestionItem {
    pub utterance_id: String,
    pub conversation_id: String,
    pub text: String,
    pub context: String,
    pub suggestions: Vec<Suggestion>,
    pub max_confidence: f64,
}

/// Builds queue items from precomputed scores.
///
/// Items without any code at or above `threshold` are dropped; the rest are
/// ordered by descending maximum confidence, then utterance id.
pub fn suggest_from_scores(items: &[ContextualUtterance], rows: &[ScoreRow], threshold: f64) -> Vec<SuggestionItem> {
    let mut out: Vec<SuggestionItem> = items
        .iter()
        .zip(rows)
        .filter_map(|(cu, row)| {
            let suggestions: Vec<Suggestion> = MiCode::ALL
                .iter()
                .filter_map(|&code| {
                    row[code.index()]
                        .filter(|&p| p >= threshold)
                        .map(|confidence| Suggestion { code, confidence })
                })
                .collect();
            let max_confidence = suggestions.iter().map(|s| s.confidence).fold(f64::NAN, f64::max);
            (!suggestions.is_empty()).then(|| SuggestionItem {
                utterance_id: cu.target.utterance_id.clone(),
                conversation_id: cu.target.conversation_id.clone(),
                text: cu.target.text.clone(),
                context: cu.context_text.clone(),
                suggestions,
                max_confidence,
            })
        })
        .collect();
    out.sort_by(|a, b| {
        b.max_confidence
            .total_cmp(&a.max_confidence)
            .then_with(|| a.utterance_id.cmp(&b.utterance_id))
    });
    out
}

/// Scores `unlabeled` with the registry's models at `k` and keeps confident items.
pub fn suggest(
    registry: &ModelRegistry,
    unlabeled: &[ContextualUtterance],
    threshold: f64,
    k: usize,
) -> Result<Vec<SuggestionItem>> {
    if unlabeled.is_empty() {
        return Ok(Vec::new());
    }
    registry.require_all_codes(k)?;
    let rows = registry.score_batch(k, unlabeled)?;
    Ok(suggest_from_scores(unlabeled, &rows, threshold))
}

/// Utterance ids carrying a human label, optionally only from one annotator.
pub fn verified_utterances<'a>(
    records: impl IntoIterator<Item = &'a LabelRecord>,
    annotator: Option<&str>,
) -> HashSet<String> {
    records
        .into_iter()
        .filter(|r| match (&r.source, annotator) {
            (Source::Human(who), Some(a)) => who == a,
            (Source::Human(_), None) => true,
            _ => false,
        })
        .map(|r| r.utterance_id.clone())
        .collect()
}

/// Contexts of listener utterances not in `verified`, in corpus order.
pub fn unverified_contexts(corpus: &Corpus, verified: &HashSet<String>, k: usize) -> Result<Vec<ContextualUtterance>> {
    let mut out = Vec::new();
    for conv in corpus.conversations() {
        for (i, u) in conv.listener_utterances() {
            if !verified.contains(&u.utterance_id) {
                out.push(build_context(conv, i, k)?);
            }
        }
    }
    Ok(out)
}

/// Builds the human record for an annotator's decision on one utterance.
pub fn record_decision(
    corpus: &Corpus,
    utterance_id: &str,
    annotator_id: &str,
    codes: &[MiCode],
    decided_at: DateTime<Utc>,
) -> Result<LabelRecord> {
    if codes.len() > MAX_CODES {
        return Err(Error::TooManyCodes);
    }
    if annotator_id.is_empty() {
        return Err(Error::Invalid("annotator_id is required".into()));
    }
    if corpus.utterance(utterance_id).is_none() {
        return Err(Error::UnknownUtterance(utterance_id.to_string()));
    }
    let record = LabelRecord {
        utterance_id: utterance_id.to_string(),
        source: Source::Human(annotator_id.to_string()),
        codes: codes.to_vec(),
        confidence: None,
        decided_at,
    };
    record.validate()?;
    Ok(record)
}
