//! Human labels: the append-only store, agreement statistics and the suggestion queue.

pub mod agreement;
pub mod alpha;
pub mod queue;
pub mod store;

use crate::codes::MiCode;
use crate::corpus::Corpus;
use crate::error::Result;
use crate::labels::{resolve_labels, LabelRecord};

pub use agreement::{agreement_report, validation_sample, AgreementReport, CodeAgreement, ValidationReport};
pub use alpha::{krippendorff_alpha, AlphaResult, ReliabilityMatrix};
pub use queue::{
    record_decision, suggest, suggest_from_scores, unverified_contexts, verified_utterances, Suggestion,
    SuggestionItem, SUGGEST_K, SUGGEST_THRESHOLD,
};
pub use store::{AppendOutcome, LabelStore};

/// `(context_text, is_positive)` pairs for one code, from human labels with consensus precedence.
pub fn export_training_set(
    corpus: &Corpus,
    records: &[LabelRecord],
    code: MiCode,
    k: usize,
) -> Result<Vec<(String, bool)>> {
    let labels = resolve_labels(records.iter().filter(|r| r.source.is_human()));
    Ok(crate::classifier::labeled_examples(corpus, &labels, k)?
        .into_iter()
        .map(|e| (e.cu.context_text, e.codes.contains(code)))
        .collect())
}
