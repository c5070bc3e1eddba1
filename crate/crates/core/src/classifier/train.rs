use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::eval::{evaluate_features, EvalReport};
use super::features::{featurize, FeatureVector};
use super::model::{hash_training_set, train_on_features, CodeClassifier, Hyper};
use super::registry::{labels_from_scores, ModelMeta, ModelRegistry};
use crate::codes::{CodeSet, MiCode};
use crate::corpus::{build_context, ContextualUtterance, Corpus};
use crate::error::{Error, Result};
use crate::labels::{resolve_labels, LabelMap, LabelRecord, Source, MAX_CODES};

pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub cu: ContextualUtterance,
    pub codes: CodeSet,
}

/// Listener utterances that have a resolved label, in corpus order.
pub fn labeled_examples(corpus: &Corpus, labels: &LabelMap, k: usize) -> Result<Vec<LabeledExample>> {
    let mut out = Vec::new();
    for conv in corpus.conversations() {
        for (i, u) in conv.listener_utterances() {
            if let Some(&codes) = labels.get(&u.utterance_id) {
                out.push(LabeledExample {
                    cu: build_context(conv, i, k)?,
                    codes,
                });
            }
        }
    }
    Ok(out)
}

/// Seeded stratified split: within each class, `round(TEST_FRACTION * n)` items go to test.
///
/// The permutation depends only on the seed, the code and the label vector, so
/// the same utterances are held out at every context size.
pub fn stratified_split(labels: &[bool], code: MiCode, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ ((code.index() as u64) << 40));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in [true, false] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * TEST_FRACTION).round() as usize;
        let n_test = if n_test == idx.len() { n_test.saturating_sub(1) } else { n_test };
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

#[derive(Debug, Clone)]
pub struct TrainedCode {
    pub model: CodeClassifier,
    pub eval: EvalReport,
}

/// Trains one model per code on an 80/20 split and evaluates it on the held-out part.
///
/// Codes are trained in parallel; each trainer only reads the shared features.
pub fn train_codes(
    examples: &[LabeledExample],
    codes: &[MiCode],
    k: usize,
    hyper: Hyper,
    eval_threshold: f64,
) -> Result<Vec<TrainedCode>> {
    let features: Vec<FeatureVector> = examples.par_iter().map(|e| featurize(&e.cu.context_text)).collect();
    codes
        .par_iter()
        .map(|&code| {
            let y: Vec<bool> = examples.iter().map(|e| e.codes.contains(code)).collect();
            let (train, test) = stratified_split(&y, code, hyper.seed);
            let train_fv: Vec<FeatureVector> = train.iter().map(|&i| features[i].clone()).collect();
            let train_y: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let hash = hash_training_set(train.iter().map(|&i| (examples[i].cu.context_text.as_str(), y[i])));
            let model = train_on_features(&train_fv, &train_y, code, k, hyper, hash)?;
            let test_set: Vec<(&FeatureVector, bool)> = test.iter().map(|&i| (&features[i], y[i])).collect();
            let eval = evaluate_features(&model, &test_set, eval_threshold);
            Ok(TrainedCode { model, eval })
        })
        .collect()
}

/// Trains `codes` at `k` on human labels only (consensus first) and installs the models.
pub fn retrain(
    registry: &mut ModelRegistry,
    corpus: &Corpus,
    records: &[LabelRecord],
    codes: &[MiCode],
    k: usize,
    hyper: Hyper,
    eval_threshold: f64,
    trained_at: Option<chrono::DateTime<chrono::Utc>>,
) -> Result<Vec<EvalReport>> {
    let labels = resolve_labels(records.iter().filter(|r| r.source.is_human()));
    let examples = labeled_examples(corpus, &labels, k)?;
    if examples.is_empty() {
        return Err(Error::Insufficient("no human-labeled listener utterances in the corpus".into()));
    }
    let trained = train_codes(&examples, codes, k, hyper, eval_threshold)?;
    let mut evals = Vec::with_capacity(trained.len());
    for t in trained {
        let meta = ModelMeta {
            trained_at,
            training_set_hash: t.model.training_set_hash.clone(),
            eval: Some(t.eval.clone()),
        };
        registry.insert_native(t.model, meta);
        evals.push(t.eval);
    }
    Ok(evals)
}

/// Reduces a thresholded prediction to a storable label set of 1 to 3 codes.
///
/// Keeps the three most confident codes; when nothing clears the threshold the
/// single most probable code is used.
pub fn storable_codes(row: &super::registry::ScoreRow, threshold: f64) -> Vec<(MiCode, f64)> {
    let set = labels_from_scores(row, threshold);
    let mut picked: Vec<(MiCode, f64)> = set.confidence.into_iter().collect();
    if picked.is_empty() {
        let best = MiCode::ALL
            .iter()
            .filter_map(|&c| row[c.index()].map(|p| (c, p)))
            .fold(None, |acc: Option<(MiCode, f64)>, (c, p)| match acc {
                Some((_, bp)) if bp >= p => acc,
                _ => Some((c, p)),
            });
        picked.extend(best);
    }
    picked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    picked.truncate(MAX_CODES);
    picked.sort_by_key(|&(c, _)| c);
    picked
}

/// Labels every listener utterance in the corpus with the registry's models at `k`.
pub fn label_corpus(
    registry: &ModelRegistry,
    corpus: &Corpus,
    k: usize,
    threshold: f64,
    model_id: &str,
    decided_at: chrono::DateTime<chrono::Utc>,
) -> Result<Vec<LabelRecord>> {
    const CHUNK: usize = 8192;
    registry.require_all_codes(k)?;
    let mut items = Vec::new();
    for conv in corpus.conversations() {
        for (i, _) in conv.listener_utterances() {
            items.push((conv, i));
        }
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(CHUNK) {
        let batch: Vec<ContextualUtterance> = chunk
            .iter()
            .map(|&(conv, i)| build_context(conv, i, k))
            .collect::<Result<_>>()?;
        let rows = registry.score_batch(k, &batch)?;
        for (cu, row) in batch.iter().zip(&rows) {
            let picked = storable_codes(row, threshold);
            out.push(LabelRecord {
                utterance_id: cu.target.utterance_id.clone(),
                source: Source::Model(model_id.to_string()),
                codes: picked.iter().map(|&(c, _)| c).collect(),
                confidence: Some(picked.into_iter().collect()),
                decided_at,
            });
        }
    }
    Ok(out)
}
