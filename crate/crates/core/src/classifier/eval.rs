use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use super::model::CodeClassifier;
use crate::codes::MiCode;

/// Positive-class metrics with the confusion counts they were derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub code: MiCode,
    pub k: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

impl EvalReport {
    pub fn from_counts(code: MiCode, k: usize, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        EvalReport {
            code,
            k,
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
            support: tp + fn_,
        }
    }

    /// Builds a report from `(predicted, actual)` pairs.
    pub fn from_predictions(code: MiCode, k: usize, pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (pred, actual) in pairs {
            match (pred, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        EvalReport::from_counts(code, k, tp, fp, fn_, tn)
    }
}

/// Evaluates a model on featurized test examples at the given decision threshold.
pub fn evaluate_features(
    model: &CodeClassifier,
    test: &[(&FeatureVector, bool)],
    threshold: f64,
) -> EvalReport {
    EvalReport::from_predictions(
        model.code,
        model.k,
        test.iter().map(|(fv, y)| (model.predict_features(fv) >= threshold, *y)),
    )
}
