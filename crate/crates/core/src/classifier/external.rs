//! Adapter for models served over HTTP.
//!
//! `POST {endpoint}/predict` with `{k, items: [{utterance_id, context_text}]}`
//! answers `{items: [{utterance_id, scores: {code: probability}}]}` in request order.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codes::MiCode;
use crate::corpus::ContextualUtterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalModelRef {
    /// Base URL, e.g. `http://127.0.0.1:9000`.
    pub endpoint: String,
    pub model_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub k: usize,
    pub items: Vec<PredictItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictItem {
    pub utterance_id: String,
    pub context_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictResponse {
    pub items: Vec<ScoredItem>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredItem {
    pub utterance_id: String,
    pub scores: BTreeMap<String, f64>,
}

pub type CodeScores = BTreeMap<MiCode, f64>;

/// Scores a batch on an external endpoint; results are aligned with `batch`.
pub fn external_predict(endpoint: &ExternalModelRef, batch: &[ContextualUtterance]) -> Result<Vec<CodeScores>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let k = batch[0].k;
    if let Some(cu) = batch.iter().find(|cu| cu.k != k) {
        return Err(Error::ContextMismatch { model: k, input: cu.k });
    }
    let request = PredictRequest {
        k,
        items: batch
            .iter()
            .map(|cu| PredictItem {
                utterance_id: cu.target.utterance_id.clone(),
                context_text: cu.context_text.clone(),
            })
            .collect(),
    };
    let agent = ureq::AgentBuilder::new()
        .timeout(Duration::from_millis(endpoint.timeout_ms))
        .build();
    let url = format!("{}/predict", endpoint.endpoint.trim_end_matches('/'));
    let response = agent.post(&url).send_json(&request).map_err(|e| match e {
        ureq::Error::Status(code, _) => Error::External {
            message: format!("{url} answered HTTP {code}"),
            retriable: code >= 500 || code == 429,
        },
        ureq::Error::Transport(t) => Error::External {
            message: format!("{url}: {t}"),
            retriable: true,
        },
    })?;
    let body: PredictResponse = response
        .into_json()
        .map_err(|e| Error::Protocol(format!("malformed response body: {e}")))?;
    validate_response(&request, body)
}

fn validate_response(request: &PredictRequest, body: PredictResponse) -> Result<Vec<CodeScores>> {
    if body.items.len() != request.items.len() {
        return Err(Error::Protocol(format!(
            "expected {} items, got {}",
            request.items.len(),
            body.items.len()
        )));
    }
    request
        .items
        .iter()
        .zip(body.items)
        .map(|(req, got)| {
            if req.utterance_id != got.utterance_id {
                return Err(Error::Protocol(format!(
                    "item order mismatch: expected {:?}, got {:?}",
                    req.utterance_id, got.utterance_id
                )));
            }
            got.scores
                .into_iter()
                .map(|(name, p)| {
                    let code: MiCode = name
                        .parse()
                        .map_err(|_| Error::Protocol(format!("unknown code {name:?}")))?;
                    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                        return Err(Error::Protocol(format!(
                            "probability {p} for {name} outside [0,1]"
                        )));
                    }
                    Ok((code, p))
                })
                .collect()
        })
        .collect()
}
