//! HTTP+JSON service for the annotation loop and the analysis reports.

pub mod error;
pub mod jobs;
pub mod state;

use std::collections::HashSet;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use miscope_core::annotation::{agreement_report, record_decision, suggest_from_scores, verified_utterances, AppendOutcome};
use miscope_core::classifier::ModelRegistry;
use miscope_core::corpus::{build_context, listener_join_times, Cohort};
use miscope_core::labels::MAX_CODES;
use miscope_core::satisfaction::{analyze, build_design, satisfaction_json, satisfaction_table, PastRatingMode};
use miscope_core::trends::{code_fraction_with_joins, TopWordsIndex};
use miscope_core::{Error, MiCode};
use serde::Deserialize;
use serde_json::{json, Value};

pub use error::{ApiError, ServiceError};
pub use jobs::{Job, JobStatus};
pub use state::{AppState, ScoreCache, ServiceConfig};

pub const ANNOTATOR_HEADER: &str = "x-annotator-id";
const DEFAULT_QUEUE_LIMIT: usize = 20;
const MAX_PAGE: usize = 1000;

type ApiResult<T = Response> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/conversations", get(list_conversations))
        .route("/conversations/{id}", get(get_conversation))
        .route("/queue", get(queue))
        .route("/labels", post(post_label))
        .route("/train", post(post_train))
        .route("/train/{job_id}", get(get_train))
        .route("/agreement", get(agreement))
        .route("/analysis/satisfaction", get(satisfaction))
        .route("/analysis/trends", get(trends))
        .route("/analysis/topwords", get(topwords))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

/// Opens the store, binds, prints `listening on http://ADDR` and serves until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind { addr: addr.clone(), source })?;
    let local = listener
        .local_addr()
        .map_err(|source| ServiceError::Bind { addr, source })?;
    println!("listening on http://{local}");
    use std::io::Write;
    let _ = std::io::stdout().flush();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|source| ServiceError::Serve { addr: local, source })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(ApiError::internal)?
        .map_err(ApiError::from)
}

async fn healthz(State(s): State<Arc<AppState>>) -> Json<Value> {
    let snap = s.snapshot();
    let reg = s.registry();
    Json(json!({
        "status": "ok",
        "conversations": s.corpus.len(),
        "records": snap.records.len(),
        "registry_version": reg.version(),
        "models": reg.entries().count(),
        "suggest_threshold": s.config.suggest_threshold,
        "k": s.config.k,
    }))
}

#[derive(Deserialize)]
struct Page {
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_conversations(State(s): State<Arc<AppState>>, q: Result<Query<Page>, QueryRejection>) -> ApiResult<Json<Value>> {
    let Query(page) = q?;
    let snap = s.snapshot();
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(100).min(MAX_PAGE);
    let items: Vec<Value> = s
        .corpus
        .conversations()
        .iter()
        .skip(offset)
        .take(limit)
        .map(|c| {
            let listener: Vec<_> = c.listener_utterances().collect();
            let labeled = listener.iter().filter(|(_, u)| snap.labels.contains_key(&u.utterance_id)).count();
            json!({
                "conversation_id": c.conversation_id,
                "listener_id": c.listener_id,
                "member_id": c.member_id,
                "rating": c.rating,
                "utterances": c.utterances.len(),
                "listener_utterances": listener.len(),
                "labeled": labeled,
            })
        })
        .collect();
    Ok(Json(json!({ "total": s.corpus.len(), "offset": offset, "conversations": items })))
}

async fn get_conversation(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let conv = s
        .corpus
        .conversation(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown conversation {id:?}")))?;
    let snap = s.snapshot();
    let utterances: Vec<Value> = conv
        .utterances
        .iter()
        .map(|u| {
            let mut v = serde_json::to_value(u).expect("utterance serializes");
            if let Some(set) = snap.labels.get(&u.utterance_id) {
                v["codes"] = json!(set.iter().collect::<Vec<_>>());
            }
            v
        })
        .collect();
    Ok(Json(json!({
        "conversation_id": conv.conversation_id,
        "listener_id": conv.listener_id,
        "member_id": conv.member_id,
        "listener_age": conv.listener_age,
        "member_age": conv.member_age,
        "rating": conv.rating,
        "utterances": utterances,
    })))
}

#[derive(Deserialize)]
struct QueueQuery {
    limit: Option<usize>,
    annotator: Option<String>,
}

/// Scores every listener utterance with the current registry, reusing the cache while the version holds.
async fn scores(s: &Arc<AppState>, registry: Arc<ModelRegistry>) -> ApiResult<Arc<ScoreCache>> {
    let mut cache = s.scores.lock().await;
    if let Some(c) = cache.as_ref() {
        if c.version == registry.version() {
            return Ok(c.clone());
        }
    }
    let state = s.clone();
    let fresh = blocking(move || {
        let k = state.config.k;
        registry.require_all_codes(k)?;
        let mut items = Vec::new();
        for conv in state.corpus.conversations() {
            for (i, _) in conv.listener_utterances() {
                items.push(build_context(conv, i, k)?);
            }
        }
        let rows = registry.score_batch(k, &items)?;
        Ok(ScoreCache {
            version: registry.version(),
            items,
            rows,
        })
    })
    .await?;
    let fresh = Arc::new(fresh);
    *cache = Some(fresh.clone());
    Ok(fresh)
}

async fn queue(State(s): State<Arc<AppState>>, q: Result<Query<QueueQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let limit = q.limit.unwrap_or(DEFAULT_QUEUE_LIMIT).min(MAX_PAGE);
    let registry = s.registry();
    let cache = scores(&s, registry.clone()).await?;
    let snap = s.snapshot();
    let verified: HashSet<String> = verified_utterances(snap.records.iter(), q.annotator.as_deref());
    let (items, rows): (Vec<_>, Vec<_>) = cache
        .items
        .iter()
        .zip(&cache.rows)
        .filter(|(cu, _)| !verified.contains(&cu.target.utterance_id))
        .map(|(cu, row)| (cu.clone(), *row))
        .unzip();
    let mut queue = suggest_from_scores(&items, &rows, s.config.suggest_threshold);
    let total = queue.len();
    queue.truncate(limit);
    Ok(Json(json!({
        "items": queue,
        "total": total,
        "model_version": cache.version,
        "threshold": s.config.suggest_threshold,
        "k": s.config.k,
    })))
}

fn annotator(headers: &HeaderMap, body: Option<&str>) -> ApiResult<String> {
    body.map(str::to_string)
        .or_else(|| {
            headers
                .get(ANNOTATOR_HEADER)
                .and_then(|v| v.to_str().ok())
                .map(str::to_string)
        })
        .filter(|a| !a.trim().is_empty())
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing_annotator", "annotator_id is required"))
}

#[derive(Deserialize)]
struct LabelBody {
    utterance_id: String,
    annotator_id: Option<String>,
    codes: Vec<String>,
}

async fn post_label(
    State(s): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<LabelBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let who = annotator(&headers, body.annotator_id.as_deref())?;
    if body.codes.len() > MAX_CODES {
        return Err(Error::TooManyCodes.into());
    }
    let codes: Vec<MiCode> = body
        .codes
        .iter()
        .map(|c| c.parse())
        .collect::<Result<_, Error>>()?;
    let record = record_decision(&s.corpus, &body.utterance_id, &who, &codes, Utc::now())?;
    let state = s.clone();
    let stored = record.clone();
    let outcome = blocking(move || state.append(stored)).await?;
    let (status, label) = match outcome {
        AppendOutcome::Appended => (StatusCode::CREATED, "appended"),
        AppendOutcome::Duplicate => (StatusCode::OK, "duplicate"),
    };
    Ok((status, Json(json!({ "status": label, "record": record }))).into_response())
}

#[derive(Deserialize)]
struct TrainBody {
    code: Option<String>,
    k: usize,
    annotator_id: Option<String>,
}

async fn post_train(
    State(s): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<TrainBody>, JsonRejection>,
) -> ApiResult {
    let Json(body) = body?;
    let who = annotator(&headers, body.annotator_id.as_deref())?;
    let code = body.code.as_deref().map(str::parse::<MiCode>).transpose()?;
    let job = jobs::submit(&s, code, body.k, who);
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn get_train(State(s): State<Arc<AppState>>, Path(job_id): Path<String>) -> ApiResult<Json<Job>> {
    s.jobs
        .lock()
        .expect("jobs lock")
        .get(&job_id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {job_id:?}")))
}

async fn agreement(State(s): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    let snap = s.snapshot();
    let report = blocking(move || Ok(agreement_report(&snap.records))).await?;
    Ok(Json(serde_json::to_value(report).expect("report serializes")))
}

#[derive(Deserialize)]
struct SatisfactionQuery {
    past_rating: Option<PastRatingMode>,
}

async fn satisfaction(
    State(s): State<Arc<AppState>>,
    q: Result<Query<SatisfactionQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let snap = s.snapshot();
    let state = s.clone();
    let out = blocking(move || {
        let design = build_design(&state.corpus, &snap.labels, q.past_rating.unwrap_or_default());
        let a = analyze(&design)?;
        let mut v = satisfaction_json(&a);
        v["table"] = Value::String(satisfaction_table(&a));
        Ok(v)
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct CohortQuery {
    min_span_days: Option<i64>,
    min_sessions: Option<usize>,
    min_utterances: Option<usize>,
}

async fn trends(State(s): State<Arc<AppState>>, q: Result<Query<CohortQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let base = s.config.cohort;
    let cohort = Cohort {
        min_span_days: q.min_span_days.unwrap_or(base.min_span_days),
        min_sessions: q.min_sessions.unwrap_or(base.min_sessions),
        min_utterances: q.min_utterances.unwrap_or(base.min_utterances),
    };
    let snap = s.snapshot();
    let state = s.clone();
    let out = blocking(move || {
        let joins = listener_join_times(&state.corpus);
        let filtered = cohort.apply(&state.corpus);
        if filtered.is_empty() {
            return Err(Error::Insufficient(format!(
                "no conversations pass the cohort filters (min_span_days={}, min_sessions={}, min_utterances={})",
                cohort.min_span_days, cohort.min_sessions, cohort.min_utterances
            )));
        }
        let series = code_fraction_with_joins(&filtered, &snap.labels, &joins)?;
        Ok(json!({ "cohort": cohort, "conversations": filtered.len(), "series": series }))
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct TopWordsQuery {
    n: Option<usize>,
}

async fn topwords(State(s): State<Arc<AppState>>, q: Result<Query<TopWordsQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let Query(q) = q?;
    let n = q.n.unwrap_or(5).min(100);
    let snap = s.snapshot();
    let state = s.clone();
    let out = blocking(move || Ok(TopWordsIndex::build(&state.corpus, &snap.labels).report(n))).await?;
    Ok(Json(serde_json::to_value(out).expect("report serializes")))
}
