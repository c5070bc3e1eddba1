use std::sync::Arc;

use chrono::Utc;
use miscope_core::classifier::{retrain, EvalReport, Hyper};
use miscope_core::corpus::format_timestamp;
use miscope_core::MiCode;
use serde::Serialize;

use crate::state::AppState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub job_id: String,
    pub status: JobStatus,
    /// Every status the job has been in, oldest first.
    pub history: Vec<JobStatus>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub code: Option<MiCode>,
    pub k: usize,
    pub requested_by: String,
    pub created_at: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub registry_version: Option<u64>,
    pub models: Vec<EvalReport>,
}

fn mark_running(state: &AppState, id: &str) {
    if let Some(job) = state.jobs.lock().expect("jobs lock").get_mut(id) {
        job.status = JobStatus::Running;
        job.history.push(JobStatus::Running);
    }
}

/// Registers a queued job and starts it in the background.
pub fn submit(state: &Arc<AppState>, code: Option<MiCode>, k: usize, requested_by: String) -> Job {
    let id = {
        let mut next = state.next_job.lock().expect("job counter");
        let id = format!("job-{:06}", *next);
        *next += 1;
        id
    };
    let job = Job {
        job_id: id.clone(),
        status: JobStatus::Queued,
        history: vec![JobStatus::Queued],
        code,
        k,
        requested_by,
        created_at: format_timestamp(&Utc::now()),
        finished_at: None,
        error: None,
        registry_version: None,
        models: Vec::new(),
    };
    state.jobs.lock().expect("jobs lock").insert(id.clone(), job.clone());

    let state = state.clone();
    tokio::spawn(async move {
        let _guard = state.train_lock.lock().await;
        mark_running(&state, &id);
        let worker = state.clone();
        let result = tokio::task::spawn_blocking(move || {
            let snapshot = worker.snapshot();
            let mut registry = (*worker.registry()).clone();
            let codes: Vec<MiCode> = match code {
                Some(c) => vec![c],
                None => MiCode::ALL.to_vec(),
            };
            let hyper = Hyper {
                seed: worker.config.seed,
                ..Hyper::default()
            };
            let evals = retrain(
                &mut registry,
                &worker.corpus,
                &snapshot.records,
                &codes,
                k,
                hyper,
                worker.config.label_threshold,
                Some(Utc::now()),
            )?;
            registry.save(&worker.config.models)?;
            let version = registry.version();
            worker.set_registry(registry);
            Ok::<_, miscope_core::Error>((evals, version))
        })
        .await;
        let now = Utc::now();
        let mut jobs = state.jobs.lock().expect("jobs lock");
        let Some(job) = jobs.get_mut(&id) else { return };
        let status = match result {
            Ok(Ok((evals, version))) => {
                job.models = evals;
                job.registry_version = Some(version);
                JobStatus::Done
            }
            Ok(Err(e)) => {
                job.error = Some(e.to_string());
                JobStatus::Failed
            }
            Err(e) => {
                job.error = Some(format!("training task failed: {e}"));
                JobStatus::Failed
            }
        };
        job.status = status;
        job.history.push(status);
        job.finished_at = Some(format_timestamp(&now));
    });
    job
}
