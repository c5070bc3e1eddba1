use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use miscope_core::annotation::{LabelStore, SUGGEST_K, SUGGEST_THRESHOLD};
use miscope_core::classifier::{ModelRegistry, ScoreRow};
use miscope_core::corpus::{parse_corpus, Cohort, ContextualUtterance, Corpus};
use miscope_core::labels::{resolve_labels, LabelMap, LabelRecord};
use miscope_core::{Error, Result};

use crate::jobs::Job;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub corpus: PathBuf,
    /// Label store directory.
    pub store: PathBuf,
    pub models: PathBuf,
    pub host: String,
    pub port: u16,
    pub suggest_threshold: f64,
    pub label_threshold: f64,
    /// Context size used to score the queue.
    pub k: usize,
    pub seed: u64,
    pub cohort: Cohort,
    pub strict: bool,
}

impl ServiceConfig {
    pub fn new(corpus: impl Into<PathBuf>, store: impl Into<PathBuf>, models: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            corpus: corpus.into(),
            store: store.into(),
            models: models.into(),
            host: "127.0.0.1".into(),
            port: 8080,
            suggest_threshold: SUGGEST_THRESHOLD,
            label_threshold: 0.5,
            k: SUGGEST_K,
            seed: 0,
            cohort: Cohort::default(),
            strict: false,
        }
    }
}

/// Records as of some commit, with their resolved label map.
pub struct Snapshot {
    pub records: Arc<Vec<LabelRecord>>,
    pub labels: Arc<LabelMap>,
}

impl Snapshot {
    fn of(records: Vec<LabelRecord>) -> Self {
        let labels = resolve_labels(&records);
        Snapshot {
            records: Arc::new(records),
            labels: Arc::new(labels),
        }
    }
}

/// Scores of every listener utterance under one registry version.
pub struct ScoreCache {
    pub version: u64,
    pub items: Vec<ContextualUtterance>,
    pub rows: Vec<ScoreRow>,
}

pub struct AppState {
    pub config: ServiceConfig,
    pub corpus: Arc<Corpus>,
    /// Single writer: every append goes through this lock.
    pub store: Mutex<LabelStore>,
    snapshot: RwLock<Arc<Snapshot>>,
    registry: RwLock<Arc<ModelRegistry>>,
    pub scores: tokio::sync::Mutex<Option<Arc<ScoreCache>>>,
    pub jobs: Mutex<BTreeMap<String, Job>>,
    pub next_job: Mutex<u64>,
    /// Serializes training jobs; readers never take it.
    pub train_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn open(config: ServiceConfig) -> Result<Arc<Self>> {
        let store = LabelStore::open(&config.store)?;
        let parsed = parse_corpus(&config.corpus, config.strict)?;
        let registry = if config.models.join("registry.json").exists() {
            ModelRegistry::load(&config.models)?
        } else {
            ModelRegistry::new()
        };
        let snapshot = Snapshot::of(store.records().to_vec());
        Ok(Arc::new(AppState {
            config,
            corpus: Arc::new(parsed.corpus),
            store: Mutex::new(store),
            snapshot: RwLock::new(Arc::new(snapshot)),
            registry: RwLock::new(Arc::new(registry)),
            scores: tokio::sync::Mutex::new(None),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: Mutex::new(1),
            train_lock: tokio::sync::Mutex::new(()),
        }))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn registry(&self) -> Arc<ModelRegistry> {
        self.registry.read().expect("registry lock").clone()
    }

    pub fn set_registry(&self, registry: ModelRegistry) {
        *self.registry.write().expect("registry lock") = Arc::new(registry);
    }

    /// Appends under the writer lock and publishes a new snapshot before returning.
    pub fn append(&self, record: LabelRecord) -> Result<miscope_core::annotation::AppendOutcome> {
        let mut store = self.store.lock().map_err(|_| Error::Invalid("label store poisoned".into()))?;
        let outcome = store.append(record)?;
        if outcome == miscope_core::annotation::AppendOutcome::Appended {
            let next = Snapshot::of(store.records().to_vec());
            *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        }
        Ok(outcome)
    }
}
