use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::EvalReport;
use super::external::{external_predict, ExternalModelRef};
use super::features::{featurize, FeatureVector};
use super::model::{CodeClassifier, Hyper};
use crate::codes::{CodeSet, MiCode};
use crate::corpus::{timestamp, ContextualUtterance};
use crate::error::{Error, Result};

const MODEL_FORMAT: &str = "miscope-model";
const MODEL_FORMAT_VERSION: u32 = 1;
const INDEX_FILE: &str = "registry.json";

#[derive(Debug, Clone, PartialEq)]
pub enum ModelEntry {
    Native(CodeClassifier),
    External(ExternalModelRef),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelMeta {
    #[serde(default, with = "opt_timestamp", skip_serializing_if = "Option::is_none")]
    pub trained_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub training_set_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub model: ModelEntry,
    pub meta: ModelMeta,
}

/// Active model per (code, k). Inserting replaces the previous model for that key.
#[derive(Debug, Clone, Default)]
pub struct ModelRegistry {
    entries: BTreeMap<(MiCode, usize), RegistryEntry>,
    version: u64,
}

/// Codes at or above a threshold, with their probabilities.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelSet {
    pub codes: CodeSet,
    pub confidence: BTreeMap<MiCode, f64>,
}

/// Probability per code, indexed by [`MiCode::index`]; `None` where no model exists.
pub type ScoreRow = [Option<f64>; MiCode::COUNT];

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Bumped on every mutation; consumers use it to invalidate cached scores.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn insert(&mut self, code: MiCode, k: usize, entry: RegistryEntry) {
        if let ModelEntry::Native(m) = &entry.model {
            assert_eq!((m.code, m.k), (code, k), "model key mismatch");
        }
        self.entries.insert((code, k), entry);
        self.version += 1;
    }

    pub fn insert_native(&mut self, model: CodeClassifier, meta: ModelMeta) {
        let (code, k) = (model.code, model.k);
        self.insert(code, k, RegistryEntry { model: ModelEntry::Native(model), meta });
    }

    pub fn insert_external(&mut self, code: MiCode, k: usize, model: ExternalModelRef) {
        self.insert(
            code,
            k,
            RegistryEntry {
                model: ModelEntry::External(model),
                meta: ModelMeta::default(),
            },
        );
    }

    pub fn get(&self, code: MiCode, k: usize) -> Option<&RegistryEntry> {
        self.entries.get(&(code, k))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&(MiCode, usize), &RegistryEntry)> {
        self.entries.iter()
    }

    pub fn has_all_codes(&self, k: usize) -> bool {
        self.require_all_codes(k).is_ok()
    }

    pub fn require_all_codes(&self, k: usize) -> Result<()> {
        match MiCode::ALL.iter().find(|&&c| !self.entries.contains_key(&(c, k))) {
            Some(c) => Err(Error::MissingModel { code: c.name().to_string(), k }),
            None => Ok(()),
        }
    }

    pub fn context_sizes(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.entries.keys().map(|&(_, k)| k).collect();
        ks.dedup();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    /// Scores every item with every model registered at `k`.
    pub fn score_batch(&self, k: usize, items: &[ContextualUtterance]) -> Result<Vec<ScoreRow>> {
        if let Some(cu) = items.iter().find(|cu| cu.k != k) {
            return Err(Error::ContextMismatch { model: k, input: cu.k });
        }
        let mut rows: Vec<ScoreRow> = vec![[None; MiCode::COUNT]; items.len()];
        let native: Vec<&CodeClassifier> = self
            .entries
            .iter()
            .filter(|((_, kk), _)| *kk == k)
            .filter_map(|(_, e)| match &e.model {
                ModelEntry::Native(m) => Some(m),
                ModelEntry::External(_) => None,
            })
            .collect();
        if !native.is_empty() {
            let features: Vec<FeatureVector> = items.par_iter().map(|cu| featurize(&cu.context_text)).collect();
            rows.par_iter_mut().zip(features.par_iter()).for_each(|(row, fv)| {
                for m in &native {
                    row[m.code.index()] = Some(m.predict_features(fv));
                }
            });
        }

        let mut external: BTreeMap<(&str, &str), (&ExternalModelRef, Vec<MiCode>)> = BTreeMap::new();
        for ((code, kk), e) in &self.entries {
            if *kk != k {
                continue;
            }
            if let ModelEntry::External(r) = &e.model {
                external
                    .entry((r.endpoint.as_str(), r.model_id.as_str()))
                    .or_insert((r, Vec::new()))
                    .1
                    .push(*code);
            }
        }
        for (r, codes) in external.values() {
            let scores = external_predict(r, items)?;
            for (row, s) in rows.iter_mut().zip(scores) {
                for code in codes {
                    let p = s.get(code).copied().ok_or_else(|| {
                        Error::Protocol(format!("endpoint {} returned no score for {code}", r.endpoint))
                    })?;
                    row[code.index()] = Some(p);
                }
            }
        }
        Ok(rows)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Vec::new();
        for ((code, k), entry) in &self.entries {
            let (kind, file, external) = match &entry.model {
                ModelEntry::Native(m) => {
                    let file = model_file_name(*code, *k);
                    write_model_file(&dir.join(&file), m)?;
                    ("native", Some(file), None)
                }
                ModelEntry::External(r) => ("external", None, Some(r.clone())),
            };
            index.push(IndexEntry {
                code: *code,
                k: *k,
                kind: kind.to_string(),
                file,
                external,
                meta: entry.meta.clone(),
            });
        }
        let body = serde_json::to_string_pretty(&RegistryIndex { version: self.version, models: index })
            .map_err(|e| Error::ModelFile(e.to_string()))?;
        write_atomic(&dir.join(INDEX_FILE), body.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: RegistryIndex =
            serde_json::from_str(&body).map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
        let mut entries = BTreeMap::new();
        for item in index.models {
            let model = match (item.kind.as_str(), item.file, item.external) {
                ("native", Some(file), _) => {
                    let m = read_model_file(&dir.join(file))?;
                    if (m.code, m.k) != (item.code, item.k) {
                        return Err(Error::ModelFile(format!(
                            "index says {} k={} but file holds {} k={}",
                            item.code, item.k, m.code, m.k
                        )));
                    }
                    ModelEntry::Native(m)
                }
                ("external", _, Some(r)) => ModelEntry::External(r),
                (kind, _, _) => return Err(Error::ModelFile(format!("bad registry entry kind {kind:?}"))),
            };
            entries.insert((item.code, item.k), RegistryEntry { model, meta: item.meta });
        }
        Ok(ModelRegistry {
            entries,
            version: index.version,
        })
    }
}

/// Codes whose probability is at least `threshold`.
pub fn labels_from_scores(row: &ScoreRow, threshold: f64) -> LabelSet {
    let mut out = LabelSet::default();
    for code in MiCode::ALL {
        if let Some(p) = row[code.index()] {
            if p >= threshold {
                out.codes.insert(code);
                out.confidence.insert(code, p);
            }
        }
    }
    out
}

pub fn predict_labels(registry: &ModelRegistry, cu: &ContextualUtterance, threshold: f64) -> Result<LabelSet> {
    Ok(predict_labels_batch(registry, std::slice::from_ref(cu), threshold)?.remove(0))
}

pub fn predict_labels_batch(
    registry: &ModelRegistry,
    items: &[ContextualUtterance],
    threshold: f64,
) -> Result<Vec<LabelSet>> {
    let Some(first) = items.first() else { return Ok(Vec::new()) };
    registry.require_all_codes(first.k)?;
    let rows = registry.score_batch(first.k, items)?;
    Ok(rows.iter().map(|r| labels_from_scores(r, threshold)).collect())
}

#[derive(Serialize, Deserialize)]
struct RegistryIndex {
    version: u64,
    models: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    code: MiCode,
    k: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    external: Option<ExternalModelRef>,
    #[serde(flatten)]
    meta: ModelMeta,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    format_version: u32,
    code: MiCode,
    k: usize,
    hyper: Hyper,
    seed: u64,
    bias: f64,
    training_set_hash: String,
    loss_history: Vec<f64>,
    weights: Vec<(u32, f64)>,
}

pub fn model_file_name(code: MiCode, k: usize) -> String {
    format!("model_{}_k{k}.json", code.name())
}

pub fn write_model_file(path: &Path, m: &CodeClassifier) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.to_string(),
        format_version: MODEL_FORMAT_VERSION,
        code: m.code,
        k: m.k,
        hyper: m.hyper,
        seed: m.hyper.seed,
        bias: m.bias,
        training_set_hash: m.training_set_hash.clone(),
        loss_history: m.loss_history.clone(),
        weights: m.weights.clone(),
    };
    let body = serde_json::to_vec(&file).map_err(|e| Error::ModelFile(e.to_string()))?;
    write_atomic(path, &body)
}

pub fn read_model_file(path: &Path) -> Result<CodeClassifier> {
    let body = fs::read(path).map_err(|e| Error::io(path, e))?;
    let f: ModelFile =
        serde_json::from_slice(&body).map_err(|e| Error::ModelFile(format!("{}: {e}", path.display())))?;
    if f.format != MODEL_FORMAT || f.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFile(format!(
            "{}: unsupported format {} v{}",
            path.display(),
            f.format,
            f.format_version
        )));
    }
    if !f.weights.windows(2).all(|w| w[0].0 < w[1].0) {
        return Err(Error::ModelFile(format!("{}: weights not sorted", path.display())));
    }
    Ok(CodeClassifier {
        code: f.code,
        k: f.k,
        hyper: f.hyper,
        bias: f.bias,
        weights: f.weights,
        training_set_hash: f.training_set_hash,
        loss_history: f.loss_history,
    })
}

/// Writes to a sibling temp file, syncs it and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

mod opt_timestamp {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match t {
            Some(t) => timestamp::serialize(t, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<DateTime<Utc>>, D::Error> {
        let s: Option<String> = Option::deserialize(d)?;
        s.map(|s| {
            DateTime::parse_from_rfc3339(&s)
                .map(|t| t.with_timezone(&Utc))
                .map_err(serde::de::Error::custom)
        })
        .transpose()
    }
}
