use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rust_stemmers::{Algorithm, Stemmer};
use serde::Serialize;

use super::stopwords::is_stopword;
use crate::classifier::tokenize;
use crate::codes::MiCode;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopWord {
    /// Most frequent surface form of the stem in the corpus.
    pub word: String,
    pub stem: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeTopWords {
    pub code: MiCode,
    pub words: Vec<TopWord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopWordsReport {
    pub n: usize,
    pub codes: Vec<CodeTopWords>,
}

impl TopWordsReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.codes {
            let words: Vec<&str> = c.words.iter().map(|w| w.word.as_str()).collect();
            let _ = writeln!(out, "{}\t{}", c.code.label(), words.join(", "));
        }
        out
    }
}

/// One document per code: the concatenated text of every listener utterance labeled with it.
pub struct TopWordsIndex {
    docs: Vec<HashMap<String, u64>>,
    doc_tokens: Vec<u64>,
    surface: HashMap<String, BTreeMap<String, u64>>,
}

impl TopWordsIndex {
    pub fn build(corpus: &Corpus, labels: &LabelMap) -> Self {
        let stemmer = Stemmer::create(Algorithm::English);
        let mut docs = vec![HashMap::new(); MiCode::COUNT];
        let mut doc_tokens = vec![0u64; MiCode::COUNT];
        let mut surface: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
        for conv in corpus.conversations() {
            for (_, u) in conv.listener_utterances() {
                let Some(set) = labels.get(&u.utterance_id) else { continue };
                if set.is_empty() {
                    continue;
                }
                for tok in tokenize(&u.text) {
                    if is_stopword(&tok) || tok.chars().all(|c| c.is_ascii_digit()) {
                        continue;
                    }
                    let stem = stemmer.stem(&tok).into_owned();
                    *surface.entry(stem.clone()).or_default().entry(tok).or_default() += 1;
                    for code in set.iter() {
                        *docs[code.index()].entry(stem.clone()).or_default() += 1;
                        doc_tokens[code.index()] += 1;
                    }
                }
            }
        }
        TopWordsIndex {
            docs,
            doc_tokens,
            surface,
        }
    }

    fn document_frequency(&self, stem: &str) -> usize {
        self.docs.iter().filter(|d| d.contains_key(stem)).count()
    }

    fn display(&self, stem: &str) -> String {
        self.surface[stem]
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(w, _)| w.clone())
            .unwrap_or_else(|| stem.to_string())
    }

    /// Top `n` stems of a code's document by `tf * ln(1 + N/(1 + df))`, ties by stem.
    pub fn top(&self, code: MiCode, n: usize) -> Result<Vec<TopWord>> {
        let doc = &self.docs[code.index()];
        let len = self.doc_tokens[code.index()];
        if len == 0 {
            return Err(Error::Insufficient(format!("no labeled text for {code}")));
        }
        let n_docs = MiCode::COUNT as f64;
        let mut scored: Vec<(&String, f64)> = doc
            .iter()
            .map(|(stem, &count)| {
                let tf = count as f64 / len as f64;
                let idf = (1.0 + n_docs / (1.0 + self.document_frequency(stem) as f64)).ln();
                (stem, tf * idf)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(scored
            .into_iter()
            .take(n)
            .map(|(stem, score)| TopWord {
                word: self.display(stem),
                stem: stem.clone(),
                score,
            })
            .collect())
    }

    pub fn report(&self, n: usize) -> TopWordsReport {
        TopWordsReport {
            n,
            codes: MiCode::ALL
                .iter()
                .map(|&code| match self.top(code, n) {
                    Ok(words) => CodeTopWords { code, words, error: None },
                    Err(e) => CodeTopWords {
                        code,
                        words: Vec::new(),
                        error: Some(e.to_string()),
                    },
                })
                .collect(),
        }
    }
}

pub fn tfidf_top_words(corpus: &Corpus, labels: &LabelMap, code: MiCode, n: usize) -> Result<Vec<TopWord>> {
    TopWordsIndex::build(corpus, labels).top(code, n)
}
