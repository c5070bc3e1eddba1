use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::codes::{CodeSet, MiCode};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrLevel {
    Utterance,
    Conversation,
    Listener,
}

/// Symmetric Pearson matrix; `None` cells involve a zero-variance variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrMatrix {
    pub level: CorrLevel,
    pub variables: Vec<String>,
    pub r: Vec<Vec<Option<f64>>>,
    /// Observations behind every cell.
    pub n: usize,
}

impl CorrMatrix {
    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.variables.iter().position(|v| v == a)?;
        let j = self.variables.iter().position(|v| v == b)?;
        self.r[i][j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for v in &self.variables {
            out.push(',');
            out.push_str(v);
        }
        out.push('\n');
        for (v, row) in self.variables.iter().zip(&self.r) {
            out.push_str(v);
            for cell in row {
                match cell {
                    Some(r) => {
                        let _ = write!(out, ",{r:.6}");
                    }
                    None => out.push_str(",undefined"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pearson correlation by the two-pass centered formula; `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation matrix over columns of equal length.
fn matrix(level: CorrLevel, variables: Vec<String>, columns: &[Vec<f64>]) -> CorrMatrix {
    let k = columns.len();
    let mut r = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = if i == j {
                pearson(&columns[i], &columns[i]).map(|_| 1.0)
            } else {
                pearson(&columns[i], &columns[j])
            };
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    CorrMatrix {
        level,
        variables,
        r,
        n: columns.first().map_or(0, Vec::len),
    }
}

fn code_names() -> Vec<String> {
    MiCode::ALL.iter().map(|c| c.name().to_string()).collect()
}

/// Pearson between the 17 multi-hot indicator columns.
pub fn cooccurrence_matrix<'a>(labels: impl IntoIterator<Item = &'a CodeSet>) -> Result<CorrMatrix> {
    let mut columns = vec![Vec::new(); MiCode::COUNT];
    for set in labels {
        for code in MiCode::ALL {
            columns[code.index()].push(if set.contains(code) { 1.0 } else { 0.0 });
        }
    }
    if columns[0].len() < 2 {
        return Err(Error::Insufficient("need at least 2 labeled utterances".into()));
    }
    Ok(matrix(CorrLevel::Utterance, code_names(), &columns))
}

/// Label sets of the corpus's listener utterances, in corpus order.
pub fn utterance_labels<'a>(corpus: &'a Corpus, labels: &'a LabelMap) -> impl Iterator<Item = &'a CodeSet> + 'a {
    corpus
        .conversations()
        .iter()
        .flat_map(|c| c.listener_utterances())
        .filter_map(|(_, u)| labels.get(&u.utterance_id))
}

pub const LENGTH: &str = "Length";

/// Per-conversation code counts plus conversation length (all utterances).
pub fn conversation_corr(corpus: &Corpus, labels: &LabelMap) -> Result<CorrMatrix> {
    let mut columns = vec![Vec::new(); MiCode::COUNT + 1];
    for conv in corpus.conversations() {
        let mut counts = [0u32; MiCode::COUNT];
        for (_, u) in conv.listener_utterances() {
            if let Some(set) = labels.get(&u.utterance_id) {
                for code in set.iter() {
                    counts[code.index()] += 1;
                }
            }
        }
        for (col, &c) in columns.iter_mut().zip(&counts) {
            col.push(c as f64);
        }
        columns[MiCode::COUNT].push(conv.utterances.len() as f64);
    }
    if corpus.len() < 2 {
        return Err(Error::Insufficient("need at least 2 conversations".into()));
    }
    let mut names = code_names();
    names.push(LENGTH.to_string());
    Ok(matrix(CorrLevel::Conversation, names, &columns))
}

/// Per-listener usage rates (code utterances / labeled listener utterances).
pub fn listener_corr(corpus: &Corpus, labels: &LabelMap) -> Result<CorrMatrix> {
    let mut per: BTreeMap<&str, (u64, [u64; MiCode::COUNT])> = BTreeMap::new();
    for conv in corpus.conversations() {
        for (_, u) in conv.listener_utterances() {
            if let Some(set) = labels.get(&u.utterance_id) {
                let e = per.entry(conv.listener_id.as_str()).or_insert((0, [0; MiCode::COUNT]));
                e.0 += 1;
                for code in set.iter() {
                    e.1[code.index()] += 1;
                }
            }
        }
    }
    if per.len() < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 listeners with labeled utterances, found {}",
            per.len()
        )));
    }
    let mut columns = vec![Vec::with_capacity(per.len()); MiCode::COUNT];
    for (total, counts) in per.values() {
        for (col, &c) in columns.iter_mut().zip(counts) {
            col.push(c as f64 / *total as f64);
        }
    }
    Ok(matrix(CorrLevel::Listener, code_names(), &columns))
}
