//! Tenure trends, correlation matrices and per-code top words.

pub mod corr;
pub mod stopwords;
pub mod topwords;

use std::collections::HashMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::codes::MiCode;
use crate::corpus::{listener_join_times, tenure_bucket, Corpus, TenureBucket};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

pub use corr::{conversation_corr, cooccurrence_matrix, listener_corr, pearson, utterance_labels, CorrLevel, CorrMatrix};
pub use topwords::{tfidf_top_words, CodeTopWords, TopWord, TopWordsIndex, TopWordsReport};

/// Wilson score interval for a binomial proportion.
pub fn proportion_ci(successes: u64, total: u64, level: f64) -> Result<(f64, f64)> {
    if total == 0 {
        return Err(Error::Invalid("proportion interval needs a positive total".into()));
    }
    if successes > total {
        return Err(Error::Invalid(format!("{successes} successes out of {total}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("confidence level {level} outside (0,1)")));
    }
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let n = total as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == total { 1.0 } else { (center + half).min(1.0) };
    Ok((low, high))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendCell {
    pub code: MiCode,
    pub bucket: TenureBucket,
    pub utterances: u64,
    pub count: u64,
    /// `None` for an empty bucket.
    pub fraction: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendSeries {
    /// Code-major, buckets in tenure order within each code.
    pub cells: Vec<TrendCell>,
    pub unlabeled_utterances: u64,
}

impl TrendSeries {
    pub fn cell(&self, code: MiCode, bucket: TenureBucket) -> &TrendCell {
        &self.cells[code.index() * TenureBucket::ALL.len() + bucket.index()]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("code,bucket,utterances,count,fraction,ci_low,ci_high\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                c.code.name(),
                c.bucket.name(),
                c.utterances,
                c.count,
                opt(c.fraction),
                opt(c.ci_low),
                opt(c.ci_high)
            );
        }
        out
    }
}

/// Fraction of labeled listener utterances per tenure bucket carrying each code.
///
/// Tenure is measured from each listener's first utterance in `corpus`.
pub fn code_fraction_by_bucket(corpus: &Corpus, labels: &LabelMap) -> Result<TrendSeries> {
    code_fraction_with_joins(corpus, labels, &listener_join_times(corpus))
}

/// As [`code_fraction_by_bucket`] with join times supplied, e.g. from the unfiltered corpus.
pub fn code_fraction_with_joins(
    corpus: &Corpus,
    labels: &LabelMap,
    joins: &HashMap<String, DateTime<Utc>>,
) -> Result<TrendSeries> {
    let nb = TenureBucket::ALL.len();
    let mut totals = vec![0u64; nb];
    let mut counts = vec![[0u64; MiCode::COUNT]; nb];
    let mut unlabeled = 0;
    for conv in corpus.conversations() {
        let Some(&join) = joins.get(&conv.listener_id) else {
            continue;
        };
        for (_, u) in conv.listener_utterances() {
            let Some(set) = labels.get(&u.utterance_id) else {
                unlabeled += 1;
                continue;
            };
            let b = tenure_bucket(join, u.timestamp)?.index();
            totals[b] += 1;
            for code in set.iter() {
                counts[b][code.index()] += 1;
            }
        }
    }
    let mut cells = Vec::with_capacity(MiCode::COUNT * nb);
    for code in MiCode::ALL {
        for bucket in TenureBucket::ALL {
            let b = bucket.index();
            let (n, k) = (totals[b], counts[b][code.index()]);
            let (fraction, ci) = if n == 0 {
                (None, None)
            } else {
                (Some(k as f64 / n as f64), Some(proportion_ci(k, n, 0.95)?))
            };
            cells.push(TrendCell {
                code,
                bucket,
                utterances: n,
                count: k,
                fraction,
                ci_low: ci.map(|c| c.0),
                ci_high: ci.map(|c| c.1),
            });
        }
    }
    Ok(TrendSeries {
        cells,
        unlabeled_utterances: unlabeled,
    })
}

/// Static SVG with one panel per code: bucket fractions with 95% interval bars.
pub fn trend_svg(series: &TrendSeries) -> String {
    const COLS: usize = 4;
    const W: f64 = 220.0;
    const H: f64 = 150.0;
    const PAD: f64 = 30.0;
    let rows = MiCode::COUNT.div_ceil(COLS);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">"#,
        COLS as f64 * W,
        rows as f64 * H
    );
    for (i, code) in MiCode::ALL.iter().enumerate() {
        let ox = (i % COLS) as f64 * W;
        let oy = (i / COLS) as f64 * H;
        let cells: Vec<&TrendCell> = TenureBucket::ALL.iter().map(|&b| series.cell(*code, b)).collect();
        let ymax = cells
            .iter()
            .filter_map(|c| c.ci_high)
            .fold(0.0f64, f64::max)
            .max(1e-3);
        let px = |j: usize| ox + PAD + j as f64 * (W - 2.0 * PAD) / 3.0;
        let py = |v: f64| oy + H - PAD - v / ymax * (H - 2.0 * PAD);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, ox + PAD, oy + 14.0, code.label());
        let _ = writeln!(
            svg,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999"/>"##,
            ox + PAD,
            py(0.0),
            ox + W - PAD,
            py(0.0)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#,
            ox + 2.0,
            py(ymax) + 3.0,
            ymax
        );
        let mut path = String::new();
        for (j, c) in cells.iter().enumerate() {
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(j),
                py(0.0) + 12.0,
                c.bucket.name()
            );
            if let (Some(f), Some(lo), Some(hi)) = (c.fraction, c.ci_low, c.ci_high) {
                let _ = writeln!(
                    svg,
                    r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#4a7"/>"##,
                    py(lo),
                    py(hi),
                    x = px(j)
                );
                let _ = write!(path, "{}{:.1},{:.1} ", if path.is_empty() { "M" } else { "L" }, px(j), py(f));
            }
        }
        if !path.is_empty() {
            let _ = writeln!(
                svg,
                r##"<path d="{}" fill="none" stroke="#246" stroke-width="1.5"/>"##,
                path.trim_end()
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_examples() {
        let (lo, hi) = proportion_ci(50, 100, 0.95).unwrap();
        assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4, "{lo} {hi}");
        assert_eq!(proportion_ci(0, 100, 0.95).unwrap().0, 0.0);
        assert_eq!(proportion_ci(100, 100, 0.95).unwrap().1, 1.0);
        assert!(proportion_ci(0, 0, 0.95).is_err());
        let w = |n| {
            let (a, b) = proportion_ci(n / 4, n, 0.95).unwrap();
            b - a
        };
        assert!(w(1000) < w(100));
    }
}
