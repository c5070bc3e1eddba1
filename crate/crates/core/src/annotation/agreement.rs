use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::alpha::{alpha_of_units, AlphaResult};
use crate::codes::{CodeSet, MiCode};
use crate::error::{Error, Result};
use crate::labels::{LabelRecord, Source};

/// Conventional threshold for acceptable agreement; some codes are expected to fall short.
pub const ACCEPTANCE_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodeAgreement {
    pub code: MiCode,
    pub alpha: Option<f64>,
    pub units_used: usize,
    /// Utterances whose resolved human label contains the code.
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub annotators: Vec<String>,
    pub utterances: usize,
    pub codes: Vec<CodeAgreement>,
    pub cumulative_alpha: Option<f64>,
    pub cumulative_units: usize,
}

/// Latest label per (utterance, observer), keyed by utterance then observer.
type Ratings = BTreeMap<String, BTreeMap<String, CodeSet>>;

/// Human, non-consensus ratings. Later records in `records` supersede earlier ones.
fn human_ratings<'a>(records: impl IntoIterator<Item = &'a LabelRecord>) -> Ratings {
    let mut out = Ratings::new();
    for r in records {
        if let Source::Human(who) = &r.source {
            if !r.source.is_consensus() {
                out.entry(r.utterance_id.clone())
                    .or_default()
                    .insert(who.clone(), r.code_set());
            }
        }
    }
    out
}

fn code_alpha<'a>(units: impl Iterator<Item = &'a BTreeMap<String, CodeSet>>, code: MiCode) -> AlphaResult {
    alpha_of_units(units.map(|obs| obs.values().map(move |s| s.contains(code))))
}

/// Alpha over (unit, code) pairs pooled as units.
fn cumulative_alpha<'a>(units: impl Iterator<Item = &'a BTreeMap<String, CodeSet>> + Clone) -> AlphaResult {
    alpha_of_units(
        MiCode::ALL
            .iter()
            .flat_map(|&c| units.clone().map(move |obs| obs.values().map(move |s| s.contains(c)))),
    )
}

/// Per-code alpha over the multi-hot view of human labels.
///
/// Consensus records are excluded from the reliability data; they are an
/// outcome of adjudication rather than an independent rating.
pub fn agreement_report(records: &[LabelRecord]) -> AgreementReport {
    let ratings = human_ratings(records);
    let resolved = crate::labels::resolve_labels(records.iter().filter(|r| r.source.is_human()));
    let annotators: BTreeSet<String> = ratings.values().flat_map(|m| m.keys().cloned()).collect();
    let codes = MiCode::ALL
        .iter()
        .map(|&code| {
            let a = code_alpha(ratings.values(), code);
            CodeAgreement {
                code,
                alpha: a.alpha,
                units_used: a.units_used,
                positives: resolved.values().filter(|s| s.contains(code)).count(),
            }
        })
        .collect();
    let cum = cumulative_alpha(ratings.values());
    AgreementReport {
        annotators: annotators.into_iter().collect(),
        utterances: resolved.len(),
        codes,
        cumulative_alpha: cum.alpha,
        cumulative_units: cum.units_used,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationRow {
    pub code: MiCode,
    pub inter_human: Option<f64>,
    pub with_model: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub sampled: Vec<String>,
    pub codes: Vec<ValidationRow>,
    pub cumulative_inter_human: Option<f64>,
    pub cumulative_with_model: Option<f64>,
}

/// Samples `n` utterances rated by at least two humans and by a model, and
/// compares human-only agreement with agreement when the model is one more observer.
pub fn validation_sample(records: &[LabelRecord], n: usize, seed: u64) -> Result<ValidationReport> {
    let humans = human_ratings(records);
    let mut model: BTreeMap<&str, CodeSet> = BTreeMap::new();
    for r in records {
        if !r.source.is_human() {
            model.insert(&r.utterance_id, r.code_set());
        }
    }
    let candidates: Vec<&String> = humans
        .iter()
        .filter(|(u, obs)| obs.len() >= 2 && model.contains_key(u.as_str()))
        .map(|(u, _)| u)
        .collect();
    if candidates.len() < n {
        return Err(Error::Insufficient(format!(
            "{} utterances carry both a model label and two human labels; {n} requested",
            candidates.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<&String> = candidates.choose_multiple(&mut rng, n).copied().collect();
    sampled.sort();

    const MODEL_OBSERVER: &str = "\u{0}model";
    let human_units: Vec<&BTreeMap<String, CodeSet>> = sampled.iter().map(|u| &humans[*u]).collect();
    let model_units: Vec<BTreeMap<String, CodeSet>> = sampled
        .iter()
        .map(|u| {
            let mut obs = humans[*u].clone();
            obs.insert(MODEL_OBSERVER.to_string(), model[u.as_str()]);
            obs
        })
        .collect();

    let codes = MiCode::ALL
        .iter()
        .map(|&code| ValidationRow {
            code,
            inter_human: code_alpha(human_units.iter().copied(), code).alpha,
            with_model: code_alpha(model_units.iter(), code).alpha,
        })
        .collect();
    Ok(ValidationReport {
        sampled: sampled.into_iter().cloned().collect(),
        codes,
        cumulative_inter_human: cumulative_alpha(human_units.iter().copied()).alpha,
        cumulative_with_model: cumulative_alpha(model_units.iter()).alpha,
    })
}

fn fmt_alpha(a: Option<f64>) -> String {
    a.map_or_else(|| "undefined".to_string(), |a| format!("{a:.3}"))
}

impl AgreementReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "annotators: {}  utterances: {}\n",
            self.annotators.len(),
            self.utterances
        ));
        out.push_str("code\tcount\talpha\tunits\n");
        for c in &self.codes {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.code.label(),
                c.positives,
                fmt_alpha(c.alpha),
                c.units_used
            ));
        }
        out.push_str(&format!(
            "Cumulative\t\t{}\t{}\n",
            fmt_alpha(self.cumulative_alpha),
            self.cumulative_units
        ));
        out
    }
}

impl ValidationReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("sampled utterances: {}\n", self.sampled.len());
        out.push_str("code\tinter-annotator\tannotators+model\n");
        for r in &self.codes {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                r.code.label(),
                fmt_alpha(r.inter_human),
                fmt_alpha(r.with_model)
            ));
        }
        out.push_str(&format!(
            "Cumulative Agreement\t{}\t{}\n",
            fmt_alpha(self.cumulative_inter_human),
            fmt_alpha(self.cumulative_with_model)
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn rec(utt: &str, src: Source, codes: &[MiCode]) -> LabelRecord {
        LabelRecord {
            utterance_id: utt.into(),
            source: src,
            codes: codes.to_vec(),
            confidence: None,
            decided_at: Utc.timestamp_opt(0, 0).unwrap(),
        }
    }

    fn human(who: &str) -> Source {
        Source::Human(who.into())
    }

    #[test]
    fn fixture_gives_hand_alpha_for_reflection() {
        use MiCode::{Reflection as R, Support as S};
        let records = vec![
            rec("u1", human("a"), &[R]),
            rec("u1", human("b"), &[R]),
            rec("u2", human("a"), &[S]),
            rec("u2", human("b"), &[S]),
            rec("u3", human("a"), &[R]),
            rec("u3", human("b"), &[S]),
            rec("u4", human("a"), &[S]),
            rec("u4", human("b"), &[S]),
            rec("u4", Source::consensus(), &[R]),
        ];
        let report = agreement_report(&records);
        let r = &report.codes[R.index()];
        assert!((r.alpha.unwrap() - 0.5333).abs() < 1e-4);
        assert_eq!(r.units_used, 4);
        assert_eq!(report.annotators, vec!["a", "b"]);
        // u1 from the humans, u4 from consensus; u3 resolves to b's later record
        assert_eq!(r.positives, 2);
        assert_eq!(report.codes[MiCode::Affirm.index()].alpha, None);
    }

    #[test]
    fn model_agreeing_with_humans_keeps_alpha_at_one() {
        let mut records = Vec::new();
        for i in 0..20 {
            let codes = if i % 2 == 0 { vec![MiCode::Affirm] } else { vec![MiCode::Direct] };
            let u = format!("u{i}");
            records.push(rec(&u, human("a"), &codes));
            records.push(rec(&u, human("b"), &codes));
            records.push(rec(&u, Source::Model("m".into()), &codes));
        }
        let v = validation_sample(&records, 10, 1).unwrap();
        assert_eq!(v.cumulative_inter_human, Some(1.0));
        assert_eq!(v.cumulative_with_model, Some(1.0));
        assert!(validation_sample(&records, 21, 1).is_err());
        assert_eq!(validation_sample(&records, 10, 1).unwrap(), v);
    }
}
