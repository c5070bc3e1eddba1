//! Satisfaction model: MI-code counts per conversation against the binarized member rating.

pub mod fit;

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::codes::{MiCategory, MiCode};
use crate::corpus::{Corpus, SatisfactionClass};
use crate::error::{Error, Result};
use crate::labels::LabelMap;

pub use fit::{
    fit_weighted_logistic, odds_ratio, significance_stars, wald_p, weighted_log_likelihood, RegressionFit, INTERCEPT,
};

pub const STAR_LEGEND: &str = "***p < 0.001; **p<0.01; *p<0.05 ⊙p<0.1";
pub const MEMBER_AGE: &str = "Member Age";
pub const LISTENER_AGE: &str = "Listener Age";
pub const PAST_RATING: &str = "Member Past Average Rating";
pub const N_CODES: usize = MiCode::REGRESSION_ORDER.len();

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignRow {
    pub conversation_id: String,
    /// Counts in [`MiCode::REGRESSION_ORDER`] order.
    pub counts: [u32; N_CODES],
    pub member_age: f64,
    pub listener_age: f64,
    pub member_past_avg_rating: f64,
    pub outcome: SatisfactionClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PastRatingMode {
    /// Mean over all of the member's other rated conversations.
    #[default]
    LeaveOneOut,
    /// Mean over the member's rated conversations that started strictly earlier.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Design {
    pub rows: Vec<DesignRow>,
    pub excluded_unrated: usize,
    pub excluded_missing_age: usize,
    /// Listener utterances of included conversations that had no label.
    pub unlabeled_utterances: usize,
    pub global_mean_rating: f64,
    pub past_rating_mode: PastRatingMode,
}

/// One row per rated conversation with both ages present.
pub fn build_design(corpus: &Corpus, labels: &LabelMap, mode: PastRatingMode) -> Design {
    let rated: Vec<_> = corpus.conversations().iter().filter(|c| c.rating.is_some()).collect();
    let global_mean_rating = if rated.is_empty() {
        f64::NAN
    } else {
        rated.iter().map(|c| c.rating.unwrap().get() as f64).sum::<f64>() / rated.len() as f64
    };

    // (start time, conversation id, rating) per member, sorted chronologically.
    let mut by_member: HashMap<&str, Vec<(chrono::DateTime<chrono::Utc>, &str, f64)>> = HashMap::new();
    for c in &rated {
        by_member.entry(c.member_id.as_str()).or_default().push((
            c.start_time().unwrap_or_default(),
            c.conversation_id.as_str(),
            c.rating.unwrap().get() as f64,
        ));
    }
    for v in by_member.values_mut() {
        v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(b.1)));
    }

    let mut slot = [0usize; MiCode::COUNT];
    for (i, c) in MiCode::REGRESSION_ORDER.iter().enumerate() {
        slot[c.index()] = i;
    }

    let mut design = Design {
        rows: Vec::new(),
        excluded_unrated: corpus.len() - rated.len(),
        excluded_missing_age: 0,
        unlabeled_utterances: 0,
        global_mean_rating,
        past_rating_mode: mode,
    };
    for c in rated {
        let (Some(member_age), Some(listener_age)) = (c.member_age, c.listener_age) else {
            design.excluded_missing_age += 1;
            continue;
        };
        let mut counts = [0u32; N_CODES];
        for (_, u) in c.listener_utterances() {
            match labels.get(&u.utterance_id) {
                Some(set) => {
                    for code in set.iter().filter(|&code| code != MiCode::Other) {
                        counts[slot[code.index()]] += 1;
                    }
                }
                None => design.unlabeled_utterances += 1,
            }
        }
        let history = &by_member[c.member_id.as_str()];
        let start = c.start_time().unwrap_or_default();
        let others: Vec<f64> = history
            .iter()
            .filter(|(t, id, _)| {
                *id != c.conversation_id
                    && match mode {
                        PastRatingMode::LeaveOneOut => true,
                        PastRatingMode::Temporal => *t < start,
                    }
            })
            .map(|&(_, _, r)| r)
            .collect();
        let past = if others.is_empty() {
            global_mean_rating
        } else {
            others.iter().sum::<f64>() / others.len() as f64
        };
        design.rows.push(DesignRow {
            conversation_id: c.conversation_id.clone(),
            counts,
            member_age: member_age as f64,
            listener_age: listener_age as f64,
            member_past_avg_rating: past,
            outcome: c.satisfaction().expect("rated conversation"),
        });
    }
    design
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassWeights {
    pub satisfactory: f64,
    pub unsatisfactory: f64,
}

impl ClassWeights {
    pub fn of(&self, class: SatisfactionClass) -> f64 {
        match class {
            SatisfactionClass::Satisfactory => self.satisfactory,
            SatisfactionClass::Unsatisfactory => self.unsatisfactory,
        }
    }
}

/// Inverse class frequency weights `N / (2 N_c)`.
pub fn class_weights_from_counts(n_sat: usize, n_unsat: usize) -> Result<ClassWeights> {
    if n_sat == 0 || n_unsat == 0 {
        return Err(Error::Insufficient("single-class data: both outcomes are required".into()));
    }
    let n = (n_sat + n_unsat) as f64;
    Ok(ClassWeights {
        satisfactory: n / (2.0 * n_sat as f64),
        unsatisfactory: n / (2.0 * n_unsat as f64),
    })
}

pub fn class_weights(rows: &[DesignRow]) -> Result<ClassWeights> {
    let sat = rows
        .iter()
        .filter(|r| r.outcome == SatisfactionClass::Satisfactory)
        .count();
    class_weights_from_counts(sat, rows.len() - sat)
}

/// Covariate names in column order, intercept first.
pub fn covariate_names() -> Vec<String> {
    std::iter::once(INTERCEPT.to_string())
        .chain(MiCode::REGRESSION_ORDER.iter().map(|c| c.label().to_string()))
        .chain([MEMBER_AGE, LISTENER_AGE, PAST_RATING].map(String::from))
        .collect()
}

pub fn design_matrix(rows: &[DesignRow]) -> DMatrix<f64> {
    let p = 1 + N_CODES + 3;
    DMatrix::from_fn(rows.len(), p, |i, j| {
        let r = &rows[i];
        match j {
            0 => 1.0,
            j if j <= N_CODES => r.counts[j - 1] as f64,
            j if j == N_CODES + 1 => r.member_age,
            j if j == N_CODES + 2 => r.listener_age,
            _ => r.member_past_avg_rating,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SatisfactionAnalysis {
    pub design_rows: usize,
    pub satisfactory: usize,
    pub unsatisfactory: usize,
    pub excluded_unrated: usize,
    pub excluded_missing_age: usize,
    pub unlabeled_utterances: usize,
    pub global_mean_rating: f64,
    pub past_rating_mode: PastRatingMode,
    pub weights: ClassWeights,
    pub fit: RegressionFit,
}

/// Builds weights and fits the model on a design.
pub fn analyze(design: &Design) -> Result<SatisfactionAnalysis> {
    let weights = class_weights(&design.rows)?;
    let x = design_matrix(&design.rows);
    let y: Vec<bool> = design
        .rows
        .iter()
        .map(|r| r.outcome == SatisfactionClass::Satisfactory)
        .collect();
    let w: Vec<f64> = design.rows.iter().map(|r| weights.of(r.outcome)).collect();
    let fit = fit_weighted_logistic(&x, &y, &w, &covariate_names())?;
    let satisfactory = y.iter().filter(|&&v| v).count();
    Ok(SatisfactionAnalysis {
        design_rows: design.rows.len(),
        satisfactory,
        unsatisfactory: design.rows.len() - satisfactory,
        excluded_unrated: design.excluded_unrated,
        excluded_missing_age: design.excluded_missing_age,
        unlabeled_utterances: design.unlabeled_utterances,
        global_mean_rating: design.global_mean_rating,
        past_rating_mode: design.past_rating_mode,
        weights,
        fit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub covariate: String,
    pub coefficient: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub stars: &'static str,
    pub odds_ratio: f64,
}

pub fn table_rows(fit: &RegressionFit) -> Vec<TableRow> {
    (0..fit.names.len())
        .map(|i| TableRow {
            covariate: fit.names[i].clone(),
            coefficient: fit.coefficients[i],
            se: fit.standard_errors[i],
            z: fit.z_scores[i],
            p: fit.p_values[i],
            stars: significance_stars(fit.p_values[i]),
            odds_ratio: fit.odds_ratios[i],
        })
        .collect()
}

/// `"<label> <coef><stars> <odds ratio>"` with three decimals.
pub fn format_row(label: &str, coefficient: f64, p: f64) -> String {
    format!(
        "{label} {coefficient:.3}{} {:.3}",
        significance_stars(p),
        odds_ratio(coefficient)
    )
}

/// Human-readable table grouped MI-Consistent / MI-Inconsistent / Other / Controls.
pub fn satisfaction_table(a: &SatisfactionAnalysis) -> String {
    let fit = &a.fit;
    let mut out = String::new();
    out.push_str("Associations between MI codes and satisfactory conversations\n");
    out.push_str(&format!(
        "conversations: {} (satisfactory {}, unsatisfactory {})\n",
        a.design_rows, a.satisfactory, a.unsatisfactory
    ));
    out.push_str(&format!(
        "excluded: unrated {}, missing age {}; unlabeled listener utterances {}\n",
        a.excluded_unrated, a.excluded_missing_age, a.unlabeled_utterances
    ));
    out.push_str(&format!(
        "class weights: satisfactory {:.4}, unsatisfactory {:.4}\n",
        a.weights.satisfactory, a.weights.unsatisfactory
    ));
    out.push_str(&format!(
        "past rating: {}, global mean {:.3}\n",
        match a.past_rating_mode {
            PastRatingMode::LeaveOneOut => "leave-one-out",
            PastRatingMode::Temporal => "temporal",
        },
        a.global_mean_rating
    ));
    out.push_str(&format!(
        "fit: {} after {} iterations{}\n",
        if fit.converged { "converged" } else { "PROVISIONAL (not converged)" },
        fit.iterations,
        if fit.ridge > 0.0 { format!(", ridge {}", fit.ridge) } else { String::new() }
    ));
    for w in &fit.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out.push('\n');
    out.push_str("MI Code Coefficient Odds Ratio\n");
    let row = |name: &str| match fit.index_of(name) {
        Some(i) => format_row(name, fit.coefficients[i], fit.p_values[i]),
        None => format!("{name} dropped (constant)"),
    };
    for (heading, category) in [
        ("MI-Consistent", MiCategory::MiConsistent),
        ("MI-Inconsistent", MiCategory::MiInconsistent),
        ("Other", MiCategory::Other),
    ] {
        out.push_str(heading);
        out.push('\n');
        for code in MiCode::REGRESSION_ORDER.iter().filter(|c| c.category() == category) {
            out.push_str(&row(code.label()));
            out.push('\n');
        }
    }
    out.push_str("Control Variables\n");
    for name in [MEMBER_AGE, LISTENER_AGE, PAST_RATING] {
        out.push_str(&row(name));
        out.push('\n');
    }
    if let Some(i) = fit.index_of(INTERCEPT) {
        out.push_str(&format_row(INTERCEPT, fit.coefficients[i], fit.p_values[i]));
        out.push('\n');
    }
    out.push_str(&format!("AIC of Model {:.3}\n", fit.aic));
    out.push_str(STAR_LEGEND);
    out.push('\n');
    out
}

#[derive(Serialize)]
struct TableFile<'a> {
    #[serde(flatten)]
    header: &'a SatisfactionAnalysis,
    rows: Vec<TableRow>,
}

/// Machine-readable form: cohort header, fit and one row per covariate.
pub fn satisfaction_json(a: &SatisfactionAnalysis) -> serde_json::Value {
    serde_json::to_value(TableFile {
        header: a,
        rows: table_rows(&a.fit),
    })
    .expect("analysis serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::CodeSet;
    use crate::corpus::{Conversation, Rating, SpeakerRole, Utterance};
    use chrono::{TimeZone, Utc};

    fn conv(id: &str, member: &str, day: i64, rating: u8, labels: &[&[MiCode]]) -> (Conversation, Vec<(String, CodeSet)>) {
        let mut utterances = Vec::new();
        let mut out = Vec::new();
        for (i, codes) in labels.iter().enumerate() {
            let uid = format!("{id}-{i}");
            utterances.push(Utterance {
                utterance_id: uid.clone(),
                conversation_id: id.into(),
                index: i,
                speaker: SpeakerRole::Listener,
                timestamp: Utc.timestamp_opt(day * 86_400 + i as i64, 0).unwrap(),
                text: "x".into(),
            });
            out.push((uid, codes.iter().copied().collect()));
        }
        (
            Conversation {
                conversation_id: id.into(),
                listener_id: "l".into(),
                member_id: member.into(),
                listener_age: Some(30),
                member_age: Some(25),
                rating: Some(Rating::new(rating as i64).unwrap()),
                utterances,
            },
            out,
        )
    }

    #[test]
    fn counts_and_past_ratings() {
        use MiCode::*;
        let parts = [
            conv("a", "m1", 1, 5, &[&[Reflection], &[Reflection, Affirm], &[Reflection], &[Other]]),
            conv("b", "m1", 2, 4, &[&[Support]]),
            conv("c", "m1", 3, 2, &[&[Support]]),
            conv("d", "m2", 1, 1, &[&[Direct]]),
        ];
        let mut labels = LabelMap::new();
        let convs: Vec<Conversation> = parts
            .into_iter()
            .map(|(c, l)| {
                labels.extend(l);
                c
            })
            .collect();
        let corpus = Corpus::new(convs);
        let d = build_design(&corpus, &labels, PastRatingMode::LeaveOneOut);
        let row = |id: &str| d.rows.iter().find(|r| r.conversation_id == id).unwrap().clone();
        let refl = MiCode::REGRESSION_ORDER.iter().position(|&c| c == Reflection).unwrap();
        assert_eq!(row("a").counts[refl], 3);
        assert_eq!(row("a").counts.iter().sum::<u32>(), 4);
        assert_eq!(row("c").member_past_avg_rating, 4.5);
        assert_eq!(d.global_mean_rating, 3.0);
        assert_eq!(row("d").member_past_avg_rating, 3.0);

        let t = build_design(&corpus, &labels, PastRatingMode::Temporal);
        let trow = |id: &str| t.rows.iter().find(|r| r.conversation_id == id).unwrap().clone();
        assert_eq!(trow("a").member_past_avg_rating, 3.0);
        assert_eq!(trow("b").member_past_avg_rating, 5.0);
        assert_eq!(trow("c").member_past_avg_rating, 4.5);
    }

    #[test]
    fn weights_from_counts() {
        let w = class_weights_from_counts(49_892, 13_120).unwrap();
        assert!((w.satisfactory - 0.6315).abs() < 1e-4);
        assert!((w.unsatisfactory - 2.4014).abs() < 1e-4);
        assert!((w.unsatisfactory / w.satisfactory - 49_892.0 / 13_120.0).abs() < 1e-12);
        let even = class_weights_from_counts(50, 50).unwrap();
        assert_eq!((even.satisfactory, even.unsatisfactory), (1.0, 1.0));
        assert!(class_weights_from_counts(10, 0).is_err());
    }

    #[test]
    fn row_format() {
        // Both columns derive from the unrounded coefficient: exp(0.0346) = 1.0352.
        assert_eq!(format_row("Reflection", 0.0346, 0.0002), "Reflection 0.035*** 1.035");
        assert_eq!(format_row("Inappropriate", -0.086, 0.0001), "Inappropriate -0.086*** 0.918");
        assert_eq!(
            format_row(PAST_RATING, 0.522, 1e-9),
            "Member Past Average Rating 0.522*** 1.685"
        );
    }
}
