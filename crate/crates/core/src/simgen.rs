//! Synthetic corpora with known ground truth.
//!
//! Every listener utterance gets 1 to 3 codes drawn by systematic sampling, so
//! each code's marginal probability is exactly its (tenure-adjusted) planted
//! value. Texts are code keywords plus filler words. Ratings come from a planted
//! logistic model on the true code counts and controls.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::classifier::logistic;
use crate::codes::{CodeSet, MiCode};
use crate::corpus::{write_corpus, Conversation, Corpus, Rating, SpeakerRole, Utterance};
use crate::error::{Error, Result};
use crate::labels::{write_label_file, LabelRecord, Source};
use crate::trends::stopwords::is_stopword;

/// Tenure at which drift stops accumulating.
pub const DRIFT_HORIZON_DAYS: i64 = 730;
pub const FILLER_VOCABULARY: usize = 1000;
const UTTERANCE_GAP_SECS: i64 = 20;

/// Utterance counts per code in the annotated reference corpus, in `MiCode::ALL` order.
pub const REFERENCE_COUNTS: [u32; 17] = [
    304, 1697, 1493, 346, 1956, 2507, 1918, 271, 224, 250, 120, 1027, 1605, 1260, 340, 963, 1299,
];
/// Labeled listener utterances in the reference corpus.
pub const REFERENCE_UTTERANCES: u32 = 14_797;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodePlan {
    /// Marginal probability at tenure 0.
    pub probability: f64,
    /// Change in probability per 365 days of tenure, up to the drift horizon.
    #[serde(default)]
    pub drift_per_year: f64,
    /// Planted log-odds per occurrence in a conversation. Must be 0 for `Other`.
    #[serde(default)]
    pub coefficient: f64,
    /// Keyword goes into the preceding utterance instead of the coded one.
    #[serde(default)]
    pub context_dependent: bool,
    pub lexicon: Vec<String>,
}

/// Codes emitted together. Members' marginals include the bundle probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub codes: Vec<MiCode>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub intercept: f64,
    pub member_age: f64,
    pub listener_age: f64,
    pub past_rating: f64,
    /// Past-average value used for a member's first rated conversation.
    pub past_rating_fallback: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub seed: u64,
    pub n_conversations: usize,
    /// Inclusive range of total utterances per conversation (members and listeners alternate).
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub n_listeners: usize,
    pub n_members: usize,
    pub listener_age: (u32, u32),
    pub member_age: (u32, u32),
    pub missing_age_rate: f64,
    pub unrated_rate: f64,
    /// Conversations are spread evenly over the four tenure buckets up to this many days.
    pub tenure_span_days: i64,
    pub keywords_per_code: usize,
    pub filler_tokens: (usize, usize),
    pub codes: BTreeMap<MiCode, CodePlan>,
    #[serde(default)]
    pub bundles: Vec<Bundle>,
    pub controls: Controls,
    #[serde(with = "crate::corpus::timestamp")]
    pub start: DateTime<Utc>,
}

/// Everything a test needs to check estimators against the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRecord {
    pub spec: GeneratorSpec,
    pub conversations: usize,
    pub utterances: usize,
    pub listener_utterances: usize,
    /// Sum over listener utterances of each code's inclusion probability.
    pub expected_counts: BTreeMap<MiCode, f64>,
    /// Sum over listener utterances of p(1 - p).
    pub expected_variance: BTreeMap<MiCode, f64>,
    pub observed_counts: BTreeMap<MiCode, u64>,
    /// Latent satisfaction draw per rated conversation.
    pub satisfied: BTreeMap<String, bool>,
}

pub struct Generated {
    pub corpus: Corpus,
    pub labels: Vec<LabelRecord>,
    pub planted: PlantedRecord,
}

impl Generated {
    /// Writes `corpus.jsonl`, `labels.jsonl` and `planted.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_corpus(&self.corpus, &dir.join("corpus.jsonl"))?;
        write_label_file(&dir.join("labels.jsonl"), &self.labels)?;
        let path = dir.join("planted.json");
        let mut text = serde_json::to_string_pretty(&self.planted).expect("planted record serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

fn default_lexicon(code: MiCode) -> &'static [&'static str] {
    use MiCode::*;
    match code {
        GivingInformation => &["information", "resource", "hotline", "website", "article", "therapist"],
        Reflection => &["sounds", "feeling", "overwhelmed", "hear", "frustrated", "seems"],
        Support => &["support", "alongside", "care", "comfort", "hug", "safe"],
        Affirm => &["proud", "brave", "strength", "courage", "admirable", "great"],
        ClosedQuestion => &["anything", "whether", "correct", "right", "sure", "ever"],
        OpenQuestion => &["describe", "explain", "tell", "elaborate", "share", "wonder"],
        Persuade => &["suggest", "recommend", "try", "consider", "maybe", "perhaps"],
        SeekingCollaboration => &["together", "permission", "allow", "mind", "agree", "team"],
        Inappropriate => &["stupid", "whatever", "dumb", "shut", "idiot", "lazy"],
        Direct => &["must", "stop", "immediately", "quit", "call", "insist"],
        EmphasizingAutonomy => &["choice", "decide", "control", "options", "freedom", "choose"],
        Grounding => &["breathe", "relax", "calm", "present", "notice", "slowly"],
        PersonalDisclosure => &["personally", "experienced", "similar", "remember", "childhood", "relate"],
        Introduction => &["hello", "welcome", "hi", "name", "glad", "meet"],
        Conclusion => &["goodbye", "bye", "luck", "later", "night", "wishing"],
        ChitChat => &["weather", "movie", "pizza", "weekend", "football", "music"],
        Other => &["hmm", "oh", "ok", "lol", "yeah", "um"],
    }
}

/// Deterministic pseudo-word filler list, disjoint from every lexicon word and stem.
pub fn filler_words(spec: &GeneratorSpec) -> Vec<String> {
    let stemmer = Stemmer::create(Algorithm::English);
    let reserved: BTreeSet<String> = spec
        .codes
        .values()
        .flat_map(|p| p.lexicon.iter())
        .flat_map(|w| [w.clone(), stemmer.stem(w).into_owned()])
        .collect();
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables: Vec<String> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| format!("{}{}", c as char, v as char)))
        .collect();
    let mut out = Vec::with_capacity(FILLER_VOCABULARY);
    'outer: for a in &syllables {
        for b in &syllables {
            for tail in ["", "n"] {
                let w = format!("{a}{b}{tail}");
                if is_stopword(&w) || reserved.contains(&w) || reserved.contains(stemmer.stem(&w).as_ref()) {
                    continue;
                }
                out.push(w);
                if out.len() == FILLER_VOCABULARY {
                    break 'outer;
                }
            }
        }
    }
    out
}

fn plans(probability: impl Fn(MiCode) -> f64) -> BTreeMap<MiCode, CodePlan> {
    MiCode::ALL
        .iter()
        .map(|&c| {
            (
                c,
                CodePlan {
                    probability: probability(c),
                    drift_per_year: 0.0,
                    coefficient: 0.0,
                    context_dependent: false,
                    lexicon: default_lexicon(c).iter().map(|w| w.to_string()).collect(),
                },
            )
        })
        .collect()
}

/// Magnified planted coefficients with the signs of the reference findings.
pub fn magnified_coefficients() -> BTreeMap<MiCode, f64> {
    use MiCode::*;
    [
        (Reflection, 0.3),
        (Affirm, 0.3),
        (Persuade, 0.2),
        (Inappropriate, -0.3),
        (GivingInformation, -0.2),
        (Direct, -0.1),
    ]
    .into_iter()
    .collect()
}

/// Reference-magnitude coefficients.
pub fn reference_coefficients() -> BTreeMap<MiCode, f64> {
    use MiCode::*;
    [
        (Affirm, 0.036),
        (EmphasizingAutonomy, 0.078),
        (OpenQuestion, 0.0),
        (ClosedQuestion, 0.011),
        (Persuade, 0.018),
        (Reflection, 0.035),
        (SeekingCollaboration, 0.0),
        (Direct, 0.019),
        (Inappropriate, -0.086),
        (Grounding, 0.008),
        (GivingInformation, -0.025),
        (Support, 0.013),
        (PersonalDisclosure, 0.001),
        (Introduction, 0.0),
        (Conclusion, 0.014),
        (ChitChat, -0.004),
    ]
    .into_iter()
    .collect()
}

impl GeneratorSpec {
    fn base(seed: u64, n_conversations: usize, codes: BTreeMap<MiCode, CodePlan>) -> Self {
        GeneratorSpec {
            seed,
            n_conversations,
            min_utterances: 30,
            max_utterances: 50,
            n_listeners: 40,
            n_members: (n_conversations / 3).max(1),
            listener_age: (18, 60),
            member_age: (18, 65),
            missing_age_rate: 0.0,
            unrated_rate: 0.0,
            tenure_span_days: DRIFT_HORIZON_DAYS,
            keywords_per_code: 1,
            filler_tokens: (2, 6),
            codes,
            bundles: Vec::new(),
            controls: Controls {
                intercept: 0.0,
                member_age: 0.0,
                listener_age: 0.0,
                past_rating: 0.0,
                past_rating_fallback: 3.0,
            },
            start: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    fn set_coefficients(&mut self, coefs: &BTreeMap<MiCode, f64>) {
        for (code, plan) in self.codes.iter_mut() {
            plan.coefficient = coefs.get(code).copied().unwrap_or(0.0);
        }
    }

    /// Reference-scale sample: 734 conversations, reference code frequencies,
    /// an Introduction/OpenQuestion bundle, some unrated conversations and missing ages.
    pub fn sample(seed: u64) -> Self {
        let mut spec = Self::base(
            seed,
            734,
            plans(|c| REFERENCE_COUNTS[c.index()] as f64 / REFERENCE_UTTERANCES as f64),
        );
        spec.missing_age_rate = 0.02;
        spec.unrated_rate = 0.1;
        spec.bundles.push(Bundle {
            codes: vec![MiCode::Introduction, MiCode::OpenQuestion],
            probability: 0.04,
        });
        spec.set_coefficients(&magnified_coefficients());
        spec.controls = Controls {
            intercept: -0.2,
            member_age: -0.01,
            listener_age: -0.005,
            past_rating: 0.3,
            past_rating_fallback: 3.0,
        };
        spec.codes.get_mut(&MiCode::Affirm).unwrap().drift_per_year = 0.01;
        spec.codes.get_mut(&MiCode::Reflection).unwrap().drift_per_year = -0.02;
        spec
    }

    /// Every code equally likely and always carries its keyword.
    pub fn separable(seed: u64) -> Self {
        let mut spec = Self::base(seed, 4000, plans(|_| 1.3 / MiCode::COUNT as f64));
        spec.min_utterances = 14;
        spec.max_utterances = 20;
        spec.filler_tokens = (1, 4);
        spec
    }

    /// As [`GeneratorSpec::separable`] with Reflection signalled only by the preceding utterance.
    pub fn context(seed: u64) -> Self {
        let mut spec = Self::separable(seed);
        spec.codes.get_mut(&MiCode::Reflection).unwrap().context_dependent = true;
        spec
    }

    /// Many short conversations with magnified coefficients, for coefficient recovery.
    pub fn recovery(seed: u64, n_conversations: usize) -> Self {
        let mut spec = Self::base(
            seed,
            n_conversations,
            plans(|c| if c == MiCode::Other { 0.06 } else { 0.09 }),
        );
        spec.min_utterances = 24;
        spec.max_utterances = 36;
        spec.n_listeners = 200;
        spec.n_members = (n_conversations / 5).max(1);
        spec.filler_tokens = (0, 1);
        spec.set_coefficients(&magnified_coefficients());
        spec.controls = Controls {
            intercept: -0.6,
            member_age: -0.01,
            listener_age: -0.005,
            past_rating: 0.3,
            past_rating_fallback: 3.0,
        };
        spec
    }

    /// Affirm rises from 0.05 at joining to 0.15 at two years; `drift = false` keeps it flat.
    pub fn trend(seed: u64, drift: bool) -> Self {
        let mut spec = Self::base(
            seed,
            6000,
            plans(|c| match c {
                MiCode::Affirm => 0.05,
                MiCode::Other => 0.25,
                _ => 0.06,
            }),
        );
        spec.min_utterances = 20;
        spec.max_utterances = 24;
        spec.filler_tokens = (0, 1);
        if drift {
            spec.codes.get_mut(&MiCode::Affirm).unwrap().drift_per_year = 0.05;
            spec.codes.get_mut(&MiCode::Other).unwrap().drift_per_year = -0.05;
        }
        spec
    }

    /// Reference code frequencies and reference-magnitude coefficients, for large-n runs.
    pub fn reference(seed: u64, n_conversations: usize) -> Self {
        let mut spec = Self::sample(seed);
        spec.n_conversations = n_conversations;
        spec.n_members = (n_conversations / 5).max(1);
        spec.n_listeners = (n_conversations / 50).max(40);
        spec.missing_age_rate = 0.0;
        spec.unrated_rate = 0.0;
        spec.set_coefficients(&reference_coefficients());
        spec.controls = Controls {
            intercept: -1.2,
            member_age: -0.007,
            listener_age: -0.003,
            past_rating: 0.522,
            past_rating_fallback: 3.0,
        };
        spec
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        Ok(match name {
            "sample" => Self::sample(seed),
            "separable" => Self::separable(seed),
            "context" => Self::context(seed),
            "recovery" => Self::recovery(seed, 20_000),
            "trend" => Self::trend(seed, true),
            "flat" => Self::trend(seed, false),
            "reference" => Self::reference(seed, 100_000),
            other => return Err(Error::InvalidSpec(format!("unknown preset {other:?}"))),
        })
    }

    pub const PRESETS: [&'static str; 7] = ["sample", "separable", "context", "recovery", "trend", "flat", "reference"];

    /// Marginal inclusion probability of `code` at the given tenure.
    pub fn probability_at(&self, code: MiCode, tenure_days: i64) -> f64 {
        let plan = &self.codes[&code];
        let t = tenure_days.clamp(0, DRIFT_HORIZON_DAYS) as f64 / 365.0;
        plan.probability + plan.drift_per_year * t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_conversations == 0 || self.n_listeners == 0 || self.n_members == 0 {
            return bad("conversation, listener and member counts must be positive".into());
        }
        if self.min_utterances < 2 || self.min_utterances > self.max_utterances {
            return bad(format!(
                "utterance range {}..={} must start at 2 or more",
                self.min_utterances, self.max_utterances
            ));
        }
        if self.listener_age.0 > self.listener_age.1 || self.member_age.0 > self.member_age.1 {
            return bad("age ranges must be ordered".into());
        }
        if self.filler_tokens.0 > self.filler_tokens.1 {
            return bad("filler token range must be ordered".into());
        }
        for (name, r) in [("missing_age_rate", self.missing_age_rate), ("unrated_rate", self.unrated_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0,1]"));
            }
        }
        if !(1..=DRIFT_HORIZON_DAYS * 4).contains(&self.tenure_span_days) {
            return bad(format!("tenure span {} days out of range", self.tenure_span_days));
        }
        if self.keywords_per_code == 0 {
            return bad("keywords_per_code must be positive".into());
        }
        for code in MiCode::ALL {
            let Some(plan) = self.codes.get(&code) else {
                return bad(format!("no plan for {code}"));
            };
            if plan.lexicon.is_empty() && (plan.probability > 0.0 || plan.drift_per_year != 0.0) {
                return bad(format!("empty lexicon for active code {code}"));
            }
            if !plan.coefficient.is_finite() {
                return bad(format!("coefficient for {code} is not finite"));
            }
        }
        if self.codes[&MiCode::Other].coefficient != 0.0 {
            return bad("Other is not a regression covariate; its coefficient must be 0".into());
        }
        let mut owner: HashMap<&str, MiCode> = HashMap::new();
        for (&code, plan) in &self.codes {
            for w in &plan.lexicon {
                let tokens = crate::classifier::tokenize(w);
                if tokens.len() != 1 || tokens[0] != *w {
                    return bad(format!("lexicon entry {w:?} for {code} is not a single lowercase token"));
                }
                if let Some(prev) = owner.insert(w, code) {
                    if prev != code {
                        return bad(format!("keyword {w:?} shared by {prev} and {code}"));
                    }
                }
            }
        }
        let mut bundled = CodeSet::empty();
        for b in &self.bundles {
            let set: CodeSet = b.codes.iter().copied().collect();
            if set.len() < 2 || set.len() != b.codes.len() || set.len() > 3 {
                return bad(format!("bundle {set} must hold 2 or 3 distinct codes"));
            }
            if set.union(bundled).len() != set.len() + bundled.len() {
                return bad(format!("bundle {set} overlaps another bundle"));
            }
            if !(0.0..=1.0).contains(&b.probability) {
                return bad(format!("bundle probability {} outside [0,1]", b.probability));
            }
            bundled = bundled.union(set);
        }
        for days in [0, DRIFT_HORIZON_DAYS] {
            let items = self.layout(days);
            for it in &items {
                if !(0.0..=1.0).contains(&it.mass) {
                    return bad(format!(
                        "inclusion probability {:.4} for {} at tenure {days}d outside [0,1]",
                        it.mass, it.codes
                    ));
                }
            }
            for b in &self.bundles {
                let block: f64 = items
                    .iter()
                    .filter(|it| it.codes.is_subset(b_set(b)))
                    .map(|it| it.mass)
                    .sum();
                if block > 1.0 + 1e-12 {
                    return bad(format!("bundle {} and its members exceed probability 1", b_set(b)));
                }
            }
            let total: f64 = items.iter().map(|it| it.mass).sum();
            if total < 1.0 - 1e-12 {
                return bad(format!(
                    "code probabilities sum to {total:.4} at tenure {days}d; at least 1 is needed"
                ));
            }
            let picks = (total - 1e-12).ceil() as usize;
            let mut sizes: Vec<usize> = items.iter().filter(|it| it.mass > 0.0).map(|it| it.codes.len()).collect();
            sizes.sort_unstable_by(|a, b| b.cmp(a));
            let worst: usize = sizes.iter().take(picks).sum();
            if worst > 3 {
                return bad(format!(
                    "up to {worst} codes per utterance possible at tenure {days}d (sum {total:.4}); at most 3 allowed"
                ));
            }
        }
        Ok(())
    }

    /// Sampling units at a tenure: each bundle block (members then the bundle), then the remaining codes.
    fn layout(&self, tenure_days: i64) -> Vec<Item> {
        let mut items = Vec::with_capacity(MiCode::COUNT + self.bundles.len());
        let mut placed = CodeSet::empty();
        for (block, b) in self.bundles.iter().enumerate() {
            for &c in &b.codes {
                items.push(Item {
                    codes: std::iter::once(c).collect(),
                    mass: self.probability_at(c, tenure_days) - b.probability,
                    block,
                });
                placed.insert(c);
            }
            items.push(Item {
                codes: b_set(b),
                mass: b.probability,
                block,
            });
        }
        for c in MiCode::ALL {
            if !placed.contains(c) {
                items.push(Item {
                    codes: std::iter::once(c).collect(),
                    mass: self.probability_at(c, tenure_days),
                    block: usize::MAX,
                });
            }
        }
        items
    }
}

fn b_set(b: &Bundle) -> CodeSet {
    b.codes.iter().copied().collect()
}

#[derive(Debug, Clone)]
struct Item {
    codes: CodeSet,
    mass: f64,
    /// Bundle index the item is tied to; such items stay contiguous when shuffled.
    block: usize,
}

/// Systematic sampling: unit-spaced points from a uniform start select each item
/// with probability equal to its mass. Items sharing a block of total mass <= 1
/// are mutually exclusive.
fn systematic_sample(items: &[Item], rng: &mut impl Rng) -> CodeSet {
    let mut groups: Vec<&[Item]> = Vec::new();
    let mut i = 0;
    while i < items.len() {
        let mut j = i + 1;
        while j < items.len() && items[i].block != usize::MAX && items[j].block == items[i].block {
            j += 1;
        }
        groups.push(&items[i..j]);
        i = j;
    }
    groups.shuffle(rng);
    let mut point: f64 = rng.gen();
    let mut lo = 0.0;
    let mut set = CodeSet::empty();
    for it in groups.into_iter().flatten() {
        let hi = lo + it.mass;
        if point < hi && it.mass > 0.0 {
            set = set.union(it.codes);
            point += 1.0;
        }
        lo = hi;
    }
    set
}

fn sub_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_POPULATION: u64 = 1;
const STREAM_CONVERSATION: u64 = 2;
const STREAM_RATING: u64 = 3;

struct Draft {
    utterances: Vec<Utterance>,
    listener_labels: Vec<(usize, CodeSet)>,
    probabilities: Vec<[f64; MiCode::COUNT]>,
}

struct Slot {
    listener: usize,
    member: usize,
    start: DateTime<Utc>,
    /// The listener's first utterance in the corpus.
    join: DateTime<Utc>,
}

pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Generated> {
    spec.validate()?;
    let filler = filler_words(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, STREAM_POPULATION, 0));

    let age = |range: (u32, u32), rng: &mut ChaCha8Rng| {
        let a = rng.gen_range(range.0..=range.1);
        (rng.gen::<f64>() >= spec.missing_age_rate).then_some(a)
    };
    let listener_ages: Vec<Option<u32>> = (0..spec.n_listeners).map(|_| age(spec.listener_age, &mut rng)).collect();
    let member_ages: Vec<Option<u32>> = (0..spec.n_members).map(|_| age(spec.member_age, &mut rng)).collect();
    let joins: Vec<DateTime<Utc>> = (0..spec.n_listeners)
        .map(|_| spec.start + Duration::seconds(rng.gen_range(0..365 * 86_400)))
        .collect();

    // Tenure offsets spread evenly over the buckets so each gets similar volume.
    let span = spec.tenure_span_days;
    let bucket_edges: Vec<i64> = [0, 30, 180, 365, span.max(366)]
        .into_iter()
        .map(|d| d.min(span.max(1)))
        .collect();
    let mut seen_listener = vec![false; spec.n_listeners];
    let slots: Vec<Slot> = (0..spec.n_conversations)
        .map(|_| {
            let listener = rng.gen_range(0..spec.n_listeners);
            let member = rng.gen_range(0..spec.n_members);
            let offset_secs = if !seen_listener[listener] {
                seen_listener[listener] = true;
                0
            } else {
                let b = rng.gen_range(0..4);
                let (lo, hi) = (bucket_edges[b] * 86_400, bucket_edges[b + 1] * 86_400);
                if hi > lo { rng.gen_range(lo..hi) } else { lo }
            };
            Slot {
                listener,
                member,
                start: joins[listener] + Duration::seconds(offset_secs),
                join: joins[listener] + Duration::seconds(UTTERANCE_GAP_SECS),
            }
        })
        .collect();

    let width = spec.n_conversations.saturating_sub(1).to_string().len().max(6);
    let conv_id = |i: usize| format!("c{i:0width$}");

    let drafts: Vec<Draft> = slots
        .par_iter()
        .enumerate()
        .map(|(i, slot)| draft_conversation(spec, &filler, &conv_id(i), i, slot))
        .collect();

    // Ratings follow the planted logistic model, member by member in time order.
    let mut order: Vec<usize> = (0..spec.n_conversations).collect();
    order.sort_by(|&a, &b| slots[a].start.cmp(&slots[b].start).then(a.cmp(&b)));
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); spec.n_members];
    let mut ratings: Vec<Option<Rating>> = vec![None; spec.n_conversations];
    let mut satisfied = BTreeMap::new();
    let mid = |r: (u32, u32)| (r.0 + r.1) as f64 / 2.0;
    for i in order {
        let slot = &slots[i];
        let mut rr = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, STREAM_RATING, i as u64));
        if rr.gen::<f64>() < spec.unrated_rate {
            continue;
        }
        let past = &history[slot.member];
        let past_avg = if past.is_empty() {
            spec.controls.past_rating_fallback
        } else {
            past.iter().sum::<f64>() / past.len() as f64
        };
        let c = &spec.controls;
        let mut eta = c.intercept
            + c.member_age * member_ages[slot.member].map_or(mid(spec.member_age), f64::from)
            + c.listener_age * listener_ages[slot.listener].map_or(mid(spec.listener_age), f64::from)
            + c.past_rating * past_avg;
        for (_, set) in &drafts[i].listener_labels {
            for code in set.iter() {
                eta += spec.codes[&code].coefficient;
            }
        }
        let sat = rr.gen::<f64>() < logistic(eta);
        let value = if sat { rr.gen_range(4..=5) } else { rr.gen_range(1..=3) };
        ratings[i] = Some(Rating::new(value)?);
        history[slot.member].push(value as f64);
        satisfied.insert(conv_id(i), sat);
    }

    let mut expected_counts: BTreeMap<MiCode, f64> = MiCode::ALL.iter().map(|&c| (c, 0.0)).collect();
    let mut expected_variance = expected_counts.clone();
    let mut observed_counts: BTreeMap<MiCode, u64> = MiCode::ALL.iter().map(|&c| (c, 0)).collect();
    let mut conversations = Vec::with_capacity(spec.n_conversations);
    let mut labels = Vec::new();
    let (mut n_utt, mut n_listener) = (0, 0);
    for (i, (draft, slot)) in drafts.into_iter().zip(&slots).enumerate() {
        n_utt += draft.utterances.len();
        n_listener += draft.listener_labels.len();
        for p in &draft.probabilities {
            for code in MiCode::ALL {
                let q = p[code.index()];
                *expected_counts.get_mut(&code).unwrap() += q;
                *expected_variance.get_mut(&code).unwrap() += q * (1.0 - q);
            }
        }
        for (idx, set) in &draft.listener_labels {
            for code in set.iter() {
                *observed_counts.get_mut(&code).unwrap() += 1;
            }
            let u = &draft.utterances[*idx];
            labels.push(LabelRecord {
                utterance_id: u.utterance_id.clone(),
                source: Source::consensus(),
                codes: set.iter().collect(),
                confidence: None,
                decided_at: u.timestamp,
            });
        }
        conversations.push(Conversation {
            conversation_id: conv_id(i),
            listener_id: format!("l{:04}", slot.listener),
            member_id: format!("m{:05}", slot.member),
            listener_age: listener_ages[slot.listener],
            member_age: member_ages[slot.member],
            rating: ratings[i],
            utterances: draft.utterances,
        });
    }

    Ok(Generated {
        corpus: Corpus::new(conversations),
        labels,
        planted: PlantedRecord {
            spec: spec.clone(),
            conversations: spec.n_conversations,
            utterances: n_utt,
            listener_utterances: n_listener,
            expected_counts,
            expected_variance,
            observed_counts,
            satisfied,
        },
    })
}

fn draft_conversation(spec: &GeneratorSpec, filler: &[String], conv_id: &str, i: usize, slot: &Slot) -> Draft {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, STREAM_CONVERSATION, i as u64));
    let len = rng.gen_range(spec.min_utterances..=spec.max_utterances);
    let mut texts: Vec<Vec<&str>> = vec![Vec::new(); len];
    let mut listener_labels = Vec::new();
    let mut probabilities = Vec::new();
    let mut layout_cache: Option<(i64, Vec<Item>)> = None;
    for idx in 0..len {
        let fill = rng.gen_range(spec.filler_tokens.0..=spec.filler_tokens.1);
        for _ in 0..fill {
            texts[idx].push(&filler[rng.gen_range(0..filler.len())]);
        }
        if idx % 2 == 0 {
            continue;
        }
        let at = slot.start + Duration::seconds(idx as i64 * UTTERANCE_GAP_SECS);
        let tenure = (at - slot.join).num_days().max(0);
        if layout_cache.as_ref().is_none_or(|(t, _)| *t != tenure) {
            layout_cache = Some((tenure, spec.layout(tenure)));
        }
        let items = &layout_cache.as_ref().unwrap().1;
        let set = systematic_sample(items, &mut rng);
        let mut p = [0.0; MiCode::COUNT];
        for c in MiCode::ALL {
            p[c.index()] = spec.probability_at(c, tenure);
        }
        probabilities.push(p);
        for code in set.iter() {
            let plan = &spec.codes[&code];
            let target = if plan.context_dependent { idx - 1 } else { idx };
            for _ in 0..spec.keywords_per_code {
                texts[target].push(&plan.lexicon[rng.gen_range(0..plan.lexicon.len())]);
            }
        }
        listener_labels.push((idx, set));
    }
    let utterances = texts
        .into_iter()
        .enumerate()
        .map(|(idx, mut words)| {
            words.shuffle(&mut rng);
            if words.is_empty() {
                words.push(&filler[rng.gen_range(0..filler.len())]);
            }
            Utterance {
                utterance_id: format!("{conv_id}-u{idx:04}"),
                conversation_id: conv_id.to_string(),
                index: idx,
                speaker: if idx % 2 == 0 { SpeakerRole::Member } else { SpeakerRole::Listener },
                timestamp: slot.start + Duration::seconds(idx as i64 * UTTERANCE_GAP_SECS),
                text: words.join(" "),
            }
        })
        .collect();
    Draft {
        utterances,
        listener_labels,
        probabilities,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::resolve_labels;

    fn small(mut spec: GeneratorSpec, n: usize) -> GeneratorSpec {
        spec.n_conversations = n;
        spec.n_members = (n / 3).max(1);
        spec
    }

    #[test]
    fn presets_validate() {
        for name in GeneratorSpec::PRESETS {
            GeneratorSpec::preset(name, 1).unwrap().validate().unwrap();
        }
        assert!(GeneratorSpec::preset("nope", 1).is_err());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let mut s = GeneratorSpec::separable(1);
        s.codes.get_mut(&MiCode::Affirm).unwrap().lexicon.clear();
        assert!(matches!(generate_corpus(&s), Err(Error::InvalidSpec(_))));

        let mut s = GeneratorSpec::separable(1);
        s.codes.get_mut(&MiCode::Affirm).unwrap().lexicon.push("hello".into());
        assert!(s.validate().is_err());

        let mut s = GeneratorSpec::separable(1);
        for p in s.codes.values_mut() {
            p.probability = 0.2;
        }
        assert!(s.validate().is_err(), "sum 3.4 allows more than 3 codes");

        let mut s = GeneratorSpec::separable(1);
        s.codes.get_mut(&MiCode::Other).unwrap().coefficient = 0.1;
        assert!(s.validate().is_err());
    }

    #[test]
    fn filler_is_disjoint_from_lexicons() {
        let spec = GeneratorSpec::sample(1);
        let filler = filler_words(&spec);
        assert_eq!(filler.len(), FILLER_VOCABULARY);
        let lex: BTreeSet<&String> = spec.codes.values().flat_map(|p| &p.lexicon).collect();
        assert!(filler.iter().all(|w| !lex.contains(w)));
        assert_eq!(filler.iter().collect::<BTreeSet<_>>().len(), filler.len());
    }

    #[test]
    fn deterministic_and_well_formed() {
        let spec = small(GeneratorSpec::sample(7), 60);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        let mut wa = Vec::new();
        let mut wb = Vec::new();
        crate::corpus::write_corpus_to(&a.corpus, &mut wa).unwrap();
        crate::corpus::write_corpus_to(&b.corpus, &mut wb).unwrap();
        assert_eq!(wa, wb);
        assert_eq!(a.labels, b.labels);

        let labels = resolve_labels(&a.labels);
        for conv in a.corpus.conversations() {
            for (_, u) in conv.listener_utterances() {
                let set = labels[&u.utterance_id];
                assert!((1..=3).contains(&set.len()));
            }
            assert!(conv.utterances.iter().all(|u| !u.text.trim().is_empty()));
            if let Some(class) = conv.satisfaction() {
                let sat = a.planted.satisfied[&conv.conversation_id];
                assert_eq!(class == crate::corpus::SatisfactionClass::Satisfactory, sat);
            }
        }
        assert_eq!(labels.len(), a.planted.listener_utterances);
    }

    #[test]
    fn listener_first_conversation_starts_at_join() {
        let g = generate_corpus(&small(GeneratorSpec::trend(3, true), 300)).unwrap();
        let joins = crate::corpus::listener_join_times(&g.corpus);
        let mut first = HashMap::new();
        for conv in g.corpus.conversations() {
            let (_, u) = conv.listener_utterances().next().unwrap();
            assert!(u.timestamp >= joins[&conv.listener_id]);
            let e = first.entry(conv.listener_id.clone()).or_insert(u.timestamp);
            *e = (*e).min(u.timestamp);
        }
        for (l, t) in first {
            assert_eq!(t, joins[&l]);
        }
    }

    #[test]
    fn context_keyword_lands_in_preceding_utterance() {
        let g = generate_corpus(&small(GeneratorSpec::context(5), 50)).unwrap();
        let labels = resolve_labels(&g.labels);
        let lex: BTreeSet<String> = default_lexicon(MiCode::Reflection).iter().map(|s| s.to_string()).collect();
        let has = |t: &str| crate::classifier::tokenize(t).iter().any(|w| lex.contains(w));
        let mut n = 0;
        for conv in g.corpus.conversations() {
            for (i, u) in conv.listener_utterances() {
                if labels[&u.utterance_id].contains(MiCode::Reflection) {
                    n += 1;
                    assert!(has(&conv.utterances[i - 1].text));
                }
                assert!(!has(&u.text));
            }
        }
        assert!(n > 0);
    }

    #[test]
    fn bundle_members_cooccur() {
        let g = generate_corpus(&small(GeneratorSpec::sample(11), 300)).unwrap();
        let both = g
            .labels
            .iter()
            .filter(|r| {
                let s = r.code_set();
                s.contains(MiCode::Introduction) && s.contains(MiCode::OpenQuestion)
            })
            .count();
        assert!(both > 0);
    }

    #[test]
    fn null_model_share_matches_intercept() {
        let mut spec = small(GeneratorSpec::recovery(2, 4000), 4000);
        spec.set_coefficients(&BTreeMap::new());
        spec.controls = Controls {
            intercept: 0.4,
            member_age: 0.0,
            listener_age: 0.0,
            past_rating: 0.0,
            past_rating_fallback: 3.0,
        };
        let g = generate_corpus(&spec).unwrap();
        let share = g.planted.satisfied.values().filter(|&&s| s).count() as f64 / 4000.0;
        let p = logistic(0.4);
        let se = (p * (1.0 - p) / 4000.0).sqrt();
        assert!((share - p).abs() < 4.0 * se, "{share} vs {p}");
    }
}
