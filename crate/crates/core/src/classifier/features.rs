//! Hashed n-gram featurization.
//!
//! Word unigrams, word bigrams and character 3-5 grams of each word (with `<`
//! and `>` boundary markers) are hashed into a 2^20 space, counted, and the
//! count vector is L2-normalized.

pub const FEATURE_BITS: u32 = 20;
pub const FEATURE_DIM: usize = 1 << FEATURE_BITS;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

const KIND_WORD: u8 = 1;
const KIND_BIGRAM: u8 = 2;
const KIND_CHAR: u8 = 3;

/// Sparse, L2-normalized feature vector with sorted distinct indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn fnv1a(kind: u8, parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    };
    eat(kind);
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            eat(0x1f);
        }
        p.iter().copied().for_each(&mut eat);
    }
    h
}

/// Multiplicative (Fibonacci) hashing onto the feature space.
#[inline]
fn bucket(h: u64) -> u32 {
    (h.wrapping_mul(GOLDEN) >> (64 - FEATURE_BITS)) as u32
}

/// Lowercased alphanumeric word tokens; apostrophes are dropped so "don't" becomes "dont".
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if ch == '\'' || ch == '\u{2019}' {
            continue;
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Raw (unnormalized) hashed feature ids, one entry per occurrence.
pub fn raw_feature_ids(text: &str) -> Vec<u32> {
    let words = tokenize(text);
    let mut ids = Vec::with_capacity(words.len() * 12);
    for w in &words {
        ids.push(bucket(fnv1a(KIND_WORD, &[w.as_bytes()])));
    }
    for pair in words.windows(2) {
        ids.push(bucket(fnv1a(KIND_BIGRAM, &[pair[0].as_bytes(), pair[1].as_bytes()])));
    }
    let mut buf = String::new();
    for w in &words {
        let chars: Vec<char> = std::iter::once('<')
            .chain(w.chars())
            .chain(std::iter::once('>'))
            .collect();
        for n in 3..=5 {
            for gram in chars.windows(n) {
                buf.clear();
                buf.extend(gram.iter());
                ids.push(bucket(fnv1a(KIND_CHAR, &[buf.as_bytes()])));
            }
        }
    }
    ids
}

/// Counts hashed ids and L2-normalizes.
pub fn featurize(text: &str) -> FeatureVector {
    let mut ids = raw_feature_ids(text);
    if ids.is_empty() {
        return FeatureVector::default();
    }
    ids.sort_unstable();
    let mut indices = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    for id in ids {
        if indices.last() == Some(&id) {
            *values.last_mut().unwrap() += 1.0;
        } else {
            indices.push(id);
            values.push(1.0);
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    values.iter_mut().for_each(|v| *v /= norm);
    FeatureVector { indices, values }
}
