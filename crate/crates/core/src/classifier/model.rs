use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureVector, FEATURE_DIM};
use crate::codes::MiCode;
use crate::corpus::ContextualUtterance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub l2_penalty: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            l2_penalty: 1e-4,
            epochs: 20,
            learning_rate: 0.5,
            seed: 0,
        }
    }
}

/// Binary logistic model for one code at one context size.
///
/// Weights are kept sparse: only features touched during training are stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeClassifier {
    pub code: MiCode,
    pub k: usize,
    pub hyper: Hyper,
    pub bias: f64,
    /// `(feature id, weight)` sorted by feature id.
    pub weights: Vec<(u32, f64)>,
    pub training_set_hash: String,
    /// Training objective after each epoch.
    pub loss_history: Vec<f64>,
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(z))`.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl CodeClassifier {
    /// A model with no weights; predicts `logistic(bias)` everywhere.
    pub fn constant(code: MiCode, k: usize, bias: f64) -> Self {
        CodeClassifier {
            code,
            k,
            hyper: Hyper::default(),
            bias,
            weights: Vec::new(),
            training_set_hash: String::new(),
            loss_history: Vec::new(),
        }
    }

    pub fn margin(&self, fv: &FeatureVector) -> f64 {
        let mut z = self.bias;
        for (idx, v) in fv.iter() {
            if let Ok(pos) = self.weights.binary_search_by_key(&idx, |&(i, _)| i) {
                z += self.weights[pos].1 * v;
            }
        }
        z
    }

    pub fn predict_features(&self, fv: &FeatureVector) -> f64 {
        logistic(self.margin(fv))
    }
}

pub fn predict_code(model: &CodeClassifier, cu: &ContextualUtterance) -> Result<f64> {
    if model.k != cu.k {
        return Err(Error::ContextMismatch {
            model: model.k,
            input: cu.k,
        });
    }
    Ok(model.predict_features(&featurize(&cu.context_text)))
}

/// FNV-1a over the `(context_text, label)` sequence, as 16 hex digits.
pub fn hash_training_set<'a>(items: impl IntoIterator<Item = (&'a str, bool)>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |b: u8| {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    };
    for (text, y) in items {
        text.bytes().for_each(&mut eat);
        eat(0);
        eat(y as u8);
    }
    format!("{h:016x}")
}

pub fn train_code_classifier(
    examples: &[(ContextualUtterance, bool)],
    code: MiCode,
    k: usize,
    hyper: Hyper,
) -> Result<CodeClassifier> {
    if let Some((cu, _)) = examples.iter().find(|(cu, _)| cu.k != k) {
        return Err(Error::ContextMismatch { model: k, input: cu.k });
    }
    let features: Vec<FeatureVector> = examples.iter().map(|(cu, _)| featurize(&cu.context_text)).collect();
    let labels: Vec<bool> = examples.iter().map(|(_, y)| *y).collect();
    let hash = hash_training_set(examples.iter().map(|(cu, y)| (cu.context_text.as_str(), *y)));
    train_on_features(&features, &labels, code, k, hyper, hash)
}

/// Seed for one (code, k) trainer, derived from the run seed.
fn trainer_seed(seed: u64, code: MiCode, k: usize) -> u64 {
    seed ^ ((code.index() as u64 + 1) << 32) ^ (k as u64).wrapping_mul(0x9e37_79b9)
}

/// Minimizes the L2-regularized, class-weighted logistic loss by seeded SGD.
///
/// Per-example weights are inverse class frequencies rescaled so the larger
/// one is 1. The learning rate decays as `lr / (1 + lr * l2 * t)`. The L2
/// shrinkage is applied lazily through a global scale factor.
pub fn train_on_features(
    features: &[FeatureVector],
    labels: &[bool],
    code: MiCode,
    k: usize,
    hyper: Hyper,
    training_set_hash: String,
) -> Result<CodeClassifier> {
    assert_eq!(features.len(), labels.len());
    let n = labels.len();
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let (w_pos, w_neg) = {
        let wp = n as f64 / (2.0 * n_pos as f64);
        let wn = n as f64 / (2.0 * n_neg as f64);
        let m = wp.max(wn);
        (wp / m, wn / m)
    };
    let weight = |y: bool| if y { w_pos } else { w_neg };
    let lambda = hyper.l2_penalty;

    let mut v = vec![0.0f64; FEATURE_DIM];
    let mut touched = vec![false; FEATURE_DIM];
    let mut touched_ids: Vec<u32> = Vec::new();
    let mut scale = 1.0f64;
    let mut bias = 0.0f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(trainer_seed(hyper.seed, code, k));
    let mut t: u64 = 0;
    let mut loss_history = Vec::with_capacity(hyper.epochs);

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = hyper.learning_rate / (1.0 + hyper.learning_rate * lambda * t as f64);
            t += 1;
            let fv = &features[i];
            let dot: f64 = fv.iter().map(|(j, x)| v[j as usize] * x).sum();
            let p = logistic(scale * dot + bias);
            let y = if labels[i] { 1.0 } else { 0.0 };
            let g = weight(labels[i]) * (p - y);

            scale *= 1.0 - eta * lambda;
            if scale < 1e-9 {
                for &j in &touched_ids {
                    v[j as usize] *= scale;
                }
                scale = 1.0;
            }
            let step = eta * g / scale;
            for (j, x) in fv.iter() {
                let j = j as usize;
                if !touched[j] {
                    touched[j] = true;
                    touched_ids.push(j as u32);
                }
                v[j] -= step * x;
            }
            bias -= eta * g;
        }
        loss_history.push(objective(features, labels, &v, scale, bias, &touched_ids, lambda, &weight));
    }

    touched_ids.sort_unstable();
    let weights = touched_ids
        .iter()
        .map(|&j| (j, v[j as usize] * scale))
        .filter(|&(_, w)| w != 0.0)
        .collect();
    Ok(CodeClassifier {
        code,
        k,
        hyper,
        bias,
        weights,
        training_set_hash,
        loss_history,
    })
}

#[allow(clippy::too_many_arguments)]
fn objective(
    features: &[FeatureVector],
    labels: &[bool],
    v: &[f64],
    scale: f64,
    bias: f64,
    touched: &[u32],
    lambda: f64,
    weight: &impl Fn(bool) -> f64,
) -> f64 {
    let data: f64 = features
        .iter()
        .zip(labels)
        .map(|(fv, &y)| {
            let z = scale * fv.iter().map(|(j, x)| v[j as usize] * x).sum::<f64>() + bias;
            // -log p for positives, -log(1-p) for negatives
            weight(y) * if y { softplus(-z) } else { softplus(z) }
        })
        .sum::<f64>()
        / labels.len() as f64;
    let sq: f64 = touched.iter().map(|&j| v[j as usize] * v[j as usize]).sum::<f64>() * scale * scale;
    data + 0.5 * lambda * sq
}
