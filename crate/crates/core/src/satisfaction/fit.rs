use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::classifier::logistic;
use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 100;
pub const TOLERANCE: f64 = 1e-8;
pub const SEPARATION_RIDGE: f64 = 1e-6;
pub const INTERCEPT: &str = "Intercept";

/// Weighted logistic regression result. Index 0 is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit {
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub z_scores: Vec<f64>,
    pub p_values: Vec<f64>,
    pub odds_ratios: Vec<f64>,
    pub log_likelihood: f64,
    pub aic: f64,
    pub n_obs: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Ridge penalty applied to the slopes; non-zero only after separation was detected.
    pub ridge: f64,
    /// Covariates removed because they were constant across all rows.
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

impl RegressionFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn odds_ratio(coefficient: f64) -> f64 {
    coefficient.exp()
}

/// Two-sided p-value of a standard normal statistic.
pub fn wald_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else if p < 0.1 {
        "⊙"
    } else {
        ""
    }
}

#[inline]
fn log1pexp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `Σ w_i [y_i log p_i + (1 - y_i) log(1 - p_i)]`.
pub fn weighted_log_likelihood(x: &DMatrix<f64>, y: &[bool], w: &[f64], beta: &[f64]) -> f64 {
    let beta = DVector::from_column_slice(beta);
    let eta = x * beta;
    eta.iter()
        .zip(y)
        .zip(w)
        .map(|((&e, &yi), &wi)| -wi * if yi { log1pexp(-e) } else { log1pexp(e) })
        .sum()
}

struct Newton {
    beta: DVector<f64>,
    information: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

fn newton(x: &DMatrix<f64>, y: &[bool], w: &[f64], ridge: f64) -> Newton {
    let (n, p) = x.shape();
    let mut beta = DVector::zeros(p);
    let penalty = |b: &DVector<f64>| 0.5 * ridge * b.iter().skip(1).map(|v| v * v).sum::<f64>();
    let objective = |b: &DVector<f64>| weighted_log_likelihood(x, y, w, b.as_slice()) - penalty(b);
    let mut current = objective(&beta);
    let mut information = DMatrix::zeros(p, p);
    for iter in 1..=MAX_ITERATIONS {
        let eta = x * &beta;
        let mut grad = DVector::zeros(p);
        information.fill(0.0);
        for i in 0..n {
            let pi = logistic(eta[i]);
            let r = w[i] * ((y[i] as u8 as f64) - pi);
            let v = w[i] * pi * (1.0 - pi);
            let row = x.row(i);
            for a in 0..p {
                grad[a] += r * row[a];
                let va = v * row[a];
                for b in 0..=a {
                    information[(a, b)] += va * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                information[(b, a)] = information[(a, b)];
            }
        }
        for a in 1..p {
            grad[a] -= ridge * beta[a];
            information[(a, a)] += ridge;
        }
        let Some(chol) = information.clone().cholesky() else {
            return Newton { beta, information, iterations: iter, converged: false };
        };
        let mut step = chol.solve(&grad);
        // Halve the step until the penalized likelihood does not decrease.
        let mut next = &beta + &step;
        let mut value = objective(&next);
        let mut halvings = 0;
        while !(value >= current - 1e-12 * current.abs()) && halvings < 30 {
            step *= 0.5;
            next = &beta + &step;
            value = objective(&next);
            halvings += 1;
        }
        let max_step = step.amax();
        beta = next;
        current = value;
        if !beta.iter().all(|b| b.is_finite()) {
            return Newton { beta, information, iterations: iter, converged: false };
        }
        if max_step < TOLERANCE {
            return Newton { beta, information, iterations: iter, converged: true };
        }
    }
    Newton { beta, information, iterations: MAX_ITERATIONS, converged: false }
}

/// Largest |η| at which we consider fitted probabilities degenerate.
const SEPARATION_ETA: f64 = 30.0;

/// Fits `P(y=1) = logistic(Xβ)` by iteratively reweighted least squares
/// maximizing the weighted log-likelihood.
///
/// `x` must contain the intercept as column 0. Non-intercept columns that are
/// constant are dropped (and listed in `dropped`). If the plain fit fails to
/// converge or drives fitted logits to ±30, it is redone with a small ridge on
/// the slopes.
pub fn fit_weighted_logistic(x: &DMatrix<f64>, y: &[bool], w: &[f64], names: &[String]) -> Result<RegressionFit> {
    let (n, p) = x.shape();
    assert_eq!(y.len(), n);
    assert_eq!(w.len(), n);
    assert_eq!(names.len(), p);
    let pos = y.iter().filter(|&&v| v).count();
    if pos < 2 || n - pos < 2 {
        return Err(Error::Insufficient(format!(
            "need at least 2 rows per class, got {pos} positive and {} negative",
            n - pos
        )));
    }
    if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Invalid("observation weights must be positive and finite".into()));
    }

    let mut keep = vec![0usize];
    let mut dropped = Vec::new();
    let mut warnings = Vec::new();
    for j in 1..p {
        let col = x.column(j);
        if col.iter().all(|&v| v == col[0]) {
            dropped.push(names[j].clone());
            warnings.push(format!("covariate {} is constant and was dropped", names[j]));
        } else {
            keep.push(j);
        }
    }
    let xk = x.select_columns(&keep);
    let kept_names: Vec<String> = keep.iter().map(|&j| names[j].clone()).collect();

    let mut ridge = 0.0;
    let mut fit = newton(&xk, y, w, 0.0);
    let max_eta = (&xk * &fit.beta).amax();
    if !fit.converged || max_eta > SEPARATION_ETA {
        let culprit = offending_covariate(&xk, &fit.beta, &kept_names);
        ridge = SEPARATION_RIDGE;
        fit = newton(&xk, y, w, ridge);
        if !fit.converged {
            return Err(Error::Separation(culprit));
        }
        warnings.push(format!(
            "separation detected (largest effect: {culprit}); refit with ridge {SEPARATION_RIDGE}"
        ));
    }

    let cov = fit
        .information
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("information matrix is singular".into()))?;
    let k = keep.len();
    let coefficients: Vec<f64> = fit.beta.iter().copied().collect();
    let standard_errors: Vec<f64> = (0..k).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let z_scores: Vec<f64> = coefficients.iter().zip(&standard_errors).map(|(b, s)| b / s).collect();
    let p_values: Vec<f64> = z_scores.iter().map(|&z| wald_p(z)).collect();
    let log_likelihood = weighted_log_likelihood(&xk, y, w, &coefficients);
    Ok(RegressionFit {
        names: kept_names,
        odds_ratios: coefficients.iter().map(|&b| odds_ratio(b)).collect(),
        coefficients,
        standard_errors,
        z_scores,
        p_values,
        log_likelihood,
        aic: 2.0 * k as f64 - 2.0 * log_likelihood,
        n_obs: n,
        iterations: fit.iterations,
        converged: fit.converged,
        ridge,
        dropped,
        warnings,
    })
}

/// Slope with the largest effect on the linear predictor: |β_j| times the column's spread.
fn offending_covariate(x: &DMatrix<f64>, beta: &DVector<f64>, names: &[String]) -> String {
    (1..x.ncols())
        .map(|j| {
            let col = x.column(j);
            let spread = col.max() - col.min();
            (beta[j].abs() * spread, j)
        })
        .filter(|(v, _)| v.is_finite())
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map_or_else(|| INTERCEPT.to_string(), |(_, j)| names[j].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(p: usize) -> Vec<String> {
        std::iter::once(INTERCEPT.to_string())
            .chain((1..p).map(|j| format!("x{j}")))
            .collect()
    }

    #[test]
    fn intercept_only_matches_closed_form() {
        let y: Vec<bool> = (0..10).map(|i| i < 7).collect();
        let x = DMatrix::from_element(10, 1, 1.0);
        let fit = fit_weighted_logistic(&x, &y, &[1.0; 10], &names(1)).unwrap();
        assert!(fit.converged);
        assert!((fit.coefficients[0] - (7.0f64 / 3.0).ln()).abs() < 1e-9);
        assert!((fit.coefficients[0] - 0.8473).abs() < 1e-4);
    }

    #[test]
    fn odds_ratios_and_stars() {
        assert!((odds_ratio(0.522) - 1.685).abs() < 1e-3);
        assert!((odds_ratio(0.035) - 1.035).abs() < 1e-3);
        assert!((odds_ratio(-0.086) - 0.917).abs() < 1e-3);
        assert_eq!(odds_ratio(0.0), 1.0);
        assert_eq!(significance_stars(0.0005), "***");
        assert_eq!(significance_stars(0.005), "**");
        assert_eq!(significance_stars(0.03), "*");
        assert_eq!(significance_stars(0.07), "⊙");
        assert_eq!(significance_stars(0.5), "");
        assert!((wald_p(1.959_963_984_540_054) - 0.05).abs() < 1e-9);
    }

    #[test]
    fn constant_columns_are_dropped() {
        let rows = [(0.1, 0), (0.7, 1), (1.5, 0), (2.0, 1), (2.5, 1), (3.0, 1), (0.3, 0), (1.1, 1)];
        let y: Vec<bool> = rows.iter().map(|r| r.1 == 1).collect();
        let with = DMatrix::from_fn(rows.len(), 3, |i, j| match j {
            0 => 1.0,
            1 => rows[i].0,
            _ => 0.0,
        });
        let without = with.columns(0, 2).into_owned();
        let w = vec![1.5; rows.len()];
        let a = fit_weighted_logistic(&with, &y, &w, &names(3)).unwrap();
        let b = fit_weighted_logistic(&without, &y, &w, &names(2)).unwrap();
        assert_eq!(a.dropped, vec!["x2"]);
        assert_eq!(a.names, b.names);
        for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn separation_is_handled_with_ridge() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let y = [false, false, false, true, true, true];
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { xs[i] });
        match fit_weighted_logistic(&x, &y, &[1.0; 6], &names(2)) {
            Ok(fit) => {
                assert_eq!(fit.ridge, SEPARATION_RIDGE);
                assert!(fit.warnings.iter().any(|w| w.contains("x1")));
            }
            Err(Error::Separation(name)) => assert_eq!(name, "x1"),
            Err(e) => panic!("unexpected error {e}"),
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let x = DMatrix::from_element(4, 1, 1.0);
        assert!(fit_weighted_logistic(&x, &[true; 4], &[1.0; 4], &names(1)).is_err());
    }
}
