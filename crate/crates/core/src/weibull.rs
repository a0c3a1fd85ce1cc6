//! Two-parameter Weibull tail models fitted by maximum likelihood.
//!
//! For a tail `d_1..d_n` the shape `k` solves the profile score equation
//!
//! ```text
//! g(k) = sum(d^k ln d) / sum(d^k) - 1/k - mean(ln d) = 0
//! ```
//!
//! and the scale follows in closed form as `lambda = (mean(d^k))^(1/k)`.
//! `g` is strictly increasing for non-degenerate data (its derivative is the
//! `d^k`-weighted variance of `ln d` plus `1/k^2`), so the root is bracketed
//! by bisection and then polished with safeguarded Newton steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const K_MIN: f64 = 1e-3;
const K_MAX: f64 = 1e3;
const SCORE_TOL: f64 = 1e-10;
const MAX_ITER: usize = 200;
/// Bisection stops once the bracket is this narrow (relative) and Newton takes over.
const BRACKET_REL_WIDTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullModel {
    pub shape_k: f64,
    pub scale_lambda: f64,
    pub tail_size_used: usize,
}

impl WeibullModel {
    pub fn new(shape_k: f64, scale_lambda: f64, tail_size_used: usize) -> Result<Self> {
        let w = Self {
            shape_k,
            scale_lambda,
            tail_size_used,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shape_k > 0.0 && self.shape_k.is_finite()) {
            return Err(Error::invalid(format!(
                "Weibull shape must be positive, got {}",
                self.shape_k
            )));
        }
        if !(self.scale_lambda > 0.0 && self.scale_lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "Weibull scale must be positive, got {}",
                self.scale_lambda
            )));
        }
        if self.tail_size_used < 2 {
            return Err(Error::invalid(format!(
                "Weibull tail size must be at least 2, got {}",
                self.tail_size_used
            )));
        }
        Ok(())
    }

    pub fn cdf(&self, d: f64) -> f64 {
        cdf(self, d)
    }
}

/// `1 - exp(-(d/lambda)^k)` for `d > 0`, else 0.
pub fn cdf(w: &WeibullModel, d: f64) -> f64 {
    if d <= 0.0 || d.is_nan() {
        return 0.0;
    }
    -(-(d / w.scale_lambda).powf(w.shape_k)).exp_m1()
}

/// Log-likelihood of strictly positive data under `w`.
pub fn log_likelihood(w: &WeibullModel, data: &[f64]) -> Result<f64> {
    if let Some(bad) = data.iter().find(|&&d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!(
            "log-likelihood needs positive finite data, got {bad}"
        )));
    }
    let (k, lambda) = (w.shape_k, w.scale_lambda);
    let (ln_k, ln_lambda) = (k.ln(), lambda.ln());
    Ok(data
        .iter()
        .map(|&d| ln_k - k * ln_lambda + (k - 1.0) * d.ln() - (d / lambda).powf(k))
        .sum())
}

/// The `eta` largest values of `distances`, in descending order.
pub fn select_tail(distances: &[f64], eta: usize) -> Vec<f64> {
    let mut sorted = distances.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.truncate(eta);
    sorted
}

/// Log-data of a tail, offset by its maximum so `exp(k * x)` never overflows.
struct Tail {
    shifted: Vec<f64>,
    ln_max: f64,
    mean_shifted: f64,
}

impl Tail {
    fn new(values: &[f64]) -> Self {
        let ln: Vec<f64> = values.iter().map(|d| d.ln()).collect();
        let ln_max = ln.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = ln.iter().map(|l| l - ln_max).collect();
        let mean_shifted = shifted.iter().sum::<f64>() / shifted.len() as f64;
        Self {
            shifted,
            ln_max,
            mean_shifted,
        }
    }

    /// Returns `(g(k), g'(k))`.
    fn score(&self, k: f64) -> (f64, f64) {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &x in &self.shifted {
            let w = (k * x).exp();
            s0 += w;
            s1 += w * x;
            s2 += w * x * x;
        }
        let mean = s1 / s0;
        let var = (s2 / s0 - mean * mean).max(0.0);
        (mean - 1.0 / k - self.mean_shifted, var + 1.0 / (k * k))
    }

    fn scale(&self, k: f64) -> f64 {
        let mean_pow =
            self.shifted.iter().map(|x| (k * x).exp()).sum::<f64>() / self.shifted.len() as f64;
        (self.ln_max + mean_pow.ln() / k).exp()
    }
}

/// Fits a Weibull model to the `eta` largest distances.
///
/// Zero distances in the selected tail are dropped before fitting. When
/// `eta` exceeds the number of distances every distance is used; the number
/// actually fitted is recorded in `tail_size_used`.
pub fn fit_tail(distances: &[f64], eta: usize) -> Result<WeibullModel> {
    if eta < 2 {
        return Err(Error::invalid(format!(
            "tail size must be at least 2, got {eta}"
        )));
    }
    if let Some(bad) = distances.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::invalid(format!(
            "distances must be non-negative and finite, got {bad}"
        )));
    }
    let tail: Vec<f64> = select_tail(distances, eta)
        .into_iter()
        .filter(|&d| d > 0.0)
        .collect();
    if tail.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} positive value(s) in the tail, need at least 2",
            tail.len()
        )));
    }
    if tail.iter().all(|&d| d == tail[0]) {
        return Err(Error::DegenerateData(format!(
            "all {} tail values equal {}",
            tail.len(),
            tail[0]
        )));
    }

    let t = Tail::new(&tail);
    let (mut lo, mut hi) = (K_MIN, K_MAX);
    if t.score(lo).0 >= 0.0 {
        return Err(Error::DegenerateData(format!(
            "shape estimate below {K_MIN}"
        )));
    }
    if t.score(hi).0 <= 0.0 {
        return Err(Error::DegenerateData(format!(
            "shape estimate above {K_MAX}; tail values are nearly identical"
        )));
    }

    let mut iterations = 0;
    let mut k = 0.5 * (lo + hi);
    while iterations < MAX_ITER && (hi - lo) > BRACKET_REL_WIDTH * lo {
        // Geometric midpoint: the bracket spans six decades.
        k = (lo * hi).sqrt();
        let (g, _) = t.score(k);
        iterations += 1;
        if g.abs() < SCORE_TOL {
            lo = k;
            hi = k;
            break;
        }
        if g < 0.0 {
            lo = k;
        } else {
            hi = k;
        }
    }
    if lo < hi {
        k = 0.5 * (lo + hi);
    }

    while iterations < MAX_ITER {
        let (g, dg) = t.score(k);
        iterations += 1;
        if g.abs() < SCORE_TOL {
            break;
        }
        if g < 0.0 {
            lo = lo.max(k);
        } else {
            hi = hi.min(k);
        }
        let step = k - g / dg;
        k = if step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
    }

    Ok(WeibullModel {
        shape_k: k,
        scale_lambda: t.scale(k),
        tail_size_used: tail.len(),
    })
}
