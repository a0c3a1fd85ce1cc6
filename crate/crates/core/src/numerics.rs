//! Vector primitives shared by the classifier, the calibration code and the
//! evaluation code. Everything here is a pure function over `f64` slices.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Divisor applied to the Euclidean term of the `eucos` metric.
pub const DEFAULT_EUCOS_SCALE: f64 = 200.0;

/// Distance between an activation vector and a class prototype.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    Cosine,
    /// `euclidean / scale + cosine`.
    Eucos {
        scale: f64,
    },
}

impl DistanceMetric {
    pub fn eucos() -> Self {
        DistanceMetric::Eucos {
            scale: DEFAULT_EUCOS_SCALE,
        }
    }
}

impl fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DistanceMetric::Euclidean => f.write_str("euclidean"),
            DistanceMetric::Cosine => f.write_str("cosine"),
            DistanceMetric::Eucos { scale } if *scale == DEFAULT_EUCOS_SCALE => {
                f.write_str("eucos")
            }
            DistanceMetric::Eucos { scale } => write!(f, "eucos:{scale}"),
        }
    }
}

impl FromStr for DistanceMetric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(DistanceMetric::Euclidean),
            "cosine" => Ok(DistanceMetric::Cosine),
            "eucos" => Ok(DistanceMetric::eucos()),
            other => {
                let scale = other
                    .strip_prefix("eucos:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite() && *v > 0.0)
                    .ok_or_else(|| {
                        format!("unknown metric `{other}` (expected euclidean, cosine, eucos or eucos:<scale>)")
                    })?;
                Ok(DistanceMetric::Eucos { scale })
            }
        }
    }
}

impl Serialize for DistanceMetric {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DistanceMetric {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn ensure_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{what} contains a non-finite entry"
        )))
    }
}

/// Numerically stable softmax (the maximum is subtracted before exponentiating).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    ensure_finite(v, "softmax input")?;
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest entry; ties go to the lowest index.
///
/// Returns `None` for an empty slice.
pub fn argmax(v: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in v.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine distance with a zero vector"));
    }
    // Rounding can push the similarity a hair outside [-1, 1].
    let sim = (dot(a, b) / (na * nb)).clamp(-1.0, 1.0);
    Ok(1.0 - sim)
}

/// Distance between two equal-length vectors under `metric`.
pub fn distance(a: &[f64], b: &[f64], metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "distance between vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    match metric {
        DistanceMetric::Euclidean => Ok(euclidean(a, b)),
        DistanceMetric::Cosine => cosine(a, b),
        DistanceMetric::Eucos { scale } => Ok(euclidean(a, b) / scale + cosine(a, b)?),
    }
}

/// SplitMix64 finalizer over `seed ^ salt`, used to derive independent,
/// platform-stable seeds for sub-streams (epochs, clients, rounds).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z =
        (seed ^ salt.wrapping_mul(0xD6E8_FEB8_6659_FD93)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
