//! OpenMax calibration and open-set inference.
//!
//! Client side: collect the activations of correctly classified samples,
//! average them per class into a mean activation vector (MAV) and measure
//! each activation's distance to its class MAV. Only the MAVs and distances
//! leave the client ([`CalibrationUpload`]).
//!
//! Server side: average the MAVs reported for each class, concatenate the
//! distance lists and fit a Weibull tail per class ([`aggregate_uploads`]).
//!
//! Inference: the top `alpha` activations are shrunk by their Weibull
//! outlier probability and the removed mass becomes the activation of an
//! extra unknown class ([`recalibrate`], [`predict_open`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{forward_activations, LabeledSample, ModelParameters};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::numerics::{argmax, distance, softmax, DistanceMetric};
use crate::weibull::{cdf, fit_tail, WeibullModel};

pub const DEFAULT_TAIL_SIZE: usize = 20;
pub const DEFAULT_ALPHA_RANK: usize = 10;

/// How the server combines MAVs reported by different clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MavWeighting {
    #[default]
    Uniform,
    /// Weight each client's MAV by its number of correctly classified
    /// samples, i.e. the length of its distance list.
    BySampleCount,
}

impl MavWeighting {
    fn is_uniform(&self) -> bool {
        *self == MavWeighting::Uniform
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    pub tail_size_eta: usize,
    pub alpha_rank: usize,
    pub epsilon_threshold: f64,
    #[serde(default)]
    pub metric: DistanceMetric,
    #[serde(default, skip_serializing_if = "MavWeighting::is_uniform")]
    pub mav_weighting: MavWeighting,
}

impl CalibrationConfig {
    /// `eta = 20`, `alpha = min(10, K)`, `epsilon = 0`, Euclidean distance.
    pub fn defaults_for(num_classes: usize) -> Self {
        Self {
            tail_size_eta: DEFAULT_TAIL_SIZE,
            alpha_rank: DEFAULT_ALPHA_RANK.min(num_classes),
            epsilon_threshold: 0.0,
            metric: DistanceMetric::Euclidean,
            mav_weighting: MavWeighting::Uniform,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.tail_size_eta < 2 {
            return Err(Error::invalid(format!(
                "tail_size_eta must be at least 2, got {}",
                self.tail_size_eta
            )));
        }
        if self.alpha_rank == 0 || self.alpha_rank > num_classes {
            return Err(Error::invalid(format!(
                "alpha_rank must be in 1..={num_classes}, got {}",
                self.alpha_rank
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon_threshold) {
            return Err(Error::invalid(format!(
                "epsilon_threshold must be in [0, 1], got {}",
                self.epsilon_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration {
    pub class_id: usize,
    pub mav: Vec<f64>,
    pub weibull: WeibullModel,
    /// Size of the pooled distance list the tail was drawn from.
    pub distance_count: usize,
}

/// One class's entry in a client upload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassUpload {
    pub class_id: usize,
    pub mav: Vec<f64>,
    pub distances: Vec<f64>,
}

/// Everything a client sends for calibration: per class, its local MAV and
/// the distances of its correctly classified activations to that MAV.
/// Classes the client never classified correctly are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationUpload {
    pub client_id: usize,
    pub classes: Vec<ClassUpload>,
}

impl CalibrationUpload {
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<usize> = None;
        for c in &self.classes {
            if prev.is_some_and(|p| p >= c.class_id) {
                return Err(Error::Protocol(format!(
                    "upload from client {} lists class {} out of order or twice",
                    self.client_id, c.class_id
                )));
            }
            if c.distances.is_empty() {
                return Err(Error::Protocol(format!(
                    "upload from client {} has no distances for class {}",
                    self.client_id, c.class_id
                )));
            }
            prev = Some(c.class_id);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalCalibration {
    pub config: CalibrationConfig,
    pub classes: Vec<ClassCalibration>,
}

impl GlobalCalibration {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes();
        if k == 0 {
            return Err(Error::invalid("calibration has no classes"));
        }
        self.config.validate(k)?;
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return Err(Error::invalid(format!(
                    "calibration entry {i} has class_id {}",
                    c.class_id
                )));
            }
            if c.mav.len() != k {
                return Err(Error::invalid(format!(
                    "MAV of class {i} has length {}, expected {k}",
                    c.mav.len()
                )));
            }
            c.weibull.validate()?;
            if c.distance_count < c.weibull.tail_size_used {
                return Err(Error::invalid(format!(
                    "class {i}: distance_count {} below tail size {}",
                    c.distance_count, c.weibull.tail_size_used
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Index 0 is the unknown class, index `c + 1` is known class `c`.
    pub probabilities: Vec<f64>,
    pub weights_omega: Vec<f64>,
}

impl Prediction {
    pub fn top_probability(&self) -> f64 {
        self.probabilities.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recalibrated {
    pub revised: Vec<f64>,
    pub unknown_activation: f64,
    pub weights_omega: Vec<f64>,
}

/// Activations of correctly classified samples, grouped by class.
pub fn collect_correct_activations(
    m: &ModelParameters,
    data: &[LabeledSample],
) -> Result<BTreeMap<usize, Vec<Vec<f64>>>> {
    if data.is_empty() {
        return Err(Error::invalid("no samples to collect activations from"));
    }
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for s in data {
        let v = forward_activations(m, &s.features)?;
        if argmax(&v) == Some(s.label) {
            by_class.entry(s.label).or_default().push(v);
        }
    }
    Ok(by_class)
}

/// Element-wise mean.
pub fn compute_mav(acts: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = acts
        .first()
        .ok_or_else(|| Error::invalid("MAV of an empty set"))?;
    if acts.iter().any(|a| a.len() != first.len()) {
        return Err(Error::invalid("activation vectors differ in length"));
    }
    // Mean as an offset from the first vector, so identical inputs give
    // their common value exactly.
    let n = acts.len() as f64;
    Ok((0..first.len())
        .map(|i| first[i] + acts.iter().map(|a| a[i] - first[i]).sum::<f64>() / n)
        .collect())
}

pub fn compute_distances(
    acts: &[Vec<f64>],
    mav: &[f64],
    metric: DistanceMetric,
) -> Result<Vec<f64>> {
    acts.iter().map(|a| distance(a, mav, metric)).collect()
}

/// Client calibration steps: correct activations, local MAVs, distances to
/// the local MAVs.
pub fn build_client_upload(
    client_id: usize,
    m: &ModelParameters,
    data: &[LabeledSample],
    metric: DistanceMetric,
) -> Result<CalibrationUpload> {
    let classes = collect_correct_activations(m, data)?
        .into_iter()
        .map(|(class_id, acts)| {
            let mav = compute_mav(&acts)?;
            let distances = compute_distances(&acts, &mav, metric)?;
            Ok(ClassUpload {
                class_id,
                mav,
                distances,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CalibrationUpload { client_id, classes })
}

fn mean_of_mavs(entries: &[&ClassUpload], weighting: MavWeighting) -> Vec<f64> {
    if let [only] = entries {
        return only.mav.clone();
    }
    let dim = entries[0].mav.len();
    match weighting {
        MavWeighting::Uniform => {
            let n = entries.len() as f64;
            (0..dim)
                .map(|i| entries.iter().map(|e| e.mav[i]).sum::<f64>() / n)
                .collect()
        }
        MavWeighting::BySampleCount => {
            let total: usize = entries.iter().map(|e| e.distances.len()).sum();
            (0..dim)
                .map(|i| {
                    entries
                        .iter()
                        .map(|e| e.mav[i] * e.distances.len() as f64 / total as f64)
                        .sum::<f64>()
                })
                .collect()
        }
    }
}

/// Builds a per-class calibration from a pooled distance list.
pub fn calibrate_class(
    class_id: usize,
    mav: Vec<f64>,
    pool: &[f64],
    eta: usize,
) -> Result<ClassCalibration> {
    let weibull = fit_tail(pool, eta).map_err(|e| Error::ClassCalibration {
        class_id,
        source: Box::new(e),
    })?;
    Ok(ClassCalibration {
        class_id,
        mav,
        weibull,
        distance_count: pool.len(),
    })
}

/// Server calibration step: per class, average the reported MAVs, pool the
/// distances in ascending client order and fit the Weibull tail.
///
/// Pooled distances stay relative to each client's local MAV; they are not
/// recomputed against the averaged one.
pub fn aggregate_uploads(
    uploads: &[CalibrationUpload],
    num_classes: usize,
    cfg: &CalibrationConfig,
) -> Result<GlobalCalibration> {
    if uploads.is_empty() {
        return Err(Error::invalid("no calibration uploads"));
    }
    cfg.validate(num_classes)?;
    let mut ordered: Vec<&CalibrationUpload> = uploads.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    if let Some(w) = ordered
        .windows(2)
        .find(|w| w[0].client_id == w[1].client_id)
    {
        return Err(Error::Protocol(format!(
            "duplicate upload from client {}",
            w[0].client_id
        )));
    }
    for u in &ordered {
        u.validate()?;
        for c in &u.classes {
            if c.class_id >= num_classes {
                return Err(Error::Protocol(format!(
                    "client {} reported class {} but there are {num_classes} classes",
                    u.client_id, c.class_id
                )));
            }
            if c.mav.len() != num_classes {
                return Err(Error::Protocol(format!(
                    "client {} sent a MAV of length {} for class {}",
                    u.client_id,
                    c.mav.len(),
                    c.class_id
                )));
            }
        }
    }

    let mut classes = Vec::with_capacity(num_classes);
    for class_id in 0..num_classes {
        let entries: Vec<&ClassUpload> = ordered
            .iter()
            .filter_map(|u| u.classes.iter().find(|c| c.class_id == class_id))
            .collect();
        if entries.is_empty() {
            return Err(Error::MissingClass { class_id });
        }
        let mav = mean_of_mavs(&entries, cfg.mav_weighting);
        let pool: Vec<f64> = entries
            .iter()
            .flat_map(|e| e.distances.iter().copied())
            .collect();
        classes.push(calibrate_class(class_id, mav, &pool, cfg.tail_size_eta)?);
    }
    Ok(GlobalCalibration {
        config: *cfg,
        classes,
    })
}

/// Class indices by descending activation, ties to the lower id.
pub fn rank_classes(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    order
}

/// Shrinks the top-`alpha` activations by their Weibull outlier probability.
///
/// The class at rank `j` (1-based, `j <= alpha`) gets
/// `omega = 1 - (alpha - j + 1) / alpha * cdf(distance(v, mav))`; all other
/// classes keep `omega = 1`. The removed mass `sum(v_i * (1 - omega_i))` is
/// the unknown-class activation.
pub fn recalibrate(v: &[f64], cal: &GlobalCalibration) -> Result<Recalibrated> {
    let k = cal.num_classes();
    if v.len() != k {
        return Err(Error::invalid(format!(
            "activation vector has length {}, calibration has {k} classes",
            v.len()
        )));
    }
    let alpha = cal.config.alpha_rank;
    if alpha == 0 || alpha > k {
        return Err(Error::invalid(format!(
            "alpha_rank {alpha} outside 1..={k}"
        )));
    }
    let mut omega = vec![1.0; k];
    for (rank0, &class) in rank_classes(v).iter().take(alpha).enumerate() {
        let c = &cal.classes[class];
        let d = distance(v, &c.mav, cal.config.metric)?;
        let rank_weight = (alpha - rank0) as f64 / alpha as f64;
        omega[class] = 1.0 - rank_weight * cdf(&c.weibull, d);
    }
    let revised = v.iter().zip(&omega).map(|(x, w)| x * w).collect();
    let unknown_activation = v.iter().zip(&omega).map(|(x, w)| x * (1.0 - w)).sum();
    Ok(Recalibrated {
        revised,
        unknown_activation,
        weights_omega: omega,
    })
}

/// Open-set decision from an activation vector.
/// `p[i] < eps`, evaluated as `1 - p[i] > 1 - eps` on the summed remaining
/// mass so that a top probability which rounds to 1.0 is still below 1.
/// With finite logits no probability reaches 1, so `eps >= 1` rejects all.
fn below_threshold(p: &[f64], i: usize, eps: f64) -> bool {
    let rest: f64 = p
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, q)| q)
        .sum();
    eps >= 1.0 || rest > 1.0 - eps
}

pub fn predict_from_activations(v: &[f64], cal: &GlobalCalibration) -> Result<Prediction> {
    let r = recalibrate(v, cal)?;
    let mut extended = Vec::with_capacity(v.len() + 1);
    extended.push(r.unknown_activation);
    extended.extend_from_slice(&r.revised);
    let probabilities = softmax(&extended)?;
    let top = argmax(&probabilities).expect("non-empty");
    let best_known = argmax(&probabilities[1..]).expect("at least one class");
    let label = if top == 0
        || below_threshold(&probabilities, best_known + 1, cal.config.epsilon_threshold)
    {
        Label::Unknown
    } else {
        Label::Known(best_known)
    };
    Ok(Prediction {
        label,
        probabilities,
        weights_omega: r.weights_omega,
    })
}

pub fn predict_open(x: &[f64], m: &ModelParameters, cal: &GlobalCalibration) -> Result<Prediction> {
    let v = forward_activations(m, x)?;
    if v.len() != cal.num_classes() {
        return Err(Error::invalid(format!(
            "model has {} classes, calibration has {}",
            v.len(),
            cal.num_classes()
        )));
    }
    predict_from_activations(&v, cal)
}
