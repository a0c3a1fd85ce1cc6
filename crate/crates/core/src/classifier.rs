//! One-hidden-layer ReLU classifier trained with mini-batch SGD.
//!
//! The network maps a `D`-dimensional feature vector to `K` raw logits
//! (`D -> H -> K`). The logits are the activation vectors consumed by the
//! OpenMax calibration; the flat parameter vector is what FedAvg averages.
//!
//! Parameter layout inside [`ModelParameters::values`]:
//!
//! ```text
//! [ W1 (H x D, row-major) | W2 (K x H, row-major) | b1 (H) | b2 (K) ]
//! ```
//!
//! with `shapes = [(H, D), (K, H)]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, mix_seed, softmax};

/// Flat, ordered weights and biases of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 16,
            local_epochs: 3,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is a legal no-op; negative or NaN is not.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning_rate must be a non-negative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs must be at least 1"));
        }
        Ok(())
    }
}

/// Dimensions of the network: input, hidden, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Dims {
    fn w1_len(&self) -> usize {
        self.hidden * self.input
    }

    fn w2_len(&self) -> usize {
        self.classes * self.hidden
    }

    fn b1_offset(&self) -> usize {
        self.w1_len() + self.w2_len()
    }

    fn b2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.b2_offset() + self.classes
    }
}

impl ModelParameters {
    /// Builds a parameter set, checking the layout and finiteness.
    pub fn new(shapes: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self> {
        let m = Self { shapes, values };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            shapes: vec![(dims.hidden, dims.input), (dims.classes, dims.hidden)],
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims()?;
        let expected = self.shapes.iter().map(|(r, c)| r * c + r).sum::<usize>();
        debug_assert_eq!(expected, dims.param_count());
        if self.values.len() != expected {
            return Err(Error::invalid(format!(
                "parameter vector has {} values, layer shapes require {expected}",
                self.values.len()
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid(
                "parameter vector contains a non-finite value",
            ));
        }
        Ok(())
    }

    pub fn dims(&self) -> Result<Dims> {
        match self.shapes.as_slice() {
            &[(hidden, input), (classes, h2)]
                if h2 == hidden && hidden > 0 && input > 0 && classes > 0 =>
            {
                Ok(Dims {
                    input,
                    hidden,
                    classes,
                })
            }
            other => Err(Error::invalid(format!(
                "unsupported layer shapes {other:?}; expected [(H, D), (K, H)]"
            ))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map_or(0, |s| s.0)
    }

    fn split(&self, dims: Dims) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.values.split_at(dims.w1_len());
        let (w2, rest) = rest.split_at(dims.w2_len());
        let (b1, b2) = rest.split_at(dims.hidden);
        (w1, w2, b1, b2)
    }
}

/// Xavier-uniform weights, zero biases. Deterministic in `seed` (ChaCha8).
pub fn init_model(
    input: usize,
    hidden: usize,
    classes: usize,
    seed: u64,
) -> Result<ModelParameters> {
    if input == 0 || hidden == 0 || classes == 0 {
        return Err(Error::invalid("model dimensions must all be at least 1"));
    }
    let dims = Dims {
        input,
        hidden,
        classes,
    };
    let mut m = ModelParameters::zeros(dims);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    for &(rows, cols) in &m.shapes.clone() {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        for w in &mut m.values[offset..offset + rows * cols] {
            *w = rng.random_range(-limit..=limit);
        }
        offset += rows * cols;
    }
    Ok(m)
}

struct Pass {
    pre_hidden: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_pass(m: &ModelParameters, dims: Dims, x: &[f64]) -> Pass {
    let (w1, w2, b1, b2) = m.split(dims);
    let pre_hidden: Vec<f64> = w1
        .chunks_exact(dims.input)
        .zip(b1)
        .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
        .collect();
    let hidden: Vec<f64> = pre_hidden.iter().map(|&z| z.max(0.0)).collect();
    let logits = w2
        .chunks_exact(dims.hidden)
        .zip(b2)
        .map(|(row, b)| row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b)
        .collect();
    Pass {
        pre_hidden,
        hidden,
        logits,
    }
}

fn check_input(dims: Dims, x: &[f64]) -> Result<()> {
    if x.len() != dims.input {
        return Err(Error::invalid(format!(
            "feature vector has length {}, model expects {}",
            x.len(),
            dims.input
        )));
    }
    Ok(())
}

/// Raw logits of the output layer (no softmax).
pub fn forward_activations(m: &ModelParameters, x: &[f64]) -> Result<Vec<f64>> {
    let dims = m.dims()?;
    check_input(dims, x)?;
    Ok(forward_pass(m, dims, x).logits)
}

/// Predicted class by plain argmax over the logits (ties go to the lowest id).
pub fn predict_class(m: &ModelParameters, x: &[f64]) -> Result<usize> {
    let logits = forward_activations(m, x)?;
    Ok(argmax(&logits).expect("model has at least one class"))
}

fn check_batch(dims: Dims, batch: &[&LabeledSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for s in batch {
        check_input(dims, &s.features)?;
        if s.label >= dims.classes {
            return Err(Error::invalid(format!(
                "label {} out of range for {} classes",
                s.label, dims.classes
            )));
        }
    }
    Ok(())
}

/// Mean cross-entropy of `softmax(logits)` over `batch`, and its gradient with
/// respect to every entry of the flat parameter vector.
pub fn loss_and_gradient(m: &ModelParameters, batch: &[&LabeledSample]) -> Result<(f64, Vec<f64>)> {
    let dims = m.dims()?;
    check_batch(dims, batch)?;
    let (_, w2, _, _) = m.split(dims);
    let mut grad = vec![0.0; dims.param_count()];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for sample in batch {
        let pass = forward_pass(m, dims, &sample.features);
        let mut delta_out = softmax(&pass.logits)?;
        loss -= delta_out[sample.label].max(f64::MIN_POSITIVE).ln();
        delta_out[sample.label] -= 1.0;

        let (g_w1, rest) = grad.split_at_mut(dims.w1_len());
        let (g_w2, rest) = rest.split_at_mut(dims.w2_len());
        let (g_b1, g_b2) = rest.split_at_mut(dims.hidden);

        let mut delta_hidden = vec![0.0; dims.hidden];
        for (k, &d) in delta_out.iter().enumerate() {
            let d = d * scale;
            g_b2[k] += d;
            let w_row = &w2[k * dims.hidden..(k + 1) * dims.hidden];
            let g_row = &mut g_w2[k * dims.hidden..(k + 1) * dims.hidden];
            for j in 0..dims.hidden {
                g_row[j] += d * pass.hidden[j];
                delta_hidden[j] += d * w_row[j];
            }
        }
        for (j, dh) in delta_hidden.iter().enumerate() {
            if pass.pre_hidden[j] <= 0.0 {
                continue;
            }
            g_b1[j] += dh;
            let g_row = &mut g_w1[j * dims.input..(j + 1) * dims.input];
            for (g, x) in g_row.iter_mut().zip(&sample.features) {
                *g += dh * x;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Mean cross-entropy over a dataset.
pub fn mean_loss(m: &ModelParameters, data: &[LabeledSample]) -> Result<f64> {
    let batch: Vec<&LabeledSample> = data.iter().collect();
    let dims = m.dims()?;
    check_batch(dims, &batch)?;
    let mut total = 0.0;
    for s in data {
        let p = softmax(&forward_pass(m, dims, &s.features).logits)?;
        total -= p[s.label].max(f64::MIN_POSITIVE).ln();
    }
    Ok(total / data.len() as f64)
}

/// Runs `cfg.local_epochs` epochs of shuffled mini-batch SGD and returns the
/// updated parameters. The shuffle of epoch `e` is drawn from a ChaCha8
/// stream seeded with `mix_seed(cfg.seed, e)`.
pub fn train_local(
    m: &ModelParameters,
    data: &[LabeledSample],
    cfg: &TrainingConfig,
) -> Result<ModelParameters> {
    if data.is_empty() {
        return Err(Error::invalid("train_local called with no data"));
    }
    cfg.validate()?;
    let dims = m.dims()?;
    m.validate()?;
    let all: Vec<&LabeledSample> = data.iter().collect();
    check_batch(dims, &all)?;

    let mut params = m.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.local_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&LabeledSample> = chunk.iter().map(|&i| &data[i]).collect();
            let (_, grad) = loss_and_gradient(&params, &batch)?;
            for (p, g) in params.values.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
        }
    }
    Ok(params)
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate_accuracy(m: &ModelParameters, data: &[LabeledSample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluate_accuracy called with no data"));
    }
    let mut correct = 0usize;
    for s in data {
        if predict_class(m, &s.features)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
