//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the code paths it is used to check.

#![allow(dead_code)]

use std::collections::BTreeSet;

use fedopenmax::classifier::{
    init_model, train_local, LabeledSample, ModelParameters, TrainingConfig,
};
use fedopenmax::dataset::{generate, DatasetSpec, GeneratedData};
use fedopenmax::federation::{
    client_round_seed, ClientUpdatePayload, FederationConfig, Message, Payload, WireRecord,
    SERVER_ID,
};
use fedopenmax::openmax::{
    calibrate_class, collect_correct_activations, compute_distances, compute_mav,
    CalibrationConfig, CalibrationUpload, ClassCalibration, GlobalCalibration,
};
use fedopenmax::weibull::WeibullModel;
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Small desk-scale blob fixture: 10 classes in 16 dimensions, 5 clients.
pub fn blob_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed,
        ..DatasetSpec::desk_scale()
    }
}

pub fn blob_data(seed: u64) -> GeneratedData {
    generate(&blob_spec(seed)).expect("fixture generates")
}

pub fn federation(num_clients: usize) -> FederationConfig {
    FederationConfig {
        num_clients,
        ..FederationConfig::default()
    }
}

/// FedAvg with one client collapses to sequential local training.
pub fn centralized_training(
    cfg: &FederationConfig,
    num_classes: usize,
    data: &[LabeledSample],
    seed: u64,
) -> ModelParameters {
    let mut model =
        init_model(data[0].features.len(), cfg.hidden_units, num_classes, seed).unwrap();
    for round in 0..cfg.global_rounds {
        let local = TrainingConfig {
            seed: client_round_seed(seed, 0, round),
            ..cfg.training
        };
        model = train_local(&model, data, &local).unwrap();
    }
    model
}

/// Single-site OpenMax calibration: MAVs and Weibull fits from one dataset.
pub fn centralized_calibration(
    model: &ModelParameters,
    data: &[LabeledSample],
    cfg: &CalibrationConfig,
) -> GlobalCalibration {
    let acts = collect_correct_activations(model, data).unwrap();
    let classes: Vec<ClassCalibration> = (0..model.num_classes())
        .map(|c| {
            let a = &acts[&c];
            let mav = compute_mav(a).unwrap();
            let d = compute_distances(a, &mav, cfg.metric).unwrap();
            calibrate_class(c, mav, &d, cfg.tail_size_eta).unwrap()
        })
        .collect();
    GlobalCalibration {
        config: *cfg,
        classes,
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Reference OpenMax recalibration written directly from the rank formula:
/// repeated selection of the largest remaining activation, Euclidean
/// distance and the Weibull CDF spelled out.
pub fn brute_force_recalibrate(
    v: &[f64],
    mavs: &[Vec<f64>],
    shapes: &[(f64, f64)],
    alpha: usize,
) -> (Vec<f64>, f64) {
    let k = v.len();
    let mut taken = vec![false; k];
    let mut omega = vec![1.0; k];
    for j in 1..=alpha {
        let mut best: Option<usize> = None;
        for i in 0..k {
            if !taken[i] && best.is_none_or(|b| v[i] > v[b]) {
                best = Some(i);
            }
        }
        let c = best.unwrap();
        taken[c] = true;
        let d = v
            .iter()
            .zip(&mavs[c])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let (shape, scale) = shapes[c];
        let cdf = if d > 0.0 {
            1.0 - (-(d / scale).powf(shape)).exp()
        } else {
            0.0
        };
        omega[c] = 1.0 - (alpha - j + 1) as f64 / alpha as f64 * cdf;
    }
    let revised: Vec<f64> = v.iter().zip(&omega).map(|(a, w)| a * w).collect();
    let unknown = v.iter().zip(&omega).map(|(a, w)| a * (1.0 - w)).sum();
    (revised, unknown)
}

/// Random calibration with `k` classes plus matching raw parameters.
pub fn random_calibration(rng: &mut ChaCha8Rng, k: usize, alpha: usize) -> GlobalCalibration {
    let classes = (0..k)
        .map(|c| ClassCalibration {
            class_id: c,
            mav: (0..k).map(|_| rng.random_range(-5.0..5.0)).collect(),
            weibull: WeibullModel::new(rng.random_range(0.5..6.0), rng.random_range(0.5..10.0), 20)
                .unwrap(),
            distance_count: 20,
        })
        .collect();
    GlobalCalibration {
        config: CalibrationConfig {
            alpha_rank: alpha,
            ..CalibrationConfig::defaults_for(k)
        },
        classes,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maximum Weibull log-likelihood over the grid `k, lambda` in
/// `[0.1, 10]` at step 0.01. Uses `sum (d/lambda)^k = lambda^-k sum d^k`
/// so each shape needs one pass over the data.
pub fn grid_max_log_likelihood(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let sum_ln: f64 = data.iter().map(|d| d.ln()).sum();
    let grid: Vec<f64> = (10..=1000).map(|i| i as f64 / 100.0).collect();
    let mut best = f64::NEG_INFINITY;
    for &k in &grid {
        let sum_pow: f64 = data.iter().map(|d| d.powf(k)).sum();
        for &lambda in &grid {
            let ll =
                n * k.ln() - n * k * lambda.ln() + (k - 1.0) * sum_ln - sum_pow * lambda.powf(-k);
            best = best.max(ll);
        }
    }
    best
}

/// `n` independent Weibull(k, lambda) draws by inversion.
pub fn weibull_sample(seed: u64, k: f64, lambda: f64, n: usize) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let u: f64 = r.sample(Open01);
            lambda * (-(1.0 - u).ln()).powf(1.0 / k)
        })
        .collect()
}

/// D = 3, H = 4, K = 2 network with non-zero biases and three samples.
pub fn tiny_network() -> (ModelParameters, Vec<LabeledSample>) {
    let mut m = init_model(3, 4, 2, 11).unwrap();
    let mut r = rng(5);
    let n = m.values.len();
    for b in &mut m.values[n - 6..] {
        *b = r.random_range(-0.5..0.5);
    }
    let data = vec![
        LabeledSample::new(vec![0.9, -1.3, 0.4], 0),
        LabeledSample::new(vec![-0.2, 0.8, 1.7], 1),
        LabeledSample::new(vec![1.5, 0.3, -0.6], 1),
    ];
    (m, data)
}

/// Worst relative error between analytic and central-difference gradients.
pub fn gradient_error(m: &ModelParameters, data: &[LabeledSample]) -> f64 {
    let batch: Vec<&LabeledSample> = data.iter().collect();
    let (_, analytic) = fedopenmax::classifier::loss_and_gradient(m, &batch).unwrap();
    let f = |p: &[f64]| {
        let probe = ModelParameters::new(m.shapes.clone(), p.to_vec()).unwrap();
        fedopenmax::classifier::mean_loss(&probe, data).unwrap()
    };
    let numeric = numeric_gradient(f, &m.values, 1e-5);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn collect_keys(v: &Value, keys: &mut BTreeSet<String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                keys.insert(k.clone());
                collect_keys(v, keys);
            }
        }
        Value::Array(a) => a.iter().for_each(|v| collect_keys(v, keys)),
        _ => {}
    }
}

fn collect_numbers(v: &Value, out: &mut Vec<f64>) {
    match v {
        Value::Object(m) => m.values().for_each(|v| collect_numbers(v, out)),
        Value::Array(a) => a.iter().for_each(|v| collect_numbers(v, out)),
        Value::Number(n) => out.extend(n.as_f64()),
        _ => {}
    }
}

/// Scans a message log for client-to-server leaks: any number in a client
/// payload that equals a training feature bit for bit, and any key in a
/// calibration upload besides the MAV/distance schema. Returns the
/// violations found and the number of uploads seen.
pub fn privacy_scan(
    log: &[WireRecord],
    clients: &[Vec<LabeledSample>],
    num_classes: usize,
) -> (Vec<String>, usize) {
    let features: BTreeSet<u64> = clients
        .iter()
        .flatten()
        .flat_map(|s| s.features.iter().map(|f| f.to_bits()))
        .collect();
    let allowed: BTreeSet<&str> = [
        "type",
        "round",
        "sender_id",
        "payload",
        "client_id",
        "classes",
        "class_id",
        "mav",
        "distances",
    ]
    .into();
    let mut violations = Vec::new();
    let mut uploads = 0;
    for (i, record) in log.iter().enumerate() {
        let json: Value = serde_json::from_slice(&record.bytes).unwrap();
        if record.from != SERVER_ID {
            let mut numbers = Vec::new();
            collect_numbers(&json["payload"], &mut numbers);
            if numbers.iter().any(|n| features.contains(&n.to_bits())) {
                violations.push(format!(
                    "message {i} from {} carries a raw feature value",
                    record.from
                ));
            }
        }
        if json["type"] != "CALIBRATION_UPLOAD" {
            continue;
        }
        uploads += 1;
        let mut keys = BTreeSet::new();
        collect_keys(&json, &mut keys);
        let extra: Vec<&String> = keys
            .iter()
            .filter(|k| !allowed.contains(k.as_str()))
            .collect();
        if !extra.is_empty() {
            violations.push(format!("upload {i} has keys {extra:?}"));
        }
        for class in json["payload"]["classes"].as_array().unwrap() {
            if class["mav"].as_array().map(Vec::len) != Some(num_classes) {
                violations.push(format!("upload {i} has a MAV of the wrong length"));
            }
        }
    }
    (violations, uploads)
}

/// One message of each of the five types.
pub fn sample_messages(
    model: &ModelParameters,
    upload: CalibrationUpload,
    cal: GlobalCalibration,
) -> Vec<Message> {
    let messages = vec![
        Message::new(0, SERVER_ID, Payload::GlobalModel(model.clone())),
        Message::new(
            1,
            3,
            Payload::ClientUpdate(ClientUpdatePayload {
                shapes: model.shapes.clone(),
                values: model.values.clone(),
                sample_count: 200,
            }),
        ),
        Message::new(
            5,
            upload.client_id as i64,
            Payload::CalibrationUpload(upload),
        ),
        Message::new(5, SERVER_ID, Payload::GlobalCalibration(cal)),
        Message::new(5, 4, Payload::Ack),
    ];
    let types: BTreeSet<String> = messages
        .iter()
        .map(|m| format!("{:?}", m.message_type()))
        .collect();
    assert_eq!(types.len(), 5);
    messages
}
