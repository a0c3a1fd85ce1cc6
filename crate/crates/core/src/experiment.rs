//! The three-phase experiment: federated training, closed-set evaluation
//! with plain SoftMax argmax, then federated OpenMax calibration and
//! open-set evaluation. Also the on-disk artifact formats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{evaluate_accuracy, predict_class, ModelParameters};
use crate::config::ExperimentConfig;
use crate::dataset::{generate, GeneratedData};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_labels, evaluate_open_set, MetricsReport};
use crate::federation::{
    run_calibration_exchange_with, run_training_with, LoopbackTransport, Message, MessageType,
    Payload, RunOptions, TrainingOutcome, SERVER_ID,
};
use crate::label::Label;
use crate::openmax::{predict_open, GlobalCalibration, Prediction};

pub const MODEL_FILE: &str = "model.json";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const CLOSED_REPORT_FILE: &str = "closed_set_report.json";
pub const OPEN_REPORT_FILE: &str = "open_set_report.json";

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub data: GeneratedData,
    pub training: TrainingOutcome,
    pub closed_set: MetricsReport,
    pub calibration: GlobalCalibration,
    pub predictions: Vec<Prediction>,
    pub open_set: MetricsReport,
}

impl ExperimentOutcome {
    /// Accuracy of the final global model on the pooled client training data.
    pub fn final_training_accuracy(&self) -> f64 {
        self.training
            .rounds
            .last()
            .map_or(0.0, |r| r.global_accuracy)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let k = cfg.dataset.num_classes;
    let data = generate(&cfg.dataset).map_err(|e| e.in_phase("data generation"))?;

    let transport = LoopbackTransport::for_federation(cfg.federation.num_clients);
    let training = run_training_with(
        &transport,
        &cfg.federation,
        k,
        &data.clients,
        cfg.seed(),
        opts,
    )
    .map_err(|e| e.in_phase("federated training"))?;

    let closed_set = closed_set_report(&training.model, &data)
        .map_err(|e| e.in_phase("closed-set evaluation"))?;

    let transport = LoopbackTransport::for_federation(cfg.federation.num_clients);
    let calibration = run_calibration_exchange_with(
        &transport,
        &training.model,
        &cfg.federation,
        &cfg.calibration_config(),
        &data.clients,
        opts,
    )
    .map_err(|e| e.in_phase("calibration exchange"))?;

    let (predictions, open_set) = open_set_report(&training.model, &calibration, &data)
        .map_err(|e| e.in_phase("open-set evaluation"))?;

    Ok(ExperimentOutcome {
        data,
        training,
        closed_set,
        calibration,
        predictions,
        open_set,
    })
}

fn closed_set_report(model: &ModelParameters, data: &GeneratedData) -> Result<MetricsReport> {
    let k = model.num_classes();
    let predicted = data
        .closed_test
        .iter()
        .map(|s| predict_class(model, &s.features).map(Label::Known))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Label> = data
        .closed_test
        .iter()
        .map(|s| Label::Known(s.label))
        .collect();
    let report = evaluate_labels(&predicted, &truth, k)?;
    debug_assert_eq!(
        report.accuracy,
        evaluate_accuracy(model, &data.closed_test)?
    );
    Ok(report)
}

fn open_set_report(
    model: &ModelParameters,
    calibration: &GlobalCalibration,
    data: &GeneratedData,
) -> Result<(Vec<Prediction>, MetricsReport)> {
    let predictions = data
        .open_test
        .iter()
        .map(|s| predict_open(&s.features, model, calibration))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<Label> = data.open_test.iter().map(|s| s.true_label).collect();
    let report = evaluate_open_set(&predictions, &truth, model.num_classes())?;
    Ok((predictions, report))
}

/// A wire message stored on disk with its provenance seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageArtifact {
    pub seed: u64,
    #[serde(flatten)]
    pub message: Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub seed: u64,
    pub phase: String,
    pub report: MetricsReport,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
}

fn read_message(path: &Path, expected: MessageType) -> Result<Message> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    let artifact: MessageArtifact = serde_json::from_str(&text)
        .map_err(|e| Error::Protocol(format!("not a valid artifact: {e}")).in_file(path))?;
    if artifact.message.message_type() != expected {
        return Err(Error::Protocol(format!(
            "expected a {expected:?} artifact, found {:?}",
            artifact.message.message_type()
        ))
        .in_file(path));
    }
    Ok(artifact.message)
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelParameters> {
    let path = path.as_ref();
    match read_message(path, MessageType::GlobalModel)?.payload {
        Payload::GlobalModel(m) => m.validate().map(|_| m).map_err(|e| e.in_file(path)),
        _ => unreachable!("type checked above"),
    }
}

pub fn read_calibration(path: impl AsRef<Path>) -> Result<GlobalCalibration> {
    let path = path.as_ref();
    match read_message(path, MessageType::GlobalCalibration)?.payload {
        Payload::GlobalCalibration(c) => c.validate().map(|_| c).map_err(|e| e.in_file(path)),
        _ => unreachable!("type checked above"),
    }
}

/// Writes the four run artifacts and returns their paths. Reports are only
/// written after the model and calibration have been written successfully.
pub fn write_artifacts(
    cfg: &ExperimentConfig,
    outcome: &ExperimentOutcome,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).in_file(dir))?;
    let seed = cfg.seed();
    let round = cfg.federation.global_rounds;
    let paths: Vec<PathBuf> = [
        MODEL_FILE,
        CALIBRATION_FILE,
        CLOSED_REPORT_FILE,
        OPEN_REPORT_FILE,
    ]
    .iter()
    .map(|f| dir.join(f))
    .collect();

    write_json(
        &paths[0],
        &MessageArtifact {
            seed,
            message: Message::new(
                round,
                SERVER_ID,
                Payload::GlobalModel(outcome.training.model.clone()),
            ),
        },
    )?;
    write_json(
        &paths[1],
        &MessageArtifact {
            seed,
            message: Message::new(
                round,
                SERVER_ID,
                Payload::GlobalCalibration(outcome.calibration.clone()),
            ),
        },
    )?;
    write_json(
        &paths[2],
        &ReportArtifact {
            seed,
            phase: "closed_set".into(),
            report: outcome.closed_set.clone(),
        },
    )?;
    write_json(
        &paths[3],
        &ReportArtifact {
            seed,
            phase: "open_set".into(),
            report: outcome.open_set.clone(),
        },
    )?;
    Ok(paths)
}

/// `(phase, metric, value)` rows for the run summary.
pub fn summary_rows(outcome: &ExperimentOutcome) -> Vec<(&'static str, &'static str, f64)> {
    vec![
        ("training", "accuracy", outcome.final_training_accuracy()),
        ("closed_set", "accuracy", outcome.closed_set.accuracy),
        ("open_set", "macro_f1", outcome.open_set.macro_f1),
        ("open_set", "accuracy", outcome.open_set.accuracy),
    ]
}
