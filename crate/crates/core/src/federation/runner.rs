//! Server and client loops.
//!
//! Training: for each round `r < R` the server broadcasts `GLOBAL_MODEL(r)`,
//! every client trains locally and answers `CLIENT_UPDATE(r)`, and the server
//! applies FedAvg. After the last round the server broadcasts the final model
//! as `GLOBAL_MODEL(R)` and waits for every client's `ACK`.
//!
//! Calibration: the server broadcasts the trained model as `GLOBAL_MODEL(R)`,
//! every client answers `CALIBRATION_UPLOAD(R)`, the server aggregates and
//! broadcasts `GLOBAL_CALIBRATION(R)`, and every client acknowledges.
//!
//! Rounds are synchronous; a client that does not answer before the timeout
//! aborts the session.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};

use super::fedavg::{fedavg, AggregationWeighting, ClientUpdate};
use super::message::{ClientUpdatePayload, Message, MessageType, Payload, SERVER_ID};
use super::transport::{LoopbackTransport, ParticipantId, Transport};
use crate::classifier::{
    evaluate_accuracy, init_model, train_local, LabeledSample, ModelParameters, TrainingConfig,
};
use crate::error::{Error, Result};
use crate::numerics::mix_seed;
use crate::openmax::{
    aggregate_uploads, build_client_upload, CalibrationConfig, CalibrationUpload, GlobalCalibration,
};

const POLL: Duration = Duration::from_millis(20);

fn default_hidden_units() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub global_rounds: usize,
    /// Width of the classifier's hidden layer.
    #[serde(default = "default_hidden_units")]
    pub hidden_units: usize,
    pub training: TrainingConfig,
    #[serde(default)]
    pub aggregation_weighting: AggregationWeighting,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 5,
            global_rounds: 5,
            hidden_units: default_hidden_units(),
            training: TrainingConfig::default(),
            aggregation_weighting: AggregationWeighting::Uniform,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::invalid("num_clients must be at least 1"));
        }
        if self.global_rounds == 0 {
            return Err(Error::invalid("global_rounds must be at least 1"));
        }
        if self.hidden_units == 0 {
            return Err(Error::invalid("hidden_units must be at least 1"));
        }
        self.training.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Maximum number of clients training at the same time; `None` means all.
    pub workers: Option<usize>,
    /// How long a participant waits for an expected message.
    pub timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: None,
            timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean over clients of each local model's accuracy on its own data.
    pub mean_client_accuracy: f64,
    /// Mean over clients of the aggregated model's accuracy on their data.
    pub global_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub model: ModelParameters,
    pub rounds: Vec<RoundMetrics>,
}

/// Seed for client `client_id`'s local training in `round`.
pub fn client_round_seed(seed: u64, client_id: usize, round: usize) -> u64 {
    mix_seed(mix_seed(seed, client_id as u64 + 1), round as u64 + 1)
}

/// Counting semaphore bounding concurrent local training.
struct Permits {
    tx: Sender<()>,
    rx: Receiver<()>,
}

impl Permits {
    fn new(n: usize) -> Self {
        let (tx, rx) = bounded(n);
        for _ in 0..n {
            tx.send(()).expect("fresh channel");
        }
        Self { tx, rx }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        self.rx.recv().expect("permit channel open");
        let out = f();
        self.tx.send(()).expect("permit channel open");
        out
    }
}

/// Shared state of one protocol session.
struct Session<'a> {
    transport: &'a dyn Transport,
    num_clients: usize,
    global_rounds: usize,
    timeout: Duration,
    aborted: AtomicBool,
}

/// Client-side outcome: `None` when the session was aborted by someone else.
type ClientResult<T> = Result<Option<T>>;

impl Session<'_> {
    fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
    }

    fn send(&self, to: ParticipantId, msg: Message) -> Result<()> {
        self.transport.send(to, &msg)
    }

    fn broadcast(&self, round: usize, payload: Payload) -> Result<()> {
        let msg = Message::new(round, SERVER_ID, payload);
        (0..self.num_clients as i64).try_for_each(|c| self.transport.send(c, &msg))
    }

    /// Waits for one message; `Ok(None)` if the session was aborted.
    fn client_recv(&self, me: ParticipantId) -> ClientResult<Message> {
        let start = Instant::now();
        loop {
            if self.aborted.load(Ordering::SeqCst) {
                return Ok(None);
            }
            let left = self.timeout.saturating_sub(start.elapsed());
            if left.is_zero() {
                return Err(Error::Timeout {
                    phase: format!("client {me}"),
                    missing: vec![SERVER_ID],
                });
            }
            if let Some(msg) = self.transport.recv(me, left.min(POLL))? {
                msg.validate(self.global_rounds)?;
                if msg.sender_id != SERVER_ID {
                    return Err(Error::Protocol(format!(
                        "client {me} received a message from participant {}",
                        msg.sender_id
                    )));
                }
                return Ok(Some(msg));
            }
        }
    }

    /// Gathers exactly one `expected` message for `round` from every client,
    /// indexed by client id.
    fn collect(&self, expected: MessageType, round: usize, phase: &str) -> Result<Vec<Message>> {
        let mut got: Vec<Option<Message>> = vec![None; self.num_clients];
        let start = Instant::now();
        while got.iter().any(Option::is_none) {
            if self.aborted.load(Ordering::SeqCst) {
                return Err(Error::Protocol(format!(
                    "{phase} aborted by a client failure"
                )));
            }
            let left = self.timeout.saturating_sub(start.elapsed());
            if left.is_zero() {
                return Err(Error::Timeout {
                    phase: phase.to_string(),
                    missing: (0..self.num_clients as i64)
                        .filter(|&c| got[c as usize].is_none())
                        .collect(),
                });
            }
            let Some(msg) = self.transport.recv(SERVER_ID, left.min(POLL))? else {
                continue;
            };
            msg.validate(self.global_rounds)?;
            if msg.message_type() != expected || msg.round != round {
                return Err(Error::Protocol(format!(
                    "{phase}: expected {expected:?} for round {round}, got {:?} for round {} from {}",
                    msg.message_type(),
                    msg.round,
                    msg.sender_id
                )));
            }
            let slot = usize::try_from(msg.sender_id)
                .ok()
                .and_then(|c| got.get_mut(c))
                .ok_or_else(|| {
                    Error::Protocol(format!(
                        "{phase}: message from unknown client {}",
                        msg.sender_id
                    ))
                })?;
            if slot.is_some() {
                return Err(Error::Protocol(format!(
                    "{phase}: duplicate message from client {}",
                    msg.sender_id
                )));
            }
            *slot = Some(msg);
        }
        Ok(got.into_iter().flatten().collect())
    }
}

fn check_client_data(cfg: &FederationConfig, client_data: &[Vec<LabeledSample>]) -> Result<()> {
    cfg.validate()?;
    if client_data.len() != cfg.num_clients {
        return Err(Error::invalid(format!(
            "{} client datasets for {} clients",
            client_data.len(),
            cfg.num_clients
        )));
    }
    if let Some(c) = client_data.iter().position(|d| d.is_empty()) {
        return Err(Error::invalid(format!("client {c} has no data")));
    }
    Ok(())
}

/// Runs server and clients, preferring a client's own failure over the
/// server's report of it, except for clients that timed out waiting.
fn run_session<S, C>(
    session: &Session<'_>,
    workers: usize,
    server: impl FnOnce(&Session<'_>) -> Result<S> + Send,
    client: impl Fn(&Session<'_>, usize, &Permits) -> ClientResult<C> + Sync,
) -> Result<(S, Vec<C>)>
where
    S: Send,
    C: Send,
{
    let permits = Permits::new(workers.max(1));
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..session.num_clients)
            .map(|id| {
                let (client, permits) = (&client, &permits);
                scope.spawn(move || {
                    let r = client(session, id, permits);
                    // The server runs its own deadline; only real failures abort.
                    if matches!(r, Err(ref e) if !matches!(e, Error::Timeout { .. })) {
                        session.abort();
                    }
                    r
                })
            })
            .collect();
        let server_result = server(session);
        if server_result.is_err() {
            session.abort();
        }
        let client_results: Vec<ClientResult<C>> = handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect();

        let mut outputs = Vec::with_capacity(client_results.len());
        let mut aborted_client = false;
        for r in client_results {
            match r {
                Ok(Some(c)) => outputs.push(c),
                Ok(None) => aborted_client = true,
                // A client that gave up waiting on the server defers to the
                // server's own account, which names the missing clients.
                Err(Error::Timeout { .. }) if server_result.is_err() => aborted_client = true,
                Err(e) => return Err(e),
            }
        }
        let s = server_result?;
        if aborted_client {
            return Err(Error::Protocol("session aborted".into()));
        }
        Ok((s, outputs))
    })
}

/// FedAvg training over the in-process loopback transport.
pub fn run_training(
    cfg: &FederationConfig,
    num_classes: usize,
    client_data: &[Vec<LabeledSample>],
    seed: u64,
) -> Result<TrainingOutcome> {
    let transport = LoopbackTransport::for_federation(cfg.num_clients);
    run_training_with(
        &transport,
        cfg,
        num_classes,
        client_data,
        seed,
        RunOptions::default(),
    )
}

/// FedAvg training over `transport`.
///
/// The server initializes the model from `seed`; client `c` trains round `r`
/// with [`client_round_seed`]`(seed, c, r)`.
pub fn run_training_with(
    transport: &dyn Transport,
    cfg: &FederationConfig,
    num_classes: usize,
    client_data: &[Vec<LabeledSample>],
    seed: u64,
    opts: RunOptions,
) -> Result<TrainingOutcome> {
    check_client_data(cfg, client_data)?;
    let input_dim = client_data[0][0].features.len();
    let initial = init_model(input_dim, cfg.hidden_units, num_classes, seed)?;
    let rounds = cfg.global_rounds;

    let session = Session {
        transport,
        num_clients: cfg.num_clients,
        global_rounds: rounds,
        timeout: opts.timeout,
        aborted: AtomicBool::new(false),
    };

    let server = |s: &Session<'_>| -> Result<Vec<ModelParameters>> {
        let mut model = initial.clone();
        let mut history = Vec::with_capacity(rounds);
        for round in 0..rounds {
            s.broadcast(round, Payload::GlobalModel(model.clone()))?;
            let replies = s.collect(
                MessageType::ClientUpdate,
                round,
                &format!("training round {round}"),
            )?;
            let updates = replies
                .into_iter()
                .map(|m| match m.payload {
                    Payload::ClientUpdate(u) => Ok(ClientUpdate {
                        client_id: m.sender_id as usize,
                        params: u.params()?,
                        sample_count: u.sample_count,
                    }),
                    _ => unreachable!("collect checks the message type"),
                })
                .collect::<Result<Vec<_>>>()?;
            model = fedavg(&updates, cfg.aggregation_weighting)?;
            history.push(model.clone());
        }
        s.broadcast(rounds, Payload::GlobalModel(model))?;
        s.collect(MessageType::Ack, rounds, "final model broadcast")?;
        Ok(history)
    };

    let client = |s: &Session<'_>, id: usize, permits: &Permits| -> ClientResult<Vec<f64>> {
        let data = &client_data[id];
        let mut accuracies = Vec::with_capacity(rounds);
        loop {
            let Some(msg) = s.client_recv(id as i64)? else {
                return Ok(None);
            };
            match msg.payload {
                Payload::GlobalModel(global) if msg.round < rounds => {
                    let local_cfg = TrainingConfig {
                        seed: client_round_seed(seed, id, msg.round),
                        ..cfg.training
                    };
                    let local = permits.run(|| train_local(&global, data, &local_cfg))?;
                    accuracies.push(evaluate_accuracy(&local, data)?);
                    let payload = ClientUpdatePayload {
                        shapes: local.shapes,
                        values: local.values,
                        sample_count: data.len(),
                    };
                    s.send(
                        SERVER_ID,
                        Message::new(msg.round, id as i64, Payload::ClientUpdate(payload)),
                    )?;
                }
                Payload::GlobalModel(_) => {
                    s.send(SERVER_ID, Message::new(msg.round, id as i64, Payload::Ack))?;
                    return Ok(Some(accuracies));
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "client {id} got unexpected {:?} during training",
                        other.message_type()
                    )))
                }
            }
        }
    };

    let workers = opts.workers.unwrap_or(cfg.num_clients);
    let (history, client_acc) = run_session(&session, workers, server, client)?;

    let mut metrics = Vec::with_capacity(rounds);
    for (round, global) in history.iter().enumerate() {
        let mean_client_accuracy =
            client_acc.iter().map(|a| a[round]).sum::<f64>() / cfg.num_clients as f64;
        let mut global_accuracy = 0.0;
        for data in client_data {
            global_accuracy += evaluate_accuracy(global, data)?;
        }
        metrics.push(RoundMetrics {
            round,
            mean_client_accuracy,
            global_accuracy: global_accuracy / cfg.num_clients as f64,
        });
    }
    Ok(TrainingOutcome {
        model: history.last().cloned().expect("at least one round"),
        rounds: metrics,
    })
}

/// Federated OpenMax calibration over the loopback transport.
pub fn run_calibration_exchange(
    model: &ModelParameters,
    cfg: &FederationConfig,
    cal_cfg: &CalibrationConfig,
    client_data: &[Vec<LabeledSample>],
) -> Result<GlobalCalibration> {
    let transport = LoopbackTransport::for_federation(cfg.num_clients);
    run_calibration_exchange_with(
        &transport,
        model,
        cfg,
        cal_cfg,
        client_data,
        RunOptions::default(),
    )
}

/// Federated OpenMax calibration over `transport`: clients upload MAVs and
/// distances, the server aggregates and broadcasts the global calibration.
pub fn run_calibration_exchange_with(
    transport: &dyn Transport,
    model: &ModelParameters,
    cfg: &FederationConfig,
    cal_cfg: &CalibrationConfig,
    client_data: &[Vec<LabeledSample>],
    opts: RunOptions,
) -> Result<GlobalCalibration> {
    check_client_data(cfg, client_data)?;
    model.validate()?;
    let num_classes = model.num_classes();
    cal_cfg.validate(num_classes)?;
    let round = cfg.global_rounds;

    let session = Session {
        transport,
        num_clients: cfg.num_clients,
        global_rounds: round,
        timeout: opts.timeout,
        aborted: AtomicBool::new(false),
    };

    let server = |s: &Session<'_>| -> Result<GlobalCalibration> {
        s.broadcast(round, Payload::GlobalModel(model.clone()))?;
        let uploads: Vec<CalibrationUpload> = s
            .collect(
                MessageType::CalibrationUpload,
                round,
                "calibration exchange",
            )?
            .into_iter()
            .map(|m| match m.payload {
                Payload::CalibrationUpload(u) => u,
                _ => unreachable!("collect checks the message type"),
            })
            .collect();
        let calibration = aggregate_uploads(&uploads, num_classes, cal_cfg)?;
        s.broadcast(round, Payload::GlobalCalibration(calibration.clone()))?;
        s.collect(MessageType::Ack, round, "calibration broadcast")?;
        Ok(calibration)
    };

    let client = |s: &Session<'_>, id: usize, _: &Permits| -> ClientResult<GlobalCalibration> {
        let data = &client_data[id];
        let Some(msg) = s.client_recv(id as i64)? else {
            return Ok(None);
        };
        let Payload::GlobalModel(global) = msg.payload else {
            return Err(Error::Protocol(format!(
                "client {id} expected the trained model, got {:?}",
                msg.message_type()
            )));
        };
        let upload = build_client_upload(id, &global, data, cal_cfg.metric)?;
        s.send(
            SERVER_ID,
            Message::new(round, id as i64, Payload::CalibrationUpload(upload)),
        )?;

        let Some(msg) = s.client_recv(id as i64)? else {
            return Ok(None);
        };
        let Payload::GlobalCalibration(calibration) = msg.payload else {
            return Err(Error::Protocol(format!(
                "client {id} expected the global calibration, got {:?}",
                msg.message_type()
            )));
        };
        s.send(SERVER_ID, Message::new(round, id as i64, Payload::Ack))?;
        Ok(Some(calibration))
    };

    let (calibration, client_copies) = run_session(&session, cfg.num_clients, server, client)?;
    debug_assert!(client_copies.iter().all(|c| *c == calibration));
    Ok(calibration)
}
