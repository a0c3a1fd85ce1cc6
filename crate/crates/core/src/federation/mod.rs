//! Federated orchestration: FedAvg, the wire protocol, transports and the
//! server/client round loops for training and for the OpenMax calibration
//! exchange.
//!
//! Participants are identified by `i64`: the server is [`SERVER_ID`] (`-1`),
//! clients are `0..N`. Everything that iterates over clients does so in
//! ascending id order, so results do not depend on arrival order.

mod fedavg;
mod message;
mod runner;
mod transport;

pub use fedavg::{fedavg, AggregationWeighting, ClientUpdate};
pub use message::{ClientUpdatePayload, Message, MessageType, Payload, SERVER_ID};
pub use runner::{
    client_round_seed, run_calibration_exchange, run_calibration_exchange_with, run_training,
    run_training_with, FederationConfig, RoundMetrics, RunOptions, TrainingOutcome,
};
pub use transport::{LoopbackTransport, ParticipantId, Transport, WireRecord};
