//! Federated open-set recognition.
//!
//! Clients train a small classifier collaboratively with FedAvg, then take
//! part in a federated OpenMax calibration: each client uploads only per-class
//! mean activation vectors and the distances of its correctly classified
//! samples to them. The server averages the MAVs, pools the distances, fits a
//! Weibull tail model per class, and the resulting calibration labels test
//! samples as one of the known classes or as unknown.

pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod label;
pub mod numerics;
pub mod openmax;
pub mod weibull;

pub use error::{Error, Result};
pub use label::Label;
