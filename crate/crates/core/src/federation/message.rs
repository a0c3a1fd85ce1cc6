//! Wire messages.
//!
//! Every message is a JSON object `{"type", "round", "sender_id", "payload"}`.
//! Payload bodies:
//!
//! | type                 | payload                                                    |
//! |----------------------|------------------------------------------------------------|
//! | `GLOBAL_MODEL`       | `{"shapes", "values"}`                                     |
//! | `CLIENT_UPDATE`      | `{"shapes", "values", "sample_count"}`                     |
//! | `CALIBRATION_UPLOAD` | `{"client_id", "classes": [{"class_id", "mav", "distances"}]}` |
//! | `GLOBAL_CALIBRATION` | `{"config", "classes": [{"class_id", "mav", "weibull", "distance_count"}]}` |
//! | `ACK`                | `{}`                                                       |
//!
//! Floats are written in shortest round-trip form, so decoding returns the
//! exact bits that were sent.

use serde::de::Error as _;
use serde::ser::SerializeStruct;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::classifier::ModelParameters;
use crate::error::{Error, Result};
use crate::openmax::{CalibrationUpload, GlobalCalibration};

pub const SERVER_ID: i64 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageType {
    GlobalModel,
    ClientUpdate,
    CalibrationUpload,
    GlobalCalibration,
    Ack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientUpdatePayload {
    pub shapes: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    pub sample_count: usize,
}

impl ClientUpdatePayload {
    pub fn params(&self) -> Result<ModelParameters> {
        ModelParameters::new(self.shapes.clone(), self.values.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empty {}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    GlobalModel(ModelParameters),
    ClientUpdate(ClientUpdatePayload),
    CalibrationUpload(CalibrationUpload),
    GlobalCalibration(GlobalCalibration),
    Ack,
}

impl Payload {
    pub fn message_type(&self) -> MessageType {
        match self {
            Payload::GlobalModel(_) => MessageType::GlobalModel,
            Payload::ClientUpdate(_) => MessageType::ClientUpdate,
            Payload::CalibrationUpload(_) => MessageType::CalibrationUpload,
            Payload::GlobalCalibration(_) => MessageType::GlobalCalibration,
            Payload::Ack => MessageType::Ack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: usize,
    pub sender_id: i64,
    pub payload: Payload,
}

impl Message {
    pub fn new(round: usize, sender_id: i64, payload: Payload) -> Self {
        Self {
            round,
            sender_id,
            payload,
        }
    }

    pub fn message_type(&self) -> MessageType {
        self.payload.message_type()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes)
            .map_err(|e| Error::Protocol(format!("malformed message: {e}")))
    }

    /// Checks the round bound and who may send what.
    pub fn validate(&self, global_rounds: usize) -> Result<()> {
        if self.round > global_rounds {
            return Err(Error::Protocol(format!(
                "{:?} message for round {} exceeds {global_rounds} rounds",
                self.message_type(),
                self.round
            )));
        }
        let from_server = self.sender_id == SERVER_ID;
        let server_only = matches!(
            self.message_type(),
            MessageType::GlobalModel | MessageType::GlobalCalibration
        );
        let client_only = matches!(
            self.message_type(),
            MessageType::ClientUpdate | MessageType::CalibrationUpload
        );
        if (server_only && !from_server) || (client_only && (from_server || self.sender_id < 0)) {
            return Err(Error::Protocol(format!(
                "{:?} message from participant {}",
                self.message_type(),
                self.sender_id
            )));
        }
        if let Payload::CalibrationUpload(u) = &self.payload {
            if u.client_id as i64 != self.sender_id {
                return Err(Error::Protocol(format!(
                    "client {} sent an upload labelled client {}",
                    self.sender_id, u.client_id
                )));
            }
        }
        Ok(())
    }
}

impl Serialize for Message {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("Message", 4)?;
        s.serialize_field("type", &self.message_type())?;
        s.serialize_field("round", &self.round)?;
        s.serialize_field("sender_id", &self.sender_id)?;
        match &self.payload {
            Payload::GlobalModel(m) => s.serialize_field("payload", m)?,
            Payload::ClientUpdate(u) => s.serialize_field("payload", u)?,
            Payload::CalibrationUpload(u) => s.serialize_field("payload", u)?,
            Payload::GlobalCalibration(c) => s.serialize_field("payload", c)?,
            Payload::Ack => s.serialize_field("payload", &Empty {})?,
        }
        s.end()
    }
}

impl<'de> Deserialize<'de> for Message {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            #[serde(rename = "type")]
            msg_type: MessageType,
            round: usize,
            sender_id: i64,
            payload: serde_json::Value,
        }

        let raw = Raw::deserialize(deserializer)?;
        let body = raw.payload;
        let payload = match raw.msg_type {
            MessageType::GlobalModel => {
                Payload::GlobalModel(serde_json::from_value(body).map_err(D::Error::custom)?)
            }
            MessageType::ClientUpdate => {
                Payload::ClientUpdate(serde_json::from_value(body).map_err(D::Error::custom)?)
            }
            MessageType::CalibrationUpload => {
                Payload::CalibrationUpload(serde_json::from_value(body).map_err(D::Error::custom)?)
            }
            MessageType::GlobalCalibration => {
                Payload::GlobalCalibration(serde_json::from_value(body).map_err(D::Error::custom)?)
            }
            MessageType::Ack => {
                let _: Empty = serde_json::from_value(body).map_err(D::Error::custom)?;
                Payload::Ack
            }
        };
        Ok(Message {
            round: raw.round,
            sender_id: raw.sender_id,
            payload,
        })
    }
}
