//! Message delivery between the server and clients.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};

use super::message::Message;
use crate::error::{Error, Result};

pub type ParticipantId = i64;

/// Reliable, in-order delivery between participants.
///
/// Messages from one sender to one receiver arrive in the order they were
/// sent; nothing is lost or duplicated. `send` may be called concurrently;
/// each participant is the only consumer of its own inbox.
pub trait Transport: Send + Sync {
    fn send(&self, to: ParticipantId, msg: &Message) -> Result<()>;

    /// Next message for `me`, or `None` once `timeout` elapses.
    fn recv(&self, me: ParticipantId, timeout: Duration) -> Result<Option<Message>>;
}

/// One message as it crossed the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRecord {
    pub from: ParticipantId,
    pub to: ParticipantId,
    pub bytes: Vec<u8>,
}

type Inbox = (Sender<Vec<u8>>, Receiver<Vec<u8>>);

/// In-process transport backed by one unbounded queue per participant.
///
/// Messages are serialized on `send` and decoded on `recv`, so everything
/// that passes through exercises the wire format. Optionally keeps a log of
/// every serialized message.
pub struct LoopbackTransport {
    inboxes: HashMap<ParticipantId, Inbox>,
    log: Option<Arc<Mutex<Vec<WireRecord>>>>,
}

impl LoopbackTransport {
    pub fn new(participants: impl IntoIterator<Item = ParticipantId>) -> Self {
        Self {
            inboxes: participants
                .into_iter()
                .map(|id| (id, unbounded()))
                .collect(),
            log: None,
        }
    }

    /// Server plus clients `0..num_clients`.
    pub fn for_federation(num_clients: usize) -> Self {
        Self::new(std::iter::once(super::SERVER_ID).chain((0..num_clients).map(|c| c as i64)))
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Arc::default());
        self
    }

    /// Snapshot of the message log (empty unless built `with_log`).
    pub fn log(&self) -> Vec<WireRecord> {
        self.log
            .as_ref()
            .map(|l| l.lock().expect("log lock poisoned").clone())
            .unwrap_or_default()
    }

    fn inbox(&self, id: ParticipantId) -> Result<&Inbox> {
        self.inboxes
            .get(&id)
            .ok_or_else(|| Error::Protocol(format!("unknown participant {id}")))
    }
}

impl Transport for LoopbackTransport {
    fn send(&self, to: ParticipantId, msg: &Message) -> Result<()> {
        let bytes = msg.to_bytes()?;
        let (tx, _) = self.inbox(to)?;
        // Hold the log lock across the enqueue so log order matches queue order.
        let _guard = self.log.as_ref().map(|log| {
            let mut log = log.lock().expect("log lock poisoned");
            log.push(WireRecord {
                from: msg.sender_id,
                to,
                bytes: bytes.clone(),
            });
            log
        });
        tx.send(bytes)
            .map_err(|_| Error::Protocol(format!("inbox of {to} closed")))
    }

    fn recv(&self, me: ParticipantId, timeout: Duration) -> Result<Option<Message>> {
        let (_, rx) = self.inbox(me)?;
        match rx.recv_timeout(timeout) {
            Ok(bytes) => Message::from_bytes(&bytes).map(Some),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Protocol(format!("inbox of {me} closed")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::message::{Payload, SERVER_ID};

    #[test]
    fn fifo_per_pair() {
        let t = LoopbackTransport::for_federation(2).with_log();
        for round in 0..5 {
            t.send(1, &Message::new(round, 0, Payload::Ack)).unwrap();
        }
        for round in 0..5 {
            let m = t.recv(1, Duration::from_millis(10)).unwrap().unwrap();
            assert_eq!(m.round, round);
            assert_eq!(m.sender_id, 0);
        }
        assert!(t.recv(1, Duration::from_millis(5)).unwrap().is_none());
        assert_eq!(t.log().len(), 5);
    }

    #[test]
    fn unknown_participant() {
        let t = LoopbackTransport::for_federation(1);
        assert!(t.send(7, &Message::new(0, 0, Payload::Ack)).is_err());
        assert!(t.recv(7, Duration::from_millis(1)).is_err());
    }

    #[test]
    fn concurrent_senders_keep_per_sender_order() {
        let t = LoopbackTransport::for_federation(4);
        std::thread::scope(|s| {
            for c in 0..4i64 {
                let t = &t;
                s.spawn(move || {
                    for r in 0..50 {
                        t.send(SERVER_ID, &Message::new(r, c, Payload::Ack))
                            .unwrap();
                    }
                });
            }
        });
        let mut last = [None::<usize>; 4];
        for _ in 0..200 {
            let m = t
                .recv(SERVER_ID, Duration::from_millis(10))
                .unwrap()
                .unwrap();
            let slot = &mut last[m.sender_id as usize];
            assert!(slot.is_none_or(|prev| prev < m.round));
            *slot = Some(m.round);
        }
    }
}
