//! Append-only log of every transfer between the server and the clients.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Party {
    Server,
    Client(usize),
}

impl std::fmt::Display for Party {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Party::Server => f.write_str("server"),
            Party::Client(k) => write!(f, "client{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Upload,
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadRole {
    RepsOverlap,
    RepsUnaligned,
    PartialGrads,
    ClassCount,
    InclusionProbs,
    LogitsOrMisc,
}

impl PayloadRole {
    pub const ALL: [PayloadRole; 6] = [
        PayloadRole::RepsOverlap,
        PayloadRole::RepsUnaligned,
        PayloadRole::PartialGrads,
        PayloadRole::ClassCount,
        PayloadRole::InclusionProbs,
        PayloadRole::LogitsOrMisc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PayloadRole::RepsOverlap => "reps_overlap",
            PayloadRole::RepsUnaligned => "reps_unaligned",
            PayloadRole::PartialGrads => "partial_grads",
            PayloadRole::ClassCount => "class_count",
            PayloadRole::InclusionProbs => "inclusion_probs",
            PayloadRole::LogitsOrMisc => "logits_or_misc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub role: PayloadRole,
    pub scalar_count: usize,
}

impl Payload {
    pub fn new(role: PayloadRole, scalar_count: usize) -> Self {
        Self { role, scalar_count }
    }
}

/// One communication event. A message may bundle several payloads that
/// travel together, such as partial gradients with the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub seq: usize,
    pub direction: Direction,
    pub sender: Party,
    pub receiver: Party,
    pub payloads: Vec<Payload>,
}

impl Message {
    pub fn scalar_count(&self) -> usize {
        self.payloads.iter().map(|p| p.scalar_count).sum()
    }

    /// The client at the other end of the server link.
    pub fn client(&self) -> usize {
        match (self.sender, self.receiver) {
            (Party::Client(k), _) | (_, Party::Client(k)) => k,
            (Party::Server, Party::Server) => unreachable!("messages always involve a client"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    messages: Vec<Message>,
    bytes_per_scalar: usize,
}

impl Default for CommLedger {
    fn default() -> Self {
        Self::new(4)
    }
}

impl CommLedger {
    pub fn new(bytes_per_scalar: usize) -> Self {
        Self {
            messages: Vec::new(),
            bytes_per_scalar,
        }
    }

    pub fn bytes_per_scalar(&self) -> usize {
        self.bytes_per_scalar
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn upload(&mut self, client: usize, payloads: Vec<Payload>) {
        self.push(
            Direction::Upload,
            Party::Client(client),
            Party::Server,
            payloads,
        );
    }

    pub fn download(&mut self, client: usize, payloads: Vec<Payload>) {
        self.push(
            Direction::Download,
            Party::Server,
            Party::Client(client),
            payloads,
        );
    }

    fn push(
        &mut self,
        direction: Direction,
        sender: Party,
        receiver: Party,
        payloads: Vec<Payload>,
    ) {
        let seq = self.messages.len();
        self.messages.push(Message {
            seq,
            direction,
            sender,
            receiver,
            payloads,
        });
    }

    /// Messages sent or received by `client`.
    pub fn times_for(&self, client: usize) -> usize {
        self.messages
            .iter()
            .filter(|m| m.client() == client)
            .count()
    }

    pub fn count_for(&self, client: usize, direction: Direction) -> usize {
        self.messages
            .iter()
            .filter(|m| m.client() == client && m.direction == direction)
            .count()
    }

    pub fn total_scalars(&self) -> usize {
        self.messages.iter().map(Message::scalar_count).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.total_scalars() * self.bytes_per_scalar
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record([
            "seq",
            "direction",
            "sender",
            "receiver",
            "role",
            "scalars",
            "bytes",
        ])?;
        for m in &self.messages {
            let direction = match m.direction {
                Direction::Upload => "upload",
                Direction::Download => "download",
            };
            for p in &m.payloads {
                writer.write_record([
                    m.seq.to_string(),
                    direction.to_owned(),
                    m.sender.to_string(),
                    m.receiver.to_string(),
                    p.role.as_str().to_owned(),
                    p.scalar_count.to_string(),
                    (p.scalar_count * self.bytes_per_scalar).to_string(),
                ])?;
            }
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
