//! Typed message bus connecting the four agents.
//!
//! A message is `(sender, receiver, payload)` plus the index of the
//! coordination round that produced it. Delivery is synchronous and FIFO per
//! receiver; every accepted message is also appended to the trace.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agents::Strategy;
use crate::encoders::Embedding;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AgentId {
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "L")]
    Linguistic,
    #[serde(rename = "N")]
    Nominal,
    #[serde(rename = "C")]
    Coordinator,
}

impl AgentId {
    pub const ALL: [AgentId; 4] = [
        AgentId::Visual,
        AgentId::Linguistic,
        AgentId::Nominal,
        AgentId::Coordinator,
    ];
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentId::Visual => "V",
            AgentId::Linguistic => "L",
            AgentId::Nominal => "N",
            AgentId::Coordinator => "C",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Payload {
    Features(Vec<Embedding>),
    Strategy { strategy: Strategy, difficulty: f64 },
    Context(Embedding),
    Metadata(BTreeMap<String, String>),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Features(_) => "FEATURES",
            Payload::Strategy { .. } => "STRATEGY",
            Payload::Context(_) => "CONTEXT",
            Payload::Metadata(_) => "METADATA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub sender: AgentId,
    pub receiver: AgentId,
    pub step_index: u64,
    pub payload: Payload,
}

impl Message {
    pub fn new(sender: AgentId, receiver: AgentId, step_index: u64, payload: Payload) -> Self {
        Self {
            sender,
            receiver,
            step_index,
            payload,
        }
    }
}

/// Append-only record of every message accepted by a bus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    messages: Vec<Message>,
}

impl TraceLog {
    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Messages delivered to `receiver` during round `step`, in post order.
    pub fn inbound(&self, receiver: AgentId, step: u64) -> Vec<Message> {
        self.messages
            .iter()
            .filter(|m| m.receiver == receiver && m.step_index == step)
            .cloned()
            .collect()
    }

    pub fn outbound(&self, sender: AgentId, step: u64) -> Vec<Message> {
        self.messages
            .iter()
            .filter(|m| m.sender == sender && m.step_index == step)
            .cloned()
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for m in &self.messages {
            out.push_str(&serde_json::to_string(m)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let messages = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<Message>, _>>()?;
        Ok(Self { messages })
    }

    /// Appends this trace to a JSON Lines file.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let file = File::options()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for m in &self.messages {
            serde_json::to_writer(&mut w, m)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut messages = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if !line.trim().is_empty() {
                messages.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Self { messages })
    }
}

#[derive(Debug, Default)]
pub struct MessageBus {
    queues: BTreeMap<AgentId, VecDeque<Message>>,
    trace: TraceLog,
}

impl MessageBus {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bus with all four agents registered.
    pub fn with_all_agents() -> Self {
        let mut bus = Self::new();
        for id in AgentId::ALL {
            bus.register(id);
        }
        bus
    }

    pub fn register(&mut self, id: AgentId) {
        self.queues.entry(id).or_default();
    }

    pub fn is_registered(&self, id: AgentId) -> bool {
        self.queues.contains_key(&id)
    }

    pub fn post(&mut self, msg: Message) -> Result<()> {
        if msg.sender == msg.receiver {
            return Err(Error::InvalidMessage(format!(
                "agent {} cannot message itself",
                msg.sender
            )));
        }
        if let Some(last) = self.trace.messages.last() {
            if msg.step_index < last.step_index {
                return Err(Error::InvalidMessage(format!(
                    "step index {} precedes {}",
                    msg.step_index, last.step_index
                )));
            }
        }
        let queue = self
            .queues
            .get_mut(&msg.receiver)
            .ok_or(Error::Routing(msg.receiver))?;
        queue.push_back(msg.clone());
        self.trace.messages.push(msg);
        Ok(())
    }

    pub fn drain(&mut self, receiver: AgentId) -> Result<Vec<Message>> {
        let queue = self
            .queues
            .get_mut(&receiver)
            .ok_or(Error::Routing(receiver))?;
        Ok(queue.drain(..).collect())
    }

    pub fn pending(&self, receiver: AgentId) -> usize {
        self.queues.get(&receiver).map_or(0, VecDeque::len)
    }

    pub fn trace(&self) -> &TraceLog {
        &self.trace
    }

    pub fn into_trace(self) -> TraceLog {
        self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;

    fn ctx(x: f64) -> Payload {
        Payload::Context(Embedding::new(vec![x, 1.0 - x], Modality::Visual))
    }

    #[test]
    fn post_then_drain_round_trips() {
        let mut bus = MessageBus::with_all_agents();
        let m = Message::new(AgentId::Visual, AgentId::Linguistic, 0, ctx(0.25));
        bus.post(m.clone()).unwrap();
        assert_eq!(bus.drain(AgentId::Linguistic).unwrap(), vec![m]);
    }

    #[test]
    fn unregistered_receiver_is_a_routing_error() {
        let mut bus = MessageBus::new();
        bus.register(AgentId::Visual);
        let err = bus
            .post(Message::new(AgentId::Visual, AgentId::Linguistic, 0, ctx(0.0)))
            .unwrap_err();
        assert!(matches!(err, Error::Routing(AgentId::Linguistic)));
        assert!(bus.trace().is_empty());
        assert!(bus.drain(AgentId::Nominal).is_err());
    }

    #[test]
    fn fifo_and_clearing() {
        let mut bus = MessageBus::with_all_agents();
        assert!(bus.drain(AgentId::Linguistic).unwrap().is_empty());
        let m1 = Message::new(AgentId::Visual, AgentId::Linguistic, 0, ctx(0.1));
        let m2 = Message::new(
            AgentId::Nominal,
            AgentId::Linguistic,
            0,
            Payload::Metadata(BTreeMap::from([("k".into(), "v".into())])),
        );
        bus.post(m1.clone()).unwrap();
        bus.post(m2.clone()).unwrap();
        assert_eq!(bus.drain(AgentId::Linguistic).unwrap(), vec![m1, m2]);
        assert!(bus.drain(AgentId::Linguistic).unwrap().is_empty());
    }

    #[test]
    fn rejects_self_messages_and_step_regressions() {
        let mut bus = MessageBus::with_all_agents();
        assert!(bus
            .post(Message::new(AgentId::Visual, AgentId::Visual, 0, ctx(0.0)))
            .is_err());
        bus.post(Message::new(AgentId::Visual, AgentId::Nominal, 3, ctx(0.0)))
            .unwrap();
        assert!(bus
            .post(Message::new(AgentId::Visual, AgentId::Nominal, 2, ctx(0.0)))
            .is_err());
        assert_eq!(bus.trace().len(), 1);
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let mut bus = MessageBus::with_all_agents();
        bus.post(Message::new(
            AgentId::Visual,
            AgentId::Coordinator,
            0,
            Payload::Strategy {
                strategy: Strategy::RobustAugmented,
                difficulty: 0.1 + 0.2,
            },
        ))
        .unwrap();
        bus.post(Message::new(
            AgentId::Linguistic,
            AgentId::Coordinator,
            1,
            Payload::Features(vec![Embedding::new(
                vec![std::f64::consts::PI, -1e-300, 1.0 / 3.0],
                Modality::Text,
            )]),
        ))
        .unwrap();
        let text = bus.trace().to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(&TraceLog::from_jsonl(&text).unwrap(), bus.trace());
    }
}
