use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Direction, Message, MessageKind};
use crate::error::{FedError, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
struct Tally {
    scalars: u64,
    messages: u64,
}

/// Append-only count of scalars crossing the institution/server boundary,
/// keyed by round, direction and message kind.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CommLedger {
    entries: BTreeMap<(usize, Direction, MessageKind), Tally>,
    sent: BTreeMap<(usize, Direction), u64>,
    received: BTreeMap<(usize, Direction), u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub round: usize,
    pub direction: Direction,
    pub variant: MessageKind,
    pub scalars: u64,
    pub messages: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub uplink: u64,
    pub downlink: u64,
    pub peer: u64,
    pub messages: u64,
    pub by_variant: BTreeMap<String, u64>,
    pub uplink_per_round: BTreeMap<usize, u64>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a sent message after checking its declared count.
    pub fn record(&mut self, round: usize, msg: &Message) -> Result<()> {
        let dir = msg.validate()?;
        let t = self.entries.entry((round, dir, msg.kind)).or_default();
        t.scalars += msg.scalar_count;
        t.messages += 1;
        *self.sent.entry((round, dir)).or_default() += msg.scalar_count;
        Ok(())
    }

    /// Records arrival of a message at its destination.
    pub fn receive(&mut self, round: usize, msg: &Message) -> Result<()> {
        let dir = msg.direction()?;
        *self.received.entry((round, dir)).or_default() += msg.payload_scalars();
        Ok(())
    }

    /// Record, deliver and hand back the message.
    pub fn transmit(&mut self, round: usize, msg: Message) -> Result<Message> {
        self.record(round, &msg)?;
        self.receive(round, &msg)?;
        Ok(msg)
    }

    pub fn round_total(&self, round: usize, direction: Direction) -> u64 {
        self.sent.get(&(round, direction)).copied().unwrap_or(0)
    }

    pub fn total(&self, direction: Direction) -> u64 {
        self.sent
            .iter()
            .filter(|((_, d), _)| *d == direction)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn total_by_kind(&self, direction: Direction, kind: MessageKind) -> u64 {
        self.entries
            .iter()
            .filter(|((_, d, k), _)| *d == direction && *k == kind)
            .map(|(_, t)| t.scalars)
            .sum()
    }

    pub fn message_count(&self, direction: Direction, kind: MessageKind) -> u64 {
        self.entries
            .iter()
            .filter(|((_, d, k), _)| *d == direction && *k == kind)
            .map(|(_, t)| t.messages)
            .sum()
    }

    pub fn rounds(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.entries.keys().map(|k| k.0).collect();
        r.dedup();
        r
    }

    /// Scalars sent equal scalars received in every round and direction.
    pub fn is_conserved(&self) -> bool {
        self.sent == self.received
    }

    pub fn rows(&self) -> Vec<LedgerRow> {
        self.entries
            .iter()
            .map(|(&(round, direction, variant), t)| LedgerRow {
                round,
                direction,
                variant,
                scalars: t.scalars,
                messages: t.messages,
            })
            .collect()
    }

    pub fn summary(&self) -> LedgerSummary {
        let mut s = LedgerSummary {
            uplink: self.total(Direction::Uplink),
            downlink: self.total(Direction::Downlink),
            peer: self.total(Direction::Peer),
            ..Default::default()
        };
        for (&(round, dir, kind), t) in &self.entries {
            s.messages += t.messages;
            *s.by_variant.entry(format!("{dir}/{kind}")).or_default() += t.scalars;
            if dir == Direction::Uplink {
                *s.uplink_per_round.entry(round).or_default() += t.scalars;
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("round,direction,variant,scalars\n");
        for r in self.rows() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.round, r.direction, r.variant, r.scalars
            ));
        }
        std::fs::write(path, out).map_err(|e| FedError::io(path, e))
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        std::fs::write(path, text).map_err(|e| FedError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::Endpoint;
    use crate::tensor::Tensor;

    fn up(n: usize) -> Message {
        Message::new(
            MessageKind::CutGradients,
            Endpoint::Institution(0),
            Endpoint::Server,
            vec![Tensor::zeros(&[n, 1])],
        )
    }

    #[test]
    fn records_sum_and_conserve() {
        let mut l = CommLedger::new();
        l.transmit(1, up(3)).unwrap();
        l.transmit(1, up(4)).unwrap();
        l.transmit(2, up(5)).unwrap();
        assert_eq!(l.round_total(1, Direction::Uplink), 7);
        assert_eq!(l.total(Direction::Uplink), 12);
        assert_eq!(
            l.message_count(Direction::Uplink, MessageKind::CutGradients),
            3
        );
        assert!(l.is_conserved());
        assert_eq!(l.rounds(), vec![1, 2]);
        assert_eq!(l.summary().uplink_per_round[&1], 7);
        l.record(3, &up(1)).unwrap();
        assert!(!l.is_conserved());
    }

    #[test]
    fn inconsistent_count_rejected() {
        let mut l = CommLedger::new();
        let mut m = up(2);
        m.scalar_count = 3;
        assert!(l.record(0, &m).is_err());
        assert_eq!(l.total(Direction::Uplink), 0);
    }

    #[test]
    fn csv_export() {
        let mut l = CommLedger::new();
        l.transmit(1, up(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        l.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "round,direction,variant,scalars\n1,uplink,cut_gradients,2\n"
        );
    }
}
