//! Deterministic delivery queue between actors.
//!
//! Messages are delivered in `(time, recipient, sequence)` order, so two runs
//! that send the same messages observe the same interleaving.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::keys::IntervalNumber;

use super::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActorId {
    Phone(AgentId),
    Institute(u32),
    Ledger,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope<M> {
    pub deliver_at: IntervalNumber,
    pub to: ActorId,
    pub seq: u64,
    pub message: M,
}

#[derive(Debug)]
pub struct MessageFabric<M> {
    queue: BTreeMap<(IntervalNumber, ActorId, u64), M>,
    next_seq: u64,
    loss: f64,
    rng: ChaCha20Rng,
    dropped: u64,
}

impl<M> MessageFabric<M> {
    /// `loss` is the independent drop probability applied to every send.
    pub fn new(loss: f64, seed: [u8; 32]) -> Self {
        assert!((0.0..=1.0).contains(&loss), "loss must be a probability");
        Self {
            queue: BTreeMap::new(),
            next_seq: 0,
            loss,
            rng: ChaCha20Rng::from_seed(seed),
            dropped: 0,
        }
    }

    /// Returns false when the message was dropped.
    pub fn send(&mut self, deliver_at: IntervalNumber, to: ActorId, message: M) -> bool {
        let seq = self.next_seq;
        self.next_seq += 1;
        if self.loss > 0.0 && self.rng.gen_bool(self.loss) {
            self.dropped += 1;
            return false;
        }
        self.queue.insert((deliver_at, to, seq), message);
        true
    }

    /// Removes and returns every message due at or before `now`, in order.
    pub fn drain_due(&mut self, now: IntervalNumber) -> Vec<Envelope<M>> {
        let later = match now.checked_add(1) {
            Some(next) => self.queue.split_off(&(next, ActorId::Phone(0), 0)),
            None => BTreeMap::new(),
        };
        let due = std::mem::replace(&mut self.queue, later);
        due.into_iter()
            .map(|((deliver_at, to, seq), message)| Envelope { deliver_at, to, seq, message })
            .collect()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivery_order() {
        let mut fabric = MessageFabric::new(0.0, [0u8; 32]);
        let t = IntervalNumber::new(10);
        fabric.send(t.checked_add(1).unwrap(), ActorId::Phone(0), "late");
        fabric.send(t, ActorId::Phone(5), "b1");
        fabric.send(t, ActorId::Phone(2), "a");
        fabric.send(t, ActorId::Phone(5), "b2");
        fabric.send(t, ActorId::Ledger, "ledger");
        let due: Vec<_> = fabric.drain_due(t).into_iter().map(|e| e.message).collect();
        assert_eq!(due, vec!["a", "b1", "b2", "ledger"]);
        assert_eq!(fabric.pending(), 1);
        assert_eq!(fabric.drain_due(t.checked_add(5).unwrap()).len(), 1);
    }

    #[test]
    fn loss_is_seeded() {
        let run = |seed| {
            let mut fabric = MessageFabric::new(0.3, seed);
            (0..1000).map(|i| fabric.send(IntervalNumber::new(0), ActorId::Phone(i), ())).collect::<Vec<_>>()
        };
        let a = run([4u8; 32]);
        assert_eq!(a, run([4u8; 32]));
        let delivered = a.iter().filter(|&&ok| ok).count();
        assert!((650..=750).contains(&delivered), "{delivered}");
    }
}
