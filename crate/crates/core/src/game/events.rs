use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    SftFinalized { round: usize, lines: usize },
    AttackerAcknowledged { round: usize, digest: String },
    RewardComputed {
        round: usize,
        query_id: String,
        candidate_index: usize,
    },
    CandidateDropped {
        round: usize,
        query_id: String,
        candidate_index: usize,
        reason: String,
    },
    DpoFinalized { round: usize, lines: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Append-only, totally ordered log of round milestones.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Mutex<Vec<Event>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, kind: EventKind) -> usize {
        let mut events = self.events.lock().expect("event log poisoned");
        let seq = events.len();
        events.push(Event { seq, kind });
        seq
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().expect("event log poisoned").clone()
    }

    /// True iff the round's SFT file was finalized before its first reward.
    pub fn sft_precedes_rewards(events: &[Event], round: usize) -> bool {
        let sft = events.iter().find_map(|e| match e.kind {
            EventKind::SftFinalized { round: r, .. } if r == round => Some(e.seq),
            _ => None,
        });
        let first_reward = events.iter().find_map(|e| match e.kind {
            EventKind::RewardComputed { round: r, .. } if r == round => Some(e.seq),
            _ => None,
        });
        match (sft, first_reward) {
            (Some(s), Some(r)) => s < r,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }
}
