use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

/// Event kinds, listed in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    TransferComplete,
    LoadComplete,
    /// Shared or expert computation of one stage finished.
    ComputeComplete,
    LayerComplete,
    HelloTick,
    ReplanCheck,
    RequestArrival,
}

impl EventKind {
    pub fn priority(self) -> u8 {
        match self {
            EventKind::TransferComplete => 0,
            EventKind::LoadComplete => 1,
            EventKind::ComputeComplete | EventKind::LayerComplete => 2,
            EventKind::HelloTick => 3,
            EventKind::ReplanCheck => 4,
            EventKind::RequestArrival => 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Payload {
    Arrival { req: usize },
    Shared { req: usize },
    Hop { req: usize, slot: usize },
    Load { req: usize, slot: usize },
    Expert { req: usize, slot: usize },
    Layer { req: usize },
    Hello { server: usize },
    Replan,
    Migration { plan: usize },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub seq: u64,
    pub payload: Payload,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    /// Earliest first: time, then kind priority, then insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.priority().cmp(&self.kind.priority()))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
pub(crate) struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, time: f64, kind: EventKind, payload: Payload) {
        debug_assert!(time.is_finite(), "event scheduled at {time}");
        self.heap.push(Event {
            time,
            kind,
            seq: self.next_seq,
            payload,
        });
        self.next_seq += 1;
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
    }

    #[cfg(test)]
    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}
