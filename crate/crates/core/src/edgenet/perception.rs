use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::hello::{encode_hello, HelloMessage, ResourceStatus, HELLO_LEN};
use super::topology::ServerId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub threshold_pct: f64,
    pub period_s: f64,
    /// How often per period a server re-checks its resources for threshold
    /// crossings.
    pub checks_per_period: u32,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig {
            threshold_pct: 5.0,
            period_s: 2.0,
            checks_per_period: 4,
        }
    }
}

impl PerceptionConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.threshold_pct >= 0.0) {
            return Err(crate::Error::config("perception.threshold_pct", "must be >= 0"));
        }
        if !(self.period_s > 0.0) {
            return Err(crate::Error::config("perception.period_s", "must be > 0"));
        }
        if self.checks_per_period == 0 {
            return Err(crate::Error::config("perception.checks_per_period", "must be >= 1"));
        }
        Ok(())
    }

    pub fn check_interval(&self) -> f64 {
        self.period_s / self.checks_per_period as f64
    }
}

/// Threshold-or-period advertisement rule.
pub fn maybe_advertise(
    current: &ResourceStatus,
    last_advertised: &ResourceStatus,
    threshold_pct: f64,
    period_s: f64,
    now: f64,
) -> bool {
    let dc = (current.avail_compute_pct as f64 - last_advertised.avail_compute_pct as f64).abs();
    let dm = (current.avail_gpu_mem_pct as f64 - last_advertised.avail_gpu_mem_pct as f64).abs();
    dc > threshold_pct || dm > threshold_pct || now - last_advertised.timestamp >= period_s
}

/// Per-server advertisement state: sequence counter and last sent status.
#[derive(Debug, Clone)]
pub struct PerceptionAgent {
    pub sender: ServerId,
    next_seq: u32,
    last: Option<ResourceStatus>,
    pub sent: u64,
}

impl PerceptionAgent {
    pub fn new(sender: ServerId) -> Self {
        PerceptionAgent {
            sender,
            next_seq: 1,
            last: None,
            sent: 0,
        }
    }

    /// Status carried by the most recent advertisement.
    pub fn last(&self) -> Option<&ResourceStatus> {
        self.last.as_ref()
    }

    /// Returns the encoded frame when the status warrants a broadcast.
    /// The first call always advertises.
    pub fn tick(&mut self, current: ResourceStatus, cfg: &PerceptionConfig, now: f64) -> Option<[u8; HELLO_LEN]> {
        let due = match &self.last {
            None => true,
            Some(last) => maybe_advertise(&current, last, cfg.threshold_pct, cfg.period_s, now),
        };
        if !due {
            return None;
        }
        let stamped = ResourceStatus { timestamp: now, ..current };
        let frame = encode_hello(&stamped, self.sender, self.next_seq).ok()?;
        self.next_seq = self.next_seq.wrapping_add(1);
        self.last = Some(stamped);
        self.sent += 1;
        Some(frame)
    }
}

/// Latest status per neighbor, by sequence number.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NeighborView {
    entries: BTreeMap<ServerId, (u32, ResourceStatus)>,
}

impl NeighborView {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies a received hello; stale (non-increasing sequence) arrivals are
    /// dropped. Returns whether the view changed.
    pub fn receive(&mut self, hello: &HelloMessage, received_at: f64) -> bool {
        match self.entries.get(&hello.sender) {
            Some((seq, _)) if *seq >= hello.seq => false,
            _ => {
                self.entries.insert(hello.sender, (hello.seq, hello.status_at(received_at)));
                true
            }
        }
    }

    /// Sets a status directly (the server's own entry, or a planning
    /// override).
    pub fn set(&mut self, id: ServerId, status: ResourceStatus) {
        let seq = self.entries.get(&id).map(|e| e.0).unwrap_or(0);
        self.entries.insert(id, (seq, status));
    }

    pub fn status(&self, id: ServerId) -> Option<&ResourceStatus> {
        self.entries.get(&id).map(|(_, s)| s)
    }

    pub fn seq(&self, id: ServerId) -> Option<u32> {
        self.entries.get(&id).map(|(s, _)| *s)
    }

    pub fn avail_compute_pct(&self, id: ServerId) -> u8 {
        self.status(id).map(|s| s.avail_compute_pct).unwrap_or(100)
    }

    pub fn avail_gpu_mem_pct(&self, id: ServerId) -> u8 {
        self.status(id).map(|s| s.avail_gpu_mem_pct).unwrap_or(100)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ServerId, &ResourceStatus)> {
        self.entries.iter().map(|(id, (_, s))| (*id, s))
    }
}

/// Folds received hellos (with their arrival times) into a view.
pub fn neighbor_view<'a>(hellos: impl IntoIterator<Item = (&'a HelloMessage, f64)>) -> NeighborView {
    let mut view = NeighborView::new();
    for (h, t) in hellos {
        view.receive(h, t);
    }
    view
}
