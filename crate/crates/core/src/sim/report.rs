use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compression::QualityLedger;
use crate::edgenet::ServerId;
use crate::paging::{percentile_with_zeros, PagingStats};

/// Where a stretch of latency went along the critical path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyParts {
    pub compute_s: f64,
    pub stall_s: f64,
    pub transfer_s: f64,
    pub queue_s: f64,
}

impl LatencyParts {
    pub fn total(&self) -> f64 {
        self.compute_s + self.stall_s + self.transfer_s + self.queue_s
    }

    pub fn add(&mut self, o: &LatencyParts) {
        self.compute_s += o.compute_s;
        self.stall_s += o.stall_s;
        self.transfer_s += o.transfer_s;
        self.queue_s += o.queue_s;
    }
}

/// One output token's decode pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub request: usize,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub parts: LatencyParts,
}

impl TokenRecord {
    pub fn latency(&self) -> f64 {
        self.end_s - self.start_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub arrival_s: f64,
    pub prefill_end_s: f64,
    pub completion_s: f64,
    pub prefill_parts: LatencyParts,
}

impl RequestRecord {
    pub fn latency(&self) -> f64 {
        self.completion_s - self.arrival_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub cross_server_transfers: u64,
    pub cross_server_bytes: f64,
    pub intra_server_transfers: u64,
    pub intra_server_bytes: f64,
    /// Mean per decode token, summed over layer boundaries, of the share of
    /// consecutive-layer selection pairs served by different servers.
    pub crossing_frequency: f64,
    pub hello_messages: u64,
    pub hello_bytes: u64,
    pub advert_bytes: u64,
    pub migration_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PagingSummary {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub prefetch_hits: u64,
    pub hit_rate: f64,
    pub bytes_loaded: u64,
    pub evictions: u64,
    pub stall_s: f64,
    pub mean_stall_s: f64,
    pub p95_stall_s: f64,
    pub mean_stall_per_token_s: f64,
}

impl PagingSummary {
    pub fn from_stats(s: &PagingStats, tokens: u64) -> Self {
        PagingSummary {
            accesses: s.accesses,
            hits: s.hits,
            misses: s.misses,
            prefetch_hits: s.prefetch_hits,
            hit_rate: s.hit_rate(),
            bytes_loaded: s.bytes_loaded,
            evictions: s.evictions,
            stall_s: s.stall_s,
            mean_stall_s: s.mean_stall(),
            p95_stall_s: percentile_with_zeros(&s.stall_samples, s.accesses, 0.95),
            mean_stall_per_token_s: if tokens == 0 { 0.0 } else { s.stall_s / tokens as f64 },
        }
    }
}

/// Summary of one simulation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub requests: usize,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub makespan_s: f64,
    pub avg_generation_throughput: f64,
    pub avg_latency_s: f64,
    pub p95_latency_s: f64,
    pub avg_token_latency_s: f64,
    pub traffic: TrafficStats,
    pub paging: PagingSummary,
    pub quality_score: f64,
    pub quality: QualityLedger,
    pub peak_resident_bytes: BTreeMap<ServerId, u64>,
    pub expert_compute_s: f64,
    pub replans: u64,
    pub replan_failures: u64,
    pub events_processed: u64,
    pub event_counts: BTreeMap<String, u64>,
    pub budget_checks: u64,
    pub budget_violations: u64,
    #[serde(skip)]
    pub request_records: Vec<RequestRecord>,
    #[serde(skip)]
    pub token_records: Vec<TokenRecord>,
}

impl SimReport {
    /// Output tokens completed in each whole second of simulated time.
    pub fn throughput_series(&self) -> Vec<(u64, u64)> {
        let mut bins: BTreeMap<u64, u64> = BTreeMap::new();
        for t in &self.token_records {
            *bins.entry(t.end_s.floor() as u64).or_default() += 1;
        }
        let last = bins.keys().next_back().copied().unwrap_or(0);
        (0..=last).filter(|_| !bins.is_empty()).map(|s| (s, bins.get(&s).copied().unwrap_or(0))).collect()
    }
}

pub(crate) fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub(crate) fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}
