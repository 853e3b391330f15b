use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::popularity::{LayerPrediction, Popularity};
use crate::error::{Error, Result};
use crate::model::ExpertRef;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InFlight {
    pub completion: f64,
    pub bytes: u64,
    pub prefetch: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadCommand {
    pub expert: ExpertRef,
    pub start: f64,
    pub completion: f64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrefetchPlan {
    pub loads: Vec<LoadCommand>,
    pub evictions: Vec<ExpertRef>,
}

impl PrefetchPlan {
    pub fn is_empty(&self) -> bool {
        self.loads.is_empty() && self.evictions.is_empty()
    }
}

/// How an access was served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Hit,
    InFlight,
    Miss,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Access {
    pub stall_s: f64,
    pub kind: AccessKind,
    /// Demand load issued by this access, if any.
    pub load: Option<LoadCommand>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PagingStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    /// Accesses served by a copy that a prefetch brought in.
    pub prefetch_hits: u64,
    pub bytes_loaded: u64,
    pub loads: u64,
    pub prefetch_loads: u64,
    pub evictions: u64,
    pub cancelled_prefetches: u64,
    pub stall_s: f64,
    /// Non-zero stalls, kept for percentiles.
    #[serde(skip)]
    pub stall_samples: Vec<f64>,
}

impl PagingStats {
    pub fn hit_rate(&self) -> f64 {
        if self.accesses == 0 {
            1.0
        } else {
            self.hits as f64 / self.accesses as f64
        }
    }

    pub fn mean_stall(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.stall_s / self.accesses as f64
        }
    }

    /// 95th percentile stall over all accesses.
    pub fn p95_stall(&self) -> f64 {
        percentile_with_zeros(&self.stall_samples, self.accesses, 0.95)
    }

    pub fn merge(&mut self, other: &PagingStats) {
        self.accesses += other.accesses;
        self.hits += other.hits;
        self.misses += other.misses;
        self.prefetch_hits += other.prefetch_hits;
        self.bytes_loaded += other.bytes_loaded;
        self.loads += other.loads;
        self.prefetch_loads += other.prefetch_loads;
        self.evictions += other.evictions;
        self.cancelled_prefetches += other.cancelled_prefetches;
        self.stall_s += other.stall_s;
        self.stall_samples.extend_from_slice(&other.stall_samples);
    }
}

/// Percentile of a population of `total` values whose non-zero members are
/// `nonzero` and the rest are zero.
pub(crate) fn percentile_with_zeros(nonzero: &[f64], total: u64, q: f64) -> f64 {
    if total == 0 || nonzero.is_empty() {
        return 0.0;
    }
    let rank = ((q * total as f64).ceil() as u64).clamp(1, total);
    let zeros = total - nonzero.len() as u64;
    if rank <= zeros {
        return 0.0;
    }
    let mut v = nonzero.to_vec();
    v.sort_by(f64::total_cmp);
    v[(rank - zeros - 1) as usize]
}

/// GPU residency of one device's experts.
///
/// Loads share one serialized I/O channel. Shared weights live outside the
/// budget and are never candidates for eviction.
#[derive(Debug, Clone)]
pub struct ExpertCacheState {
    pub gpu_budget_bytes: u64,
    pub bandwidth: f64,
    /// Experts this device may hold, with their resident sizes.
    sizes: BTreeMap<ExpertRef, u64>,
    resident: BTreeMap<ExpertRef, u64>,
    in_flight: BTreeMap<ExpertRef, InFlight>,
    prefetched: BTreeSet<ExpertRef>,
    /// Access clock per hosted expert, indexed by `layer * width + expert`.
    last_used: Vec<u64>,
    width: usize,
    clock: u64,
    bus_free_at: f64,
    resident_bytes: u64,
    in_flight_bytes: u64,
    pub stats: PagingStats,
}

impl ExpertCacheState {
    pub fn new(gpu_budget_bytes: u64, bandwidth: f64, sizes: BTreeMap<ExpertRef, u64>) -> Result<Self> {
        if !(bandwidth > 0.0) {
            return Err(Error::config("paging.bandwidth", "must be > 0"));
        }
        let width = sizes.keys().map(|x| x.expert() + 1).max().unwrap_or(0);
        let layers = sizes.keys().map(|x| x.layer() + 1).max().unwrap_or(0);
        Ok(ExpertCacheState {
            gpu_budget_bytes,
            bandwidth,
            sizes,
            resident: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            prefetched: BTreeSet::new(),
            last_used: vec![0; layers * width],
            width,
            clock: 0,
            bus_free_at: 0.0,
            resident_bytes: 0,
            in_flight_bytes: 0,
            stats: PagingStats::default(),
        })
    }

    /// Fills the budget with the most popular hosted experts at time zero.
    pub fn warm_fill<T: Scalar>(&mut self, popularity: &Popularity<T>) {
        let mut order: Vec<ExpertRef> = self.sizes.keys().copied().collect();
        order.sort_by(|a, b| {
            popularity
                .score(*b)
                .partial_cmp(&popularity.score(*a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        for x in order {
            let b = self.sizes[&x];
            if self.resident_bytes + self.in_flight_bytes + b <= self.gpu_budget_bytes {
                self.resident.insert(x, b);
                self.resident_bytes += b;
            }
        }
    }

    pub fn hosts(&self, x: ExpertRef) -> bool {
        self.sizes.contains_key(&x)
    }

    pub fn hosted(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        self.sizes.keys().copied()
    }

    pub fn is_resident(&self, x: ExpertRef) -> bool {
        self.resident.contains_key(&x)
    }

    pub fn in_flight(&self, x: ExpertRef) -> Option<InFlight> {
        self.in_flight.get(&x).copied()
    }

    pub fn resident(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        self.resident.keys().copied()
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    pub fn in_flight_bytes(&self) -> u64 {
        self.in_flight_bytes
    }

    pub fn bus_free_at(&self) -> f64 {
        self.bus_free_at
    }

    /// Every hosted expert fits at once, so nothing ever needs paging.
    pub fn holds_everything(&self) -> bool {
        self.resident.len() == self.sizes.len()
    }

    pub fn budget_ok(&self) -> bool {
        self.resident_bytes + self.in_flight_bytes <= self.gpu_budget_bytes
    }

    /// Promotes loads that finished by `now`.
    pub fn advance(&mut self, now: f64) {
        let done: Vec<ExpertRef> = self
            .in_flight
            .iter()
            .filter(|(_, f)| f.completion <= now)
            .map(|(x, _)| *x)
            .collect();
        for x in done {
            let f = self.in_flight.remove(&x).expect("listed above");
            self.in_flight_bytes -= f.bytes;
            self.resident.insert(x, f.bytes);
            self.resident_bytes += f.bytes;
        }
    }

    fn touch(&mut self, x: ExpertRef) {
        self.clock += 1;
        self.last_used[x.layer() * self.width + x.expert()] = self.clock;
    }

    fn free(&self) -> u64 {
        self.gpu_budget_bytes - self.resident_bytes - self.in_flight_bytes
    }

    /// Lowest-popularity, least recently used resident expert that may go.
    fn victim<T: Scalar>(
        &self,
        popularity: &Popularity<T>,
        keep: &dyn Fn(ExpertRef) -> bool,
        below: Option<T>,
    ) -> Option<ExpertRef> {
        self.resident
            .keys()
            .copied()
            .filter(|x| !keep(*x))
            .map(|x| (popularity.score(x), self.last_used[x.layer() * self.width + x.expert()], x))
            .filter(|(s, _, _)| below.is_none_or(|b| *s < b))
            .min_by(|a, b| {
                a.0.partial_cmp(&b.0)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            })
            .map(|(_, _, x)| x)
    }

    fn evict(&mut self, x: ExpertRef) {
        let b = self.resident.remove(&x).expect("evicting a resident expert");
        self.resident_bytes -= b;
        self.prefetched.remove(&x);
        self.stats.evictions += 1;
    }

    fn issue(&mut self, x: ExpertRef, now: f64, prefetch: bool) -> LoadCommand {
        let bytes = self.sizes[&x];
        let start = now.max(self.bus_free_at);
        let completion = start + bytes as f64 / self.bandwidth;
        self.bus_free_at = completion;
        self.stats.loads += 1;
        self.stats.prefetch_loads += prefetch as u64;
        self.stats.bytes_loaded += bytes;
        LoadCommand {
            expert: x,
            start,
            completion,
            bytes,
        }
    }

    /// Queues loads for the ranked predictions while the budget admits them.
    ///
    /// Room is made by evicting resident experts that are less popular than
    /// the candidate, not predicted themselves and not `pinned`; scheduling
    /// stops at the first candidate that cannot be admitted.
    pub fn schedule_prefetch<T: Scalar>(
        &mut self,
        predictions: &[LayerPrediction<T>],
        popularity: &Popularity<T>,
        now: f64,
        pinned: &dyn Fn(ExpertRef) -> bool,
    ) -> Result<PrefetchPlan> {
        self.advance(now);
        let predicted: BTreeSet<ExpertRef> = predictions
            .iter()
            .flat_map(|p| p.ranked.iter().map(move |(e, _)| ExpertRef::new(p.layer, *e)))
            .filter(|x| self.hosts(*x))
            .collect();
        let mut plan = PrefetchPlan::default();
        'outer: for p in predictions {
            for &(e, _) in &p.ranked {
                let x = ExpertRef::new(p.layer, e);
                if !self.hosts(x) || self.resident.contains_key(&x) || self.in_flight.contains_key(&x) {
                    continue;
                }
                let bytes = self.sizes[&x];
                if bytes > self.gpu_budget_bytes {
                    return Err(Error::config(
                        "paging.gpu_budget_bytes",
                        format!("{x} needs {bytes} bytes, the GPU budget is {}", self.gpu_budget_bytes),
                    ));
                }
                let keep = |y: ExpertRef| pinned(y) || predicted.contains(&y);
                let mut victims = Vec::new();
                let mut room = self.free();
                let cutoff = popularity.score(x);
                let mut shadow = self.clone_resident_keys();
                while room < bytes {
                    let v = self
                        .victim(popularity, &|y| keep(y) || !shadow.contains(&y), Some(cutoff));
                    match v {
                        Some(v) => {
                            room += self.resident[&v];
                            shadow.remove(&v);
                            victims.push(v);
                        }
                        None => break 'outer,
                    }
                }
                for v in victims {
                    self.evict(v);
                    plan.evictions.push(v);
                }
                let cmd = self.issue(x, now, true);
                self.in_flight.insert(
                    x,
                    InFlight {
                        completion: cmd.completion,
                        bytes,
                        prefetch: true,
                    },
                );
                self.in_flight_bytes += bytes;
                self.prefetched.insert(x);
                plan.loads.push(cmd);
            }
        }
        debug_assert!(self.budget_ok());
        Ok(plan)
    }

    fn clone_resident_keys(&self) -> BTreeSet<ExpertRef> {
        self.resident.keys().copied().collect()
    }

    /// Serves `x` at `now`, loading it on demand when absent.
    ///
    /// A demand load evicts unpinned residents, then cancels queued
    /// prefetches, to make room; when nothing can give way the weights are
    /// streamed through without being kept.
    pub fn access_expert<T: Scalar>(
        &mut self,
        x: ExpertRef,
        now: f64,
        popularity: &Popularity<T>,
        pinned: &dyn Fn(ExpertRef) -> bool,
    ) -> Access {
        assert!(self.hosts(x), "placement violated: {x} is not placed on this device");
        self.advance(now);
        self.stats.accesses += 1;
        self.touch(x);
        let from_prefetch = self.prefetched.remove(&x);
        if from_prefetch {
            self.stats.prefetch_hits += 1;
        }
        if self.resident.contains_key(&x) {
            self.stats.hits += 1;
            return Access {
                stall_s: 0.0,
                kind: AccessKind::Hit,
                load: None,
            };
        }
        if let Some(f) = self.in_flight.get(&x) {
            let stall = f.completion - now;
            self.record_stall(stall);
            return Access {
                stall_s: stall,
                kind: AccessKind::InFlight,
                load: None,
            };
        }
        self.stats.misses += 1;
        let bytes = self.sizes[&x];
        let keep = |y: ExpertRef| y == x || pinned(y);
        while self.free() < bytes {
            match self.victim(popularity, &keep, None) {
                Some(v) => self.evict(v),
                None => break,
            }
        }
        while self.free() < bytes {
            let cancel = self
                .in_flight
                .iter()
                .filter(|(y, f)| f.prefetch && !pinned(**y))
                .max_by(|a, b| a.1.completion.total_cmp(&b.1.completion).then(a.0.cmp(b.0)))
                .map(|(y, _)| *y);
            match cancel {
                Some(y) => {
                    let f = self.in_flight.remove(&y).expect("listed above");
                    self.in_flight_bytes -= f.bytes;
                    self.prefetched.remove(&y);
                    self.stats.cancelled_prefetches += 1;
                }
                None => break,
            }
        }
        let cmd = self.issue(x, now, false);
        if self.free() >= bytes {
            self.in_flight.insert(
                x,
                InFlight {
                    completion: cmd.completion,
                    bytes,
                    prefetch: false,
                },
            );
            self.in_flight_bytes += bytes;
        }
        let stall = cmd.completion - now;
        self.record_stall(stall);
        debug_assert!(self.budget_ok());
        Access {
            stall_s: stall,
            kind: AccessKind::Miss,
            load: Some(cmd),
        }
    }

    fn record_stall(&mut self, stall: f64) {
        if stall > 0.0 {
            self.stats.stall_s += stall;
            self.stats.stall_samples.push(stall);
        }
    }
}
