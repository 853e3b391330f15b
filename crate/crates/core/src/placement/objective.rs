use serde::{Deserialize, Serialize};

use super::segment::flows;
use super::types::Placement;
use crate::compression::{BitWidth, QuantPolicy};
use crate::edgenet::{EdgeTopology, NeighborView, ServerId};
use crate::error::{Error, Result};
use crate::model::{CoActivation, ExpertRef, MoeModelSpec, RoutingTrace};
use crate::sim::CostModel;

pub const DEFAULT_LOW_WATER_PCT: u8 = 25;
/// Routing treats availability below 1% as 1%.
const MIN_AVAIL_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveWeights {
    pub alpha_latency: f64,
    /// Seconds per crossing; `None` uses the mean boundary transfer time.
    pub beta_frequency: Option<f64>,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            alpha_latency: 1.0,
            beta_frequency: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementObjective {
    pub expected_latency_s: f64,
    pub expected_cross_transitions: f64,
    pub alpha_latency: f64,
    pub beta_frequency: f64,
}

impl PlacementObjective {
    pub fn value(&self) -> f64 {
        self.alpha_latency * self.expected_latency_s + self.beta_frequency * self.expected_cross_transitions
    }
}

/// Everything placement decisions depend on besides the placement itself.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub spec: &'a MoeModelSpec,
    pub topology: &'a EdgeTopology,
    /// Servers taking part in the deployment, ascending.
    pub participants: &'a [ServerId],
    /// Server where requests enter.
    pub entry: ServerId,
    pub view: &'a NeighborView,
    pub quant: &'a QuantPolicy,
    pub cost: &'a CostModel,
    pub coact: &'a CoActivation<f64>,
    pub weights: ObjectiveWeights,
    pub low_water_pct: u8,
}

impl PlanContext<'_> {
    /// Seconds to move one token's activations from `from` to `to` for an
    /// expert held at `bits`.
    pub fn hop_time(&self, from: ServerId, to: ServerId, bits: BitWidth) -> f64 {
        if from == to {
            return 0.0;
        }
        let bytes = self.cost.token_transfer_bytes(self.spec, bits);
        self.topology.path_transfer_time(bytes, from, to).unwrap_or(f64::INFINITY)
    }

    pub fn expert_time(&self, server: ServerId, e: ExpertRef) -> f64 {
        let spec = self.topology.server(server).expect("participant in topology");
        self.cost.expert_compute_time(self.spec, spec, self.quant.bits_or_full(server, e))
    }

    pub fn shared_time(&self, server: ServerId) -> f64 {
        let spec = self.topology.server(server).expect("participant in topology");
        self.cost.shared_compute_time(self.spec, spec)
    }

    /// Mean full-precision token transfer time over ordered pairs of
    /// distinct participants.
    pub fn mean_boundary_time(&self) -> f64 {
        let p = self.participants;
        let mut sum = 0.0;
        let mut n = 0usize;
        for &a in p {
            for &b in p.iter().filter(|&&b| b != a) {
                sum += self.hop_time(a, b, BitWidth::B16);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn beta(&self) -> f64 {
        self.weights.beta_frequency.unwrap_or_else(|| self.mean_boundary_time())
    }
}

/// Picks the copy of `expert` that serves a token currently at `current`.
///
/// The local copy wins while `current` keeps at least `low_water_pct` of its
/// compute available; otherwise the host minimizing transfer time plus
/// compute time inflated by the host's perceived load is chosen, smallest
/// id on ties.
pub fn route_replica(
    ctx: &PlanContext<'_>,
    expert: ExpertRef,
    placement: &Placement,
    current: ServerId,
    view: &NeighborView,
) -> ServerId {
    let hosts = placement.hosts_of(expert);
    assert!(!hosts.is_empty(), "coverage violated: {expert} is hosted nowhere");
    if hosts.len() == 1 {
        return hosts[0];
    }
    if hosts.contains(&current) && view.avail_compute_pct(current) >= ctx.low_water_pct {
        return current;
    }
    let mut best = (f64::INFINITY, hosts[0]);
    for &h in &hosts {
        let bits = ctx.quant.bits_or_full(h, expert);
        let avail = (view.avail_compute_pct(h) as f64 / 100.0).max(MIN_AVAIL_FRACTION);
        let c = ctx.hop_time(current, h, bits) + ctx.expert_time(h, expert) / avail;
        if c < best.0 {
            best = (c, h);
        }
    }
    best.1
}

/// Analytic per-token objective of `placement`.
///
/// The mass `mu_l(i, s)` of tokens served by expert `i@l` on server `s` is
/// propagated layer by layer through the co-activation kernel, with every
/// next-layer copy chosen by [`route_replica`] from the serving server.
pub fn expected_objective(placement: &Placement, ctx: &PlanContext<'_>) -> Result<PlacementObjective> {
    placement.check_coverage(ctx.spec)?;
    let spec = ctx.spec;
    let (layers, e, k) = (spec.num_layers, spec.experts_per_layer, spec.top_k as f64);
    let servers: Vec<ServerId> = placement.servers().collect();
    let idx = |s: ServerId| servers.binary_search(&s).expect("routed to a hosting server");
    let ns = servers.len();
    let pi = ctx.coact.propagated_marginals();

    // route[l][j][from] for every server a token can be on.
    let route_from = |l: usize, j: usize, from: ServerId| route_replica(ctx, ExpertRef::new(l, j), placement, from, ctx.view);

    let mut mu = vec![0.0; e * ns];
    for i in 0..e {
        mu[i * ns + idx(route_from(0, i, ctx.entry))] += pi[0][i];
    }
    let mut latency = 0.0;
    let mut crossings = 0.0;
    for l in 0..layers {
        for i in 0..e {
            for (si, &s) in servers.iter().enumerate() {
                let m = mu[i * ns + si];
                if m > 0.0 {
                    latency += m * (ctx.shared_time(s) + k * ctx.expert_time(s, ExpertRef::new(l, i)));
                }
            }
        }
        if l + 1 == layers {
            break;
        }
        let routes: Vec<Vec<usize>> = (0..e)
            .map(|j| servers.iter().map(|&s| idx(route_from(l + 1, j, s))).collect())
            .collect();
        let mut next = vec![0.0; e * ns];
        for i in 0..e {
            for si in 0..ns {
                let m = mu[i * ns + si];
                if m == 0.0 {
                    continue;
                }
                for (j, &p) in ctx.coact.row(l, i).iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let to = routes[j][si];
                    let w = m * p;
                    next[j * ns + to] += w;
                    if to != si {
                        crossings += w;
                        let bits = ctx.quant.bits_or_full(servers[to], ExpertRef::new(l + 1, j));
                        latency += w * ctx.hop_time(servers[si], servers[to], bits);
                    }
                }
            }
        }
        mu = next;
    }
    Ok(PlacementObjective {
        expected_latency_s: latency,
        expected_cross_transitions: crossings,
        alpha_latency: ctx.weights.alpha_latency,
        beta_frequency: ctx.beta(),
    })
}

/// Objective of replica-free assignments as unary plus pairwise terms, for
/// cheap move evaluation.
pub(crate) struct UniqueHostEvaluator {
    pub layers: usize,
    pub experts: usize,
    pub servers: Vec<ServerId>,
    /// `unary[flat * S + s]`.
    unary: Vec<f64>,
    /// `flow[l][i * E + j]`.
    flow: Vec<Vec<f64>>,
    /// `edge[(l+1, j) flat][from * S + to]`: cost of one unit of flow into
    /// `j@l+1` hosted on `to` from a token on `from`.
    edge: Vec<Vec<f64>>,
    alpha: f64,
    beta: f64,
}

impl UniqueHostEvaluator {
    pub fn new(ctx: &PlanContext<'_>) -> Self {
        let spec = ctx.spec;
        let (layers, e) = (spec.num_layers, spec.experts_per_layer);
        let servers = ctx.participants.to_vec();
        let ns = servers.len();
        let pi = ctx.coact.propagated_marginals();
        let k = spec.top_k as f64;
        let mut unary = vec![0.0; layers * e * ns];
        let mut edge = vec![vec![0.0; ns * ns]; layers * e];
        for l in 0..layers {
            for i in 0..e {
                let x = ExpertRef::new(l, i);
                for (si, &s) in servers.iter().enumerate() {
                    unary[x.flat(e) * ns + si] = pi[l][i] * (ctx.shared_time(s) + k * ctx.expert_time(s, x));
                    for (fi, &f) in servers.iter().enumerate() {
                        edge[x.flat(e)][fi * ns + si] = if f == s {
                            0.0
                        } else {
                            ctx.hop_time(f, s, ctx.quant.bits_or_full(s, x))
                        };
                    }
                }
            }
        }
        UniqueHostEvaluator {
            layers,
            experts: e,
            servers,
            unary,
            flow: flows(ctx.coact),
            edge,
            alpha: ctx.weights.alpha_latency,
            beta: ctx.beta(),
        }
    }

    fn ns(&self) -> usize {
        self.servers.len()
    }

    fn pair_cost(&self, flat_to: usize, from: usize, to: usize) -> f64 {
        let t = self.edge[flat_to][from * self.ns() + to];
        self.alpha * t + if from != to { self.beta } else { 0.0 }
    }

    /// Objective for `host[flat] = server index`.
    pub fn value(&self, host: &[usize]) -> f64 {
        let (e, ns) = (self.experts, self.ns());
        let mut v: f64 = host.iter().enumerate().map(|(x, &s)| self.alpha * self.unary[x * ns + s]).sum();
        for l in 0..self.layers.saturating_sub(1) {
            for i in 0..e {
                let hi = host[l * e + i];
                for j in 0..e {
                    let w = self.flow[l][i * e + j];
                    if w != 0.0 {
                        let to = (l + 1) * e + j;
                        v += w * self.pair_cost(to, hi, host[to]);
                    }
                }
            }
        }
        v
    }

    /// Change in [`Self::value`] if expert `x` moved to server index `to`.
    pub fn move_delta(&self, host: &[usize], x: usize, to: usize) -> f64 {
        let (e, ns) = (self.experts, self.ns());
        let from = host[x];
        if from == to {
            return 0.0;
        }
        let (l, i) = (x / e, x % e);
        let mut d = self.alpha * (self.unary[x * ns + to] - self.unary[x * ns + from]);
        if l > 0 {
            for p in 0..e {
                let w = self.flow[l - 1][p * e + i];
                if w != 0.0 {
                    let hp = host[(l - 1) * e + p];
                    d += w * (self.pair_cost(x, hp, to) - self.pair_cost(x, hp, from));
                }
            }
        }
        if l + 1 < self.layers {
            for n in 0..e {
                let w = self.flow[l][i * e + n];
                if w != 0.0 {
                    let y = (l + 1) * e + n;
                    let hn = host[y];
                    d += w * (self.pair_cost(y, to, hn) - self.pair_cost(y, from, hn));
                }
            }
        }
        d
    }
}

/// Mean per-token crossing frequency observed when routing `trace` through
/// `placement`: at every layer boundary, the share of (previous, next)
/// selection pairs served by different servers.
pub fn monte_carlo_crossings(placement: &Placement, ctx: &PlanContext<'_>, trace: &RoutingTrace) -> Result<f64> {
    trace.check_against(ctx.spec)?;
    placement.check_coverage(ctx.spec)?;
    if trace.is_empty() {
        return Err(Error::Structural("empty trace".into()));
    }
    let (layers, k) = (ctx.spec.num_layers, ctx.spec.top_k);
    let mut served = vec![0 as ServerId; k];
    let mut prev = vec![0 as ServerId; k];
    let mut total = 0.0;
    for t in 0..trace.token_count() {
        let mut current = ctx.entry;
        for l in 0..layers {
            for (slot, &x) in trace.selections(t, l).iter().enumerate() {
                served[slot] = route_replica(ctx, ExpertRef::new(l, x as usize), placement, current, ctx.view);
            }
            if l > 0 {
                let diff = prev.iter().flat_map(|a| served.iter().map(move |b| (a != b) as u32)).sum::<u32>();
                total += diff as f64 / (k * k) as f64;
            }
            current = served[0];
            prev.copy_from_slice(&served);
        }
    }
    Ok(total / trace.token_count() as f64)
}
