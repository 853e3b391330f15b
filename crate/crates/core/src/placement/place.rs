use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{expected_objective, PlanContext, UniqueHostEvaluator};
use super::types::{server_capacities, Placement, Segmentation};
use crate::edgenet::ServerId;
use crate::error::{Error, Result};
use crate::model::ExpertRef;

pub const MAX_LOCAL_SEARCH_MOVES: usize = 1000;
/// Largest `servers ^ experts` search space [`brute_force_place`] accepts.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;
const MAX_SWEEPS: usize = 64;
const EPS: f64 = 1e-15;
const KICKS_SMALL: usize = 24;
const KICKS_LARGE: usize = 4;
const KICK_SWAPS: usize = 3;
const KICK_SEED: u64 = 0x6b69_636b;

/// Byte bookkeeping for replica-free assignments over the participants.
pub(crate) struct Ledger<'c> {
    ctx: &'c PlanContext<'c>,
    pub servers: Vec<ServerId>,
    cap: Vec<u64>,
    shared: Vec<u64>,
    used: Vec<u64>,
    count: Vec<usize>,
}

impl<'c> Ledger<'c> {
    pub fn new(ctx: &'c PlanContext<'c>) -> Self {
        let servers = ctx.participants.to_vec();
        let caps = server_capacities(ctx.topology, &servers, ctx.view);
        let shared_one = ctx.quant.shared_bytes(ctx.spec);
        let shared = servers
            .iter()
            .map(|&s| shared_one * ctx.topology.server(s).map_or(1, |x| x.gpu_count as u64))
            .collect();
        let n = servers.len();
        Ledger {
            ctx,
            cap: servers.iter().map(|s| caps[s]).collect(),
            servers,
            shared,
            used: vec![0; n],
            count: vec![0; n],
        }
    }

    pub fn bytes(&self, s: usize, x: ExpertRef) -> u64 {
        self.ctx.quant.expert_bytes(self.ctx.spec, self.servers[s], x)
    }

    fn room(&self, s: usize) -> u64 {
        self.cap[s].saturating_sub(self.used[s] + self.shared[s])
    }

    fn fits_with(&self, s: usize, add: u64, remove: u64, count_after: usize) -> bool {
        let shared = if count_after > 0 { self.shared[s] } else { 0 };
        self.used[s] + add - remove + shared <= self.cap[s]
    }

    pub fn can_add(&self, s: usize, x: ExpertRef) -> bool {
        self.fits_with(s, self.bytes(s, x), 0, self.count[s] + 1)
    }

    pub fn add(&mut self, s: usize, x: ExpertRef) {
        self.used[s] += self.bytes(s, x);
        self.count[s] += 1;
    }

    pub fn remove(&mut self, s: usize, x: ExpertRef) {
        self.used[s] -= self.bytes(s, x);
        self.count[s] -= 1;
    }

    pub fn reset(&mut self) {
        self.used.iter_mut().for_each(|u| *u = 0);
        self.count.iter_mut().for_each(|c| *c = 0);
    }

    pub fn total_capacity(&self) -> u64 {
        self.cap.iter().sum()
    }
}

fn to_placement(servers: &[ServerId], host: &[usize], e: usize) -> Placement {
    let mut p = Placement::new();
    for (x, &s) in host.iter().enumerate() {
        p.assignment.entry(servers[s]).or_default().insert(ExpertRef::new(x / e, x % e));
    }
    p.sync_shared_hosts();
    p
}

fn model_bytes(ctx: &PlanContext<'_>, ledger: &Ledger<'_>) -> u64 {
    let min_shared = ledger.shared.iter().copied().min().unwrap_or(0);
    let experts: u64 = ctx
        .spec
        .experts()
        .map(|x| (0..ledger.servers.len()).map(|s| ledger.bytes(s, x)).min().unwrap_or(0))
        .sum();
    experts + min_shared
}

/// Assigns sub-models to servers and improves the result by local search.
///
/// Sub-models go, largest first, to the server furthest below its share of
/// expert bytes (shares follow available GPU memory) and are split expert by
/// expert when no server can take one whole. Single-expert moves and
/// swaps within or across adjacent layers are then applied on first
/// improvement. The same search also starts from every single-server
/// consolidation that fits, the best result is then kicked by a few seeded
/// random swaps and re-searched, and the final result keeps the segmentation's replica copies that strictly lower
/// the objective, in the order they were ranked.
pub fn place(seg: &Segmentation, ctx: &PlanContext<'_>) -> Result<Placement> {
    ctx.spec.validate()?;
    ctx.coact.check_against(ctx.spec)?;
    if ctx.participants.is_empty() {
        return Err(Error::config("participants", "at least one server is required"));
    }
    for &s in ctx.participants {
        if ctx.topology.server(s).is_none() {
            return Err(Error::config("participants", format!("server {s} is not in the topology")));
        }
    }
    let e = ctx.spec.experts_per_layer;
    let n = ctx.spec.num_experts();
    let mut ledger = Ledger::new(ctx);
    let need = model_bytes(ctx, &ledger);
    let have = ledger.total_capacity();
    if have < need {
        return Err(Error::infeasible(
            format!("aggregate capacity {have} bytes is below the {need}-byte model"),
            need - have,
        ));
    }
    let ns = ledger.servers.len();
    let eval = UniqueHostEvaluator::new(ctx);

    let mut starts: Vec<Vec<usize>> = Vec::new();
    starts.push(greedy_start(seg, ctx, &mut ledger)?);
    for s in 0..ns {
        ledger.reset();
        if ctx.spec.experts().all(|x| {
            let ok = ledger.can_add(s, x);
            ledger.add(s, x);
            ok
        }) {
            starts.push(vec![s; n]);
        }
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for mut host in starts {
        ledger.reset();
        for (x, &s) in host.iter().enumerate() {
            ledger.add(s, ExpertRef::new(x / e, x % e));
        }
        local_search(&eval, &mut ledger, &mut host, e);
        let v = eval.value(&host);
        if best.as_ref().is_none_or(|(b, _)| v < *b - EPS) {
            best = Some((v, host));
        }
    }
    let (mut best_v, mut host) = best.expect("greedy start always exists");
    if ns > 1 {
        let kicks = if n <= 256 { KICKS_SMALL } else { KICKS_LARGE };
        let mut rng = ChaCha8Rng::seed_from_u64(KICK_SEED);
        for _ in 0..kicks {
            let mut trial = host.clone();
            ledger.reset();
            for (x, &s) in trial.iter().enumerate() {
                ledger.add(s, ExpertRef::new(x / e, x % e));
            }
            for _ in 0..KICK_SWAPS {
                random_swap(&mut ledger, &mut trial, e, &mut rng);
            }
            local_search(&eval, &mut ledger, &mut trial, e);
            let v = eval.value(&trial);
            if v < best_v - EPS {
                best_v = v;
                host = trial;
            }
        }
    }

    let mut placement = to_placement(&ledger.servers, &host, e);
    ledger.reset();
    for (x, &s) in host.iter().enumerate() {
        ledger.add(s, ExpertRef::new(x / e, x % e));
    }
    if !seg.replicas.is_empty() {
        let owners = submodel_owners(seg, &placement, ctx.participants);
        let mut current = expected_objective(&placement, ctx)?.value();
        for r in &seg.replicas {
            let target = owners[r.submodel];
            let s = ledger.servers.iter().position(|&x| x == target).expect("participant");
            if placement.hosts(target, r.expert) || !ledger.can_add(s, r.expert) {
                continue;
            }
            placement.assignment.entry(target).or_default().insert(r.expert);
            placement.sync_shared_hosts();
            let v = expected_objective(&placement, ctx)?.value();
            if v < current - EPS {
                current = v;
                ledger.add(s, r.expert);
            } else {
                placement.assignment.get_mut(&target).expect("just inserted").remove(&r.expert);
                placement.sync_shared_hosts();
            }
        }
    }
    Ok(placement)
}

/// Server holding the most base experts of each sub-model.
fn submodel_owners(seg: &Segmentation, placement: &Placement, participants: &[ServerId]) -> Vec<ServerId> {
    (0..seg.submodels.len())
        .map(|m| {
            let base = seg.base(m);
            let mut best = (0usize, participants[0]);
            for &s in participants {
                let c = base.experts().filter(|x| placement.hosts(s, *x)).count();
                if c > best.0 {
                    best = (c, s);
                }
            }
            best.1
        })
        .collect()
}

fn greedy_start(seg: &Segmentation, ctx: &PlanContext<'_>, ledger: &mut Ledger<'_>) -> Result<Vec<usize>> {
    let e = ctx.spec.experts_per_layer;
    let ns = ledger.servers.len();
    ledger.reset();
    let weight: Vec<f64> = ledger
        .servers
        .iter()
        .map(|&s| {
            let spec = ctx.topology.server(s).expect("participant");
            spec.gpu_mem_bytes as f64 * ctx.view.avail_gpu_mem_pct(s) as f64 / 100.0
        })
        .collect();
    let wsum: f64 = weight.iter().sum();
    let total: f64 = ctx.spec.experts().map(|x| ledger.bytes(0, x) as f64).sum();
    let target: Vec<f64> = weight
        .iter()
        .map(|w| if wsum > 0.0 { total * w / wsum } else { total / ns as f64 })
        .collect();

    let mut host = vec![usize::MAX; ctx.spec.num_experts()];
    let mut order: Vec<(u64, usize)> = (0..seg.submodels.len())
        .map(|m| (seg.base(m).experts().map(|x| ledger.bytes(0, x)).sum(), m))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut assigned = vec![0.0; ns];
    for (_, m) in order {
        let experts: Vec<ExpertRef> = seg.base(m).experts().filter(|x| host[x.flat(e)] == usize::MAX).collect();
        let whole = |s: usize, l: &Ledger<'_>| -> bool {
            let bytes: u64 = experts.iter().map(|x| l.bytes(s, *x)).sum();
            l.used[s] + bytes + l.shared[s] <= l.cap[s]
        };
        let pick = (0..ns)
            .filter(|&s| whole(s, ledger))
            .max_by(|&a, &b| (target[a] - assigned[a]).total_cmp(&(target[b] - assigned[b])).then(b.cmp(&a)));
        for x in experts {
            let s = match pick {
                Some(s) => s,
                None => (0..ns)
                    .filter(|&s| ledger.can_add(s, x))
                    .max_by(|&a, &b| ledger.room(a).cmp(&ledger.room(b)).then(b.cmp(&a)))
                    .ok_or_else(|| {
                        Error::infeasible(
                            format!("no server has room for {x} while splitting sub-model {m}"),
                            ledger.bytes(0, x),
                        )
                    })?,
            };
            ledger.add(s, x);
            assigned[s] += ledger.bytes(s, x) as f64;
            host[x.flat(e)] = s;
        }
    }
    debug_assert!(host.iter().all(|&s| s != usize::MAX));
    Ok(host)
}

/// Exchanges two experts on different servers when both still fit.
fn random_swap(ledger: &mut Ledger<'_>, host: &mut [usize], e: usize, rng: &mut ChaCha8Rng) {
    let xref = |x: usize| ExpertRef::new(x / e, x % e);
    for _ in 0..16 {
        let a = rng.random_range(0..host.len());
        let b = rng.random_range(0..host.len());
        let (sa, sb) = (host[a], host[b]);
        if sa == sb {
            continue;
        }
        let (ba_old, ba_new) = (ledger.bytes(sa, xref(a)), ledger.bytes(sa, xref(b)));
        let (bb_old, bb_new) = (ledger.bytes(sb, xref(b)), ledger.bytes(sb, xref(a)));
        if ledger.fits_with(sa, ba_new, ba_old, ledger.count[sa]) && ledger.fits_with(sb, bb_new, bb_old, ledger.count[sb]) {
            ledger.remove(sa, xref(a));
            ledger.remove(sb, xref(b));
            ledger.add(sa, xref(b));
            ledger.add(sb, xref(a));
            host.swap(a, b);
            return;
        }
    }
}

/// First-improvement moves and adjacent-layer swaps, at most
/// [`MAX_LOCAL_SEARCH_MOVES`] applied changes.
fn local_search(eval: &UniqueHostEvaluator, ledger: &mut Ledger<'_>, host: &mut [usize], e: usize) {
    let ns = ledger.servers.len();
    if ns < 2 {
        return;
    }
    let layers = host.len() / e;
    let xref = |x: usize| ExpertRef::new(x / e, x % e);
    let mut applied = 0;
    for _ in 0..MAX_SWEEPS {
        let mut improved = false;
        for x in 0..host.len() {
            let from = host[x];
            for to in (0..ns).filter(|&t| t != from) {
                if !ledger.can_add(to, xref(x)) {
                    continue;
                }
                if eval.move_delta(host, x, to) < -EPS {
                    ledger.remove(from, xref(x));
                    ledger.add(to, xref(x));
                    host[x] = to;
                    applied += 1;
                    improved = true;
                    break;
                }
            }
            if applied >= MAX_LOCAL_SEARCH_MOVES {
                return;
            }
        }
        for l in 0..layers {
            let end = ((l + 2) * e).min(host.len());
            for a in l * e..(l + 1) * e {
                for b in a + 1..end {
                    let (sa, sb) = (host[a], host[b]);
                    if sa == sb {
                        continue;
                    }
                    let (ba_old, ba_new) = (ledger.bytes(sa, xref(a)), ledger.bytes(sa, xref(b)));
                    let (bb_old, bb_new) = (ledger.bytes(sb, xref(b)), ledger.bytes(sb, xref(a)));
                    if !ledger.fits_with(sa, ba_new, ba_old, ledger.count[sa])
                        || !ledger.fits_with(sb, bb_new, bb_old, ledger.count[sb])
                    {
                        continue;
                    }
                    let d1 = eval.move_delta(host, a, sb);
                    host[a] = sb;
                    let d2 = eval.move_delta(host, b, sa);
                    if d1 + d2 < -EPS {
                        host[b] = sa;
                        ledger.remove(sa, xref(a));
                        ledger.remove(sb, xref(b));
                        ledger.add(sa, xref(b));
                        ledger.add(sb, xref(a));
                        applied += 1;
                        improved = true;
                        if applied >= MAX_LOCAL_SEARCH_MOVES {
                            return;
                        }
                    } else {
                        host[a] = sa;
                    }
                }
            }
        }
        if !improved {
            return;
        }
    }
}

/// Exact minimizer over every replica-free assignment of experts to
/// participants.
pub fn brute_force_place(ctx: &PlanContext<'_>) -> Result<Placement> {
    ctx.spec.validate()?;
    let e = ctx.spec.experts_per_layer;
    let n = ctx.spec.num_experts();
    let ns = ctx.participants.len();
    if ns == 0 {
        return Err(Error::config("participants", "at least one server is required"));
    }
    let assignments = (ns as f64).powi(n as i32);
    if assignments > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeGuard { assignments, limit: BRUTE_FORCE_LIMIT });
    }
    let mut ledger = Ledger::new(ctx);
    let eval = UniqueHostEvaluator::new(ctx);
    let mut host = vec![0usize; n];
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        ledger.reset();
        let mut feasible = true;
        for (x, &s) in host.iter().enumerate() {
            let r = ExpertRef::new(x / e, x % e);
            if !ledger.can_add(s, r) {
                feasible = false;
                break;
            }
            ledger.add(s, r);
        }
        if feasible {
            let v = eval.value(&host);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, host.clone()));
            }
        }
        // Mixed-radix increment.
        let mut i = 0;
        while i < n {
            host[i] += 1;
            if host[i] < ns {
                break;
            }
            host[i] = 0;
            i += 1;
        }
        if i == n {
            break;
        }
    }
    match best {
        Some((_, host)) => Ok(to_placement(ctx.participants, &host, e)),
        None => {
            ledger.reset();
            let need = model_bytes(ctx, &ledger);
            Err(Error::infeasible(
                "no assignment of experts to servers fits the capacities",
                need.saturating_sub(ledger.total_capacity()),
            ))
        }
    }
}

/// Expert bytes each participant holds.
pub fn assigned_bytes(placement: &Placement, ctx: &PlanContext<'_>) -> BTreeMap<ServerId, u64> {
    placement
        .assignment
        .keys()
        .map(|&s| (s, ctx.quant.server_expert_bytes(ctx.spec, placement, s)))
        .collect()
}
