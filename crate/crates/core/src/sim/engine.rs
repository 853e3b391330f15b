use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::event::{EventKind, EventQueue, Payload};
use super::replan::{check_replan, migration_moves, ResourceSnapshot, ReplanTriggerConfig, UpgradeSource};
use super::report::{mean, percentile, LatencyParts, PagingSummary, RequestRecord, SimReport, TokenRecord, TrafficStats};
use super::CostModel;
use crate::compression::{fuse_tokens, prune_tokens, quality_score, BitWidth, FusionConfig, PruneConfig, QualityLedger, QuantPolicy};
use crate::edgenet::{
    decode_hello, EdgeTopology, NeighborView, PerceptionAgent, PerceptionConfig, ResourceStatus, ServerId,
    HELLO_LEN, MODEL_ADVERT_BYTES,
};
use crate::error::{Error, Result};
use crate::model::{ActivationSynth, CoActivation, ExpertRef, MoeModelSpec, RoutingTrace};
use crate::paging::{predict_ahead, ExpertCacheState, PagingConfig, PagingStats, Popularity};
use crate::placement::{device_expert_budget, route_replica, Placement, PlanContext};
use crate::plan::{plan_deployment, PlanConfig, PlanInputs, QuantizationConfig};

/// A change of the load a server sees from outside this deployment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceEvent {
    pub time_s: f64,
    pub server: ServerId,
    pub avail_compute_pct: u8,
    pub avail_gpu_mem_pct: u8,
}

/// Everything a run needs besides the trace.
#[derive(Debug, Clone)]
pub struct SimSetup<'a> {
    pub spec: &'a MoeModelSpec,
    pub topology: &'a EdgeTopology,
    pub participants: &'a [ServerId],
    pub entry: ServerId,
    pub placement: Placement,
    pub quant: QuantPolicy,
    /// Kernel used for prediction and replanning.
    pub coact: &'a CoActivation<f64>,
    pub popularity: Popularity<f64>,
    pub cost: &'a CostModel,
    pub paging: &'a PagingConfig,
    pub fusion: &'a FusionConfig,
    pub prune: &'a PruneConfig,
    pub perception: &'a PerceptionConfig,
    pub replan: &'a ReplanTriggerConfig,
    pub plan: &'a PlanConfig,
    pub quantization: &'a QuantizationConfig,
    pub resource_events: &'a [ResourceEvent],
    /// Fixed spacing of request arrivals; `None` admits each request when
    /// the previous one completes.
    pub arrival_interval_s: Option<f64>,
    pub record_events: bool,
}

/// One processed event, for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventRecord {
    pub time_s: f64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub request: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub server: Option<ServerId>,
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: SimReport,
    pub events: Vec<EventRecord>,
}

struct Channel {
    bandwidth: f64,
    latency: f64,
    busy_until: f64,
}

struct Device {
    server: ServerId,
    busy_until: f64,
}

struct PlanRt {
    placement: Placement,
    quant: QuantPolicy,
    /// Hosting servers per flat expert index.
    hosts: Vec<Vec<ServerId>>,
    /// `(server, flat expert) -> device`.
    device_of: HashMap<(ServerId, usize), usize>,
    caches: Vec<Option<ExpertCacheState>>,
    /// Pin counts per device, indexed by flat expert id.
    pinned: Vec<Vec<u32>>,
    peak: Vec<u64>,
}

#[derive(Default, Clone)]
struct Slot {
    origin: usize,
    device: usize,
    work: Vec<(ExpertRef, u32)>,
    bytes: f64,
    ret_to: usize,
    path: Vec<usize>,
    hop: usize,
    returning: bool,
    parts: LatencyParts,
    end: f64,
}

#[derive(Default)]
struct Job {
    prefill: bool,
    tokens: (usize, usize),
    layer: usize,
    device: usize,
    next_device: usize,
    /// Devices running the shared part of the layer and their token ranges.
    shards: Vec<(usize, (usize, usize))>,
    shard_parts: Vec<(f64, LatencyParts)>,
    shards_pending: usize,
    slots: Vec<Slot>,
    pending: usize,
    pass_start: f64,
    pass_parts: LatencyParts,
    served_prev: Vec<ServerId>,
    served_cur: Vec<ServerId>,
}

struct Request {
    offset: usize,
    input_len: usize,
    output_len: usize,
    arrival: f64,
    plan: usize,
    prefill_end: f64,
    prefill_parts: LatencyParts,
    next_out: usize,
    completion: Option<f64>,
    job: Job,
}

struct Engine<'a> {
    s: SimSetup<'a>,
    trace: &'a RoutingTrace,
    queue: EventQueue,
    channels: Vec<Channel>,
    /// `(link index, forward?)` and `(server, from pool, to pool)` to channel.
    link_channel: HashMap<(usize, bool), usize>,
    bus_channel: HashMap<(ServerId, usize, usize), usize>,
    cloud_channel: Option<usize>,
    paths: HashMap<(usize, usize), Vec<usize>>,
    devices: Vec<Device>,
    server_devices: BTreeMap<ServerId, Vec<usize>>,
    plans: Vec<PlanRt>,
    active_plan: usize,
    requests: Vec<Request>,
    remaining: usize,
    status: BTreeMap<ServerId, (u8, u8)>,
    next_resource_event: usize,
    resource_events: Vec<ResourceEvent>,
    agents: Vec<PerceptionAgent>,
    views: BTreeMap<ServerId, NeighborView>,
    popularity: Popularity<f64>,
    baseline_popularity: Popularity<f64>,
    snapshot_at_plan: ResourceSnapshot,
    quality: QualityLedger,
    synth: Option<ActivationSynth<f64>>,
    traffic: TrafficStats,
    crossings: f64,
    token_records: Vec<TokenRecord>,
    expert_compute_s: f64,
    replans: u64,
    replan_failures: u64,
    events_processed: u64,
    event_counts: BTreeMap<String, u64>,
    budget_checks: u64,
    budget_violations: u64,
    retired_paging: PagingStats,
    log: Vec<EventRecord>,
    now: f64,
}

/// Runs `trace` through the deployment described by `setup`.
pub fn simulate(setup: SimSetup<'_>, trace: &RoutingTrace) -> Result<SimOutcome> {
    trace.check_against(setup.spec)?;
    setup.cost.validate()?;
    setup.paging.validate()?;
    setup.perception.validate()?;
    setup.fusion.validate()?;
    setup.prune.validate()?;
    if setup.replan.enabled {
        setup.replan.validate()?;
    }
    if let Some(i) = setup.arrival_interval_s {
        if !(i >= 0.0) {
            return Err(Error::config("sim.arrival_interval_s", "must be >= 0"));
        }
    }
    if !setup.participants.contains(&setup.entry) {
        return Err(Error::config("entry_server", format!("server {} does not take part", setup.entry)));
    }
    setup.placement.check_coverage(setup.spec)?;
    let mut engine = Engine::new(setup, trace)?;
    engine.run()?;
    Ok(engine.finish())
}

impl<'a> Engine<'a> {
    fn new(s: SimSetup<'a>, trace: &'a RoutingTrace) -> Result<Self> {
        let mut channels = Vec::new();
        let mut link_channel = HashMap::new();
        for (i, l) in s.topology.links.iter().enumerate() {
            for fwd in [true, false] {
                link_channel.insert((i, fwd), channels.len());
                channels.push(Channel {
                    bandwidth: l.bandwidth,
                    latency: l.propagation_latency,
                    busy_until: 0.0,
                });
            }
        }
        let mut devices = Vec::new();
        let mut server_devices = BTreeMap::new();
        let mut bus_channel = HashMap::new();
        for &id in s.participants {
            let spec = s
                .topology
                .server(id)
                .ok_or_else(|| Error::config("participants", format!("server {id} is not in the topology")))?;
            let g = spec.gpu_count as usize;
            let ids: Vec<usize> = (0..g).map(|p| devices.len() + p).collect();
            for _ in 0..g {
                devices.push(Device {
                    server: id,
                    busy_until: 0.0,
                });
            }
            for a in 0..g {
                for b in (0..g).filter(|&b| b != a) {
                    bus_channel.insert((id, a, b), channels.len());
                    channels.push(Channel {
                        bandwidth: spec.intra_bus_bandwidth,
                        latency: spec.intra_bus_latency_s,
                        busy_until: 0.0,
                    });
                }
            }
            server_devices.insert(id, ids);
        }
        let cloud_channel = s.topology.cloud_link.as_ref().map(|c| {
            channels.push(Channel {
                bandwidth: c.bandwidth,
                latency: c.propagation_latency,
                busy_until: 0.0,
            });
            channels.len() - 1
        });

        let mut resource_events = s.resource_events.to_vec();
        resource_events.sort_by(|a, b| a.time_s.total_cmp(&b.time_s));
        let status = s.participants.iter().map(|&id| (id, (100, 100))).collect();
        let agents = s.participants.iter().map(|&id| PerceptionAgent::new(id)).collect();
        let views = s.participants.iter().map(|&id| (id, NeighborView::new())).collect();

        let offsets = trace.request_offsets();
        let requests = trace
            .requests
            .iter()
            .zip(offsets)
            .map(|(r, offset)| Request {
                offset,
                input_len: r.input_len,
                output_len: r.output_len,
                arrival: 0.0,
                plan: 0,
                prefill_end: 0.0,
                prefill_parts: LatencyParts::default(),
                next_out: 0,
                completion: None,
                job: Job::default(),
            })
            .collect::<Vec<_>>();
        let synth = s.fusion.enabled.then(|| ActivationSynth::for_trace(trace, s.spec, s.fusion.activation_noise));
        let quality = QualityLedger::new((s.spec.num_layers * s.spec.top_k) as u64);
        let popularity = s.popularity.clone();
        let mut engine = Engine {
            remaining: requests.len(),
            requests,
            trace,
            queue: EventQueue::default(),
            channels,
            link_channel,
            bus_channel,
            cloud_channel,
            paths: HashMap::new(),
            devices,
            server_devices,
            plans: Vec::new(),
            active_plan: 0,
            status,
            next_resource_event: 0,
            resource_events,
            agents,
            views,
            baseline_popularity: popularity.clone(),
            popularity,
            snapshot_at_plan: ResourceSnapshot::new(),
            quality,
            synth,
            traffic: TrafficStats::default(),
            crossings: 0.0,
            token_records: Vec::new(),
            expert_compute_s: 0.0,
            replans: 0,
            replan_failures: 0,
            events_processed: 0,
            event_counts: BTreeMap::new(),
            budget_checks: 0,
            budget_violations: 0,
            retired_paging: PagingStats::default(),
            log: Vec::new(),
            now: 0.0,
            s,
        };
        engine.apply_resource_events(0.0);
        engine.snapshot_at_plan = engine.advertised();
        let (placement, quant) = (engine.s.placement.clone(), engine.s.quant.clone());
        let rt = engine.build_plan(placement, quant)?;
        engine.plans.push(rt);
        Ok(engine)
    }

    fn build_plan(&self, placement: Placement, quant: QuantPolicy) -> Result<PlanRt> {
        let spec = self.s.spec;
        let e = spec.experts_per_layer;
        let mut hosts = vec![Vec::new(); spec.num_experts()];
        let mut device_of = HashMap::new();
        let mut sizes: Vec<BTreeMap<ExpertRef, u64>> = vec![BTreeMap::new(); self.devices.len()];
        for (&server, set) in &placement.assignment {
            let Some(devs) = self.server_devices.get(&server) else {
                return Err(Error::Structural(format!("placement uses server {server}, which does not take part")));
            };
            let mut rank = vec![0usize; spec.num_layers];
            for &x in set {
                hosts[x.flat(e)].push(server);
                let d = devs[rank[x.layer()] % devs.len()];
                rank[x.layer()] += 1;
                device_of.insert((server, x.flat(e)), d);
                sizes[d].insert(x, quant.expert_bytes(spec, server, x));
            }
        }
        let shared = quant.shared_bytes(spec);
        let mut caches = Vec::with_capacity(self.devices.len());
        for (d, sz) in sizes.into_iter().enumerate() {
            if sz.is_empty() {
                caches.push(None);
                continue;
            }
            let server = self.devices[d].server;
            let sspec = self.s.topology.server(server).expect("participant");
            let budget = device_expert_budget(sspec, self.status[&server].1, shared, self.s.paging.gpu_reserve_fraction);
            let largest = sz.values().copied().max().unwrap_or(0);
            let total: u64 = sz.values().sum();
            if total > budget && largest > budget {
                return Err(Error::config(
                    "paging.gpu_reserve_fraction",
                    format!("GPU {d} of server {server} has {budget} bytes for experts, one expert needs {largest}"),
                ));
            }
            let mut cache = ExpertCacheState::new(budget, sspec.intra_bus_bandwidth, sz)?;
            cache.warm_fill(&self.popularity);
            caches.push(Some(cache));
        }
        let n = self.devices.len();
        Ok(PlanRt {
            placement,
            quant,
            hosts,
            device_of,
            caches,
            pinned: vec![vec![0; spec.num_experts()]; n],
            peak: vec![0; n],
        })
    }

    fn advertised(&self) -> ResourceSnapshot {
        self.agents
            .iter()
            .map(|a| {
                let st = a.last().map_or(self.status[&a.sender], |s| (s.avail_compute_pct, s.avail_gpu_mem_pct));
                (a.sender, st)
            })
            .collect()
    }

    fn apply_resource_events(&mut self, now: f64) {
        while let Some(ev) = self.resource_events.get(self.next_resource_event) {
            if ev.time_s > now {
                break;
            }
            if self.status.contains_key(&ev.server) {
                self.status.insert(ev.server, (ev.avail_compute_pct.min(100), ev.avail_gpu_mem_pct.min(100)));
            }
            self.next_resource_event += 1;
        }
    }

    fn run(&mut self) -> Result<()> {
        match self.s.arrival_interval_s {
            Some(dt) => {
                for r in 0..self.requests.len() {
                    self.queue.push(r as f64 * dt, EventKind::RequestArrival, Payload::Arrival { req: r });
                }
            }
            None if !self.requests.is_empty() => {
                self.queue.push(0.0, EventKind::RequestArrival, Payload::Arrival { req: 0 });
            }
            None => {}
        }
        for i in 0..self.s.participants.len() {
            self.queue.push(0.0, EventKind::HelloTick, Payload::Hello { server: i });
        }
        if self.s.replan.enabled {
            self.queue.push(self.s.replan.check_period_s, EventKind::ReplanCheck, Payload::Replan);
        }
        self.traffic.advert_bytes += self.advert_bytes();

        while let Some(ev) = self.queue.pop() {
            self.now = ev.time;
            self.apply_resource_events(ev.time);
            self.events_processed += 1;
            *self.event_counts.entry(format!("{:?}", ev.kind)).or_default() += 1;
            if self.s.record_events {
                self.log.push(self.record(ev.time, ev.kind, ev.payload));
            }
            match ev.payload {
                Payload::Arrival { req } => self.on_arrival(req, ev.time)?,
                Payload::Shared { req } => self.on_shared(req, ev.time)?,
                Payload::Hop { req, slot } => self.on_hop(req, slot, ev.time),
                Payload::Load { req, slot } => self.start_expert_compute(req, slot, ev.time),
                Payload::Expert { req, slot } => self.on_expert(req, slot, ev.time),
                Payload::Layer { req } => self.on_layer(req, ev.time)?,
                Payload::Hello { server } => self.on_hello(server, ev.time)?,
                Payload::Replan => self.on_replan_check(ev.time),
                Payload::Migration { plan } => self.active_plan = plan,
            }
            self.check_budgets();
        }
        if self.remaining > 0 {
            return Err(Error::Structural(format!("{} requests never completed", self.remaining)));
        }
        Ok(())
    }

    fn advert_bytes(&self) -> u64 {
        let links: usize = self.s.participants.iter().map(|&id| self.s.topology.neighbors(id).len()).sum();
        MODEL_ADVERT_BYTES * links as u64
    }

    fn record(&self, time_s: f64, kind: EventKind, p: Payload) -> EventRecord {
        let (request, slot, server) = match p {
            Payload::Arrival { req } | Payload::Shared { req } | Payload::Layer { req } => (Some(req), None, None),
            Payload::Hop { req, slot } | Payload::Load { req, slot } | Payload::Expert { req, slot } => {
                (Some(req), Some(slot), None)
            }
            Payload::Hello { server } => (None, None, Some(self.s.participants[server])),
            Payload::Replan | Payload::Migration { .. } => (None, None, None),
        };
        EventRecord {
            time_s,
            kind,
            request,
            slot,
            server,
        }
    }

    fn check_budgets(&mut self) {
        self.budget_checks += 1;
        for plan in &mut self.plans {
            for (d, c) in plan.caches.iter().enumerate() {
                if let Some(c) = c {
                    if !c.budget_ok() {
                        self.budget_violations += 1;
                    }
                    plan.peak[d] = plan.peak[d].max(c.resident_bytes() + c.in_flight_bytes());
                }
            }
        }
    }

    fn entry_device(&self) -> usize {
        self.server_devices[&self.s.entry][0]
    }

    fn avail_fraction(&self, server: ServerId) -> f64 {
        (self.status[&server].0 as f64 / 100.0).max(0.01)
    }

    /// Reserves `work` seconds of full-rate compute on `d` from `now`.
    fn compute(&mut self, d: usize, work: f64, now: f64) -> (f64, f64) {
        let service = work / self.avail_fraction(self.devices[d].server);
        let dev = &mut self.devices[d];
        let start = now.max(dev.busy_until);
        dev.busy_until = start + service;
        (start, dev.busy_until)
    }

    fn path(&mut self, from: usize, to: usize) -> Vec<usize> {
        if let Some(p) = self.paths.get(&(from, to)) {
            return p.clone();
        }
        let (a, b) = (self.devices[from].server, self.devices[to].server);
        let p = if a == b {
            let devs = &self.server_devices[&a];
            let pa = devs.iter().position(|&x| x == from).expect("device of server");
            let pb = devs.iter().position(|&x| x == to).expect("device of server");
            vec![self.bus_channel[&(a, pa, pb)]]
        } else {
            self.s
                .topology
                .route(a, b)
                .expect("validated topology is connected")
                .iter()
                .map(|h| self.link_channel[&(h.link, self.s.topology.links[h.link].endpoints[0] == h.from)])
                .collect()
        };
        self.paths.insert((from, to), p.clone());
        p
    }

    fn plan_context<'b>(&'b self, plan: &'b PlanRt, view: &'b NeighborView) -> PlanContext<'b> {
        PlanContext {
            spec: self.s.spec,
            topology: self.s.topology,
            participants: self.s.participants,
            entry: self.s.entry,
            view,
            quant: &plan.quant,
            cost: self.s.cost,
            coact: self.s.coact,
            weights: self.s.plan.weights,
            low_water_pct: self.s.plan.low_water_pct,
        }
    }

    fn route(&self, plan: usize, x: ExpertRef, current: ServerId) -> ServerId {
        let rt = &self.plans[plan];
        let hosts = &rt.hosts[x.flat(self.s.spec.experts_per_layer)];
        if hosts.len() == 1 {
            return hosts[0];
        }
        let view = &self.views[&current];
        route_replica(&self.plan_context(rt, view), x, &rt.placement, current, view)
    }

    fn device_of(&self, plan: usize, server: ServerId, x: ExpertRef) -> usize {
        self.plans[plan].device_of[&(server, x.flat(self.s.spec.experts_per_layer))]
    }

    fn on_arrival(&mut self, req: usize, now: f64) -> Result<()> {
        let home = self.entry_device();
        let r = &mut self.requests[req];
        r.arrival = now;
        r.plan = self.active_plan;
        let (offset, input, output) = (r.offset, r.input_len, r.output_len);
        if input > 0 {
            self.start_pass(req, true, (offset, offset + input), home, now)
        } else if output > 0 {
            self.start_pass(req, false, (offset, offset + 1), home, now)
        } else {
            self.requests[req].prefill_end = now;
            self.complete(req, now);
            Ok(())
        }
    }

    fn start_pass(&mut self, req: usize, prefill: bool, tokens: (usize, usize), device: usize, now: f64) -> Result<()> {
        let k = self.s.spec.top_k;
        let shards = if prefill {
            self.prefill_shards(self.requests[req].plan, tokens)
        } else {
            vec![(device, tokens)]
        };
        self.requests[req].job = Job {
            prefill,
            tokens,
            device,
            shards,
            pass_start: now,
            served_prev: vec![0; k],
            served_cur: vec![0; k],
            ..Job::default()
        };
        self.start_layer(req, now)
    }

    /// Splits prompt tokens into contiguous blocks over every GPU that holds
    /// the shared weights.
    fn prefill_shards(&self, plan: usize, tokens: (usize, usize)) -> Vec<(usize, (usize, usize))> {
        let devices: Vec<usize> = self.plans[plan]
            .placement
            .shared_hosts
            .iter()
            .flat_map(|s| self.server_devices[s].iter().copied())
            .collect();
        let n = tokens.1 - tokens.0;
        let (q, r) = (n / devices.len(), n % devices.len());
        let mut at = tokens.0;
        let mut out = Vec::new();
        for (i, d) in devices.into_iter().enumerate() {
            let len = q + usize::from(i < r);
            if len > 0 {
                out.push((d, (at, at + len)));
            }
            at += len;
        }
        out
    }

    fn start_layer(&mut self, req: usize, now: f64) -> Result<()> {
        let (layer, prefill, first) = {
            let j = &self.requests[req].job;
            (j.layer, j.prefill, j.tokens.0)
        };
        if !prefill && self.s.paging.prefetch_depth > 0 && layer + 1 < self.s.spec.num_layers {
            self.prefetch(req, first, layer, now)?;
        }
        let shards = std::mem::take(&mut self.requests[req].job.shards);
        let mut parts = Vec::with_capacity(shards.len());
        for &(d, (a, b)) in &shards {
            let sspec = self.s.topology.server(self.devices[d].server).expect("participant");
            let work = (b - a) as f64 * self.s.cost.shared_compute_time(self.s.spec, sspec);
            let (start, end) = self.compute(d, work, now);
            parts.push((
                end,
                LatencyParts {
                    queue_s: start - now,
                    compute_s: end - start,
                    ..Default::default()
                },
            ));
            self.queue.push(end, EventKind::ComputeComplete, Payload::Shared { req });
        }
        let j = &mut self.requests[req].job;
        j.shards_pending = shards.len();
        j.shards = shards;
        j.shard_parts = parts;
        Ok(())
    }

    fn prefetch(&mut self, req: usize, token: usize, layer: usize, now: f64) -> Result<()> {
        let plan = self.requests[req].plan;
        if self.plans[plan].caches.iter().flatten().all(|c| c.holds_everything()) {
            return Ok(());
        }
        let depth = self.s.paging.prefetch_depth.min(self.s.spec.num_layers - 1 - layer);
        let width = self.s.paging.prefetch_width.unwrap_or(self.s.spec.top_k);
        let mut preds = predict_ahead(
            &self.popularity,
            layer,
            self.trace.selections(token, layer),
            self.s.coact,
            depth,
            self.s.paging.blend,
        );
        for p in &mut preds {
            p.ranked.truncate(width);
        }
        let pop = &self.popularity;
        let e = self.s.spec.experts_per_layer;
        let PlanRt { caches, pinned, .. } = &mut self.plans[plan];
        for (d, cache) in caches.iter_mut().enumerate() {
            if let Some(cache) = cache {
                if !cache.holds_everything() {
                    let pins = &pinned[d];
                    cache.schedule_prefetch(&preds, pop, now, &|x| pins[x.flat(e)] > 0)?;
                }
            }
        }
        Ok(())
    }

    fn bits(&self, plan: usize, server: ServerId, x: ExpertRef) -> BitWidth {
        self.plans[plan].quant.bits_or_full(server, x)
    }

    fn on_shared(&mut self, req: usize, now: f64) -> Result<()> {
        let plan = self.requests[req].plan;
        {
            let j = &mut self.requests[req].job;
            j.shards_pending -= 1;
            if j.shards_pending > 0 {
                return Ok(());
            }
        }
        let (prefill, tokens, layer, device) = {
            let j = &self.requests[req].job;
            (j.prefill, j.tokens, j.layer, j.device)
        };
        let here = self.devices[device].server;
        let token_bytes = |s: &Self, b: BitWidth| s.s.cost.token_transfer_bytes(s.s.spec, b);
        let mut slots: Vec<Slot> = Vec::new();
        let next_device;
        if !prefill {
            let t = tokens.0;
            let sel: Vec<ExpertRef> = self.trace.selected_refs(t, layer).collect();
            let mut served = Vec::with_capacity(sel.len());
            for &x in &sel {
                let server = self.route(plan, x, here);
                served.push(server);
                let d = self.device_of(plan, server, x);
                let b = self.bits(plan, server, x);
                self.quality.quantization += self.plans[plan].quant.penalties.penalty(b);
                match slots.iter_mut().find(|s| s.device == d) {
                    Some(s) => {
                        s.work.push((x, 1));
                        s.bytes = s.bytes.max(token_bytes(self, b));
                    }
                    None => slots.push(Slot {
                        origin: device,
                        device: d,
                        work: vec![(x, 1)],
                        bytes: token_bytes(self, b),
                        ..Slot::default()
                    }),
                }
            }
            next_device = slots[0].device;
            let j = &mut self.requests[req].job;
            j.served_cur.copy_from_slice(&served);
            if layer > 0 {
                let k = served.len();
                let diff = j
                    .served_prev
                    .iter()
                    .flat_map(|a| served.iter().map(move |b| (a != b) as u32))
                    .sum::<u32>();
                self.crossings += diff as f64 / (k * k) as f64;
            }
            self.popularity.update(sel);
        } else {
            next_device = device;
            // (origin, destination) -> expert -> tokens
            let mut groups: BTreeMap<(usize, usize), BTreeMap<ExpertRef, Vec<usize>>> = BTreeMap::new();
            let shards = self.requests[req].job.shards.clone();
            for &(src, (a, b)) in &shards {
                let from = self.devices[src].server;
                for t in a..b {
                    let sel: Vec<ExpertRef> = self.trace.selected_refs(t, layer).collect();
                    for &x in &sel {
                        let server = self.route(plan, x, from);
                        let d = self.device_of(plan, server, x);
                        groups.entry((src, d)).or_default().entry(x).or_default().push(t);
                    }
                    self.popularity.update(sel);
                }
            }
            let compress = self.s.fusion.enabled || self.s.prune.enabled;
            for ((src, d), experts) in groups {
                let server = self.devices[d].server;
                let remote = server != self.devices[src].server;
                let mut slot = Slot {
                    origin: src,
                    device: d,
                    ret_to: src,
                    ..Slot::default()
                };
                if remote && compress {
                    for (x, toks) in experts {
                        let b = self.bits(plan, server, x);
                        let per = token_bytes(self, b);
                        let kept = self.compress_batch(x, &toks, per as u64);
                        if kept > 0 {
                            self.quality.quantization += self.plans[plan].quant.penalties.penalty(b) * kept as f64;
                            slot.bytes += kept as f64 * per;
                            slot.work.push((x, kept as u32));
                        }
                    }
                } else {
                    let mut token_bits: BTreeMap<usize, BitWidth> = BTreeMap::new();
                    for (x, toks) in experts {
                        let b = self.bits(plan, server, x);
                        self.quality.quantization += self.plans[plan].quant.penalties.penalty(b) * toks.len() as f64;
                        for &t in &toks {
                            let e = token_bits.entry(t).or_insert(b);
                            *e = (*e).max(b);
                        }
                        slot.work.push((x, toks.len() as u32));
                    }
                    if d != src {
                        slot.bytes = token_bits.values().map(|&b| token_bytes(self, b)).sum();
                    }
                }
                if !slot.work.is_empty() {
                    slots.push(slot);
                }
            }
        }
        if !prefill {
            for s in &mut slots {
                s.ret_to = next_device;
            }
        }
        {
            let e = self.s.spec.experts_per_layer;
            let rt = &mut self.plans[plan];
            for s in &slots {
                for &(x, _) in &s.work {
                    rt.pinned[s.device][x.flat(e)] += 1;
                }
            }
        }
        let n = slots.len();
        let j = &mut self.requests[req].job;
        j.next_device = next_device;
        j.slots = slots;
        j.pending = n;
        if n == 0 {
            self.queue.push(now, EventKind::LayerComplete, Payload::Layer { req });
        }
        for i in 0..n {
            let (o, d) = {
                let s = &self.requests[req].job.slots[i];
                (s.origin, s.device)
            };
            if d != o {
                self.start_transfer(req, i, o, d, now);
            } else {
                self.arrive(req, i, now);
            }
        }
        Ok(())
    }

    /// Prunes and fuses the tokens bound for one remote expert; returns how
    /// many vectors remain to send and compute.
    fn compress_batch(&mut self, x: ExpertRef, tokens: &[usize], bytes_per_token: u64) -> usize {
        let mut kept: Vec<usize> = tokens.to_vec();
        if self.s.prune.enabled {
            let scores: Vec<f64> = kept.iter().map(|&t| self.trace.importance[t]).collect();
            let out = prune_tokens(&scores, self.s.prune.mode, bytes_per_token);
            self.quality.record_pruned(out.pruned.len() as u64, self.s.prune.penalty);
            kept = out.retained.iter().map(|&i| kept[i]).collect();
        }
        if self.s.fusion.enabled && kept.len() > 1 {
            let synth = self.synth.as_ref().expect("fusion enabled");
            let batch: Vec<Vec<f64>> = kept.iter().map(|&t| synth.vector(t, x.layer(), x.expert())).collect();
            let out = fuse_tokens(&batch, self.s.fusion.threshold, bytes_per_token);
            self.quality.record_fused(out.merged() as u64, self.s.fusion.penalty);
            return out.groups();
        }
        kept.len()
    }

    fn start_transfer(&mut self, req: usize, i: usize, from: usize, to: usize, now: f64) {
        let path = self.path(from, to);
        let bytes = self.requests[req].job.slots[i].bytes;
        if self.devices[from].server != self.devices[to].server {
            self.traffic.cross_server_transfers += 1;
            self.traffic.cross_server_bytes += bytes;
        } else {
            self.traffic.intra_server_transfers += 1;
            self.traffic.intra_server_bytes += bytes;
        }
        let slot = &mut self.requests[req].job.slots[i];
        slot.path = path;
        slot.hop = 0;
        self.hop_step(req, i, now);
    }

    fn hop_step(&mut self, req: usize, i: usize, now: f64) {
        let slot = &mut self.requests[req].job.slots[i];
        let ch = &mut self.channels[slot.path[slot.hop]];
        let start = now.max(ch.busy_until);
        let serialize = slot.bytes / ch.bandwidth;
        ch.busy_until = start + serialize;
        let arrival = ch.busy_until + ch.latency;
        slot.parts.queue_s += start - now;
        slot.parts.transfer_s += arrival - start;
        self.queue.push(arrival, EventKind::TransferComplete, Payload::Hop { req, slot: i });
    }

    fn on_hop(&mut self, req: usize, i: usize, now: f64) {
        let slot = &mut self.requests[req].job.slots[i];
        slot.hop += 1;
        if slot.hop < slot.path.len() {
            self.hop_step(req, i, now);
        } else if slot.returning {
            self.slot_done(req, i, now);
        } else {
            self.arrive(req, i, now);
        }
    }

    fn arrive(&mut self, req: usize, i: usize, now: f64) {
        let plan = self.requests[req].plan;
        let (d, work) = {
            let s = &self.requests[req].job.slots[i];
            (s.device, s.work.clone())
        };
        let pop = &self.popularity;
        let e = self.s.spec.experts_per_layer;
        let PlanRt { caches, pinned, .. } = &mut self.plans[plan];
        let cache = caches[d].as_mut().expect("device hosts experts");
        let pins = &pinned[d];
        let mut stall: f64 = 0.0;
        for &(x, _) in &work {
            let a = cache.access_expert(x, now, pop, &|y| pins[y.flat(e)] > 0);
            stall = stall.max(a.stall_s);
        }
        if stall > 0.0 {
            self.requests[req].job.slots[i].parts.stall_s += stall;
            self.queue.push(now + stall, EventKind::LoadComplete, Payload::Load { req, slot: i });
        } else {
            self.start_expert_compute(req, i, now);
        }
    }

    fn start_expert_compute(&mut self, req: usize, i: usize, now: f64) {
        let plan = self.requests[req].plan;
        let (d, work) = {
            let s = &self.requests[req].job.slots[i];
            (s.device, s.work.clone())
        };
        let server = self.devices[d].server;
        let sspec = self.s.topology.server(server).expect("participant");
        let seconds: f64 = work
            .iter()
            .map(|&(x, n)| n as f64 * self.s.cost.expert_compute_time(self.s.spec, sspec, self.bits(plan, server, x)))
            .sum();
        self.expert_compute_s += seconds;
        let (start, end) = self.compute(d, seconds, now);
        let slot = &mut self.requests[req].job.slots[i];
        slot.parts.queue_s += start - now;
        slot.parts.compute_s += end - start;
        self.queue.push(end, EventKind::ComputeComplete, Payload::Expert { req, slot: i });
    }

    fn on_expert(&mut self, req: usize, i: usize, now: f64) {
        let plan = self.requests[req].plan;
        let (d, ret, work) = {
            let s = &self.requests[req].job.slots[i];
            (s.device, s.ret_to, s.work.clone())
        };
        let e = self.s.spec.experts_per_layer;
        let pins = &mut self.plans[plan].pinned[d];
        for (x, _) in work {
            let c = &mut pins[x.flat(e)];
            *c = c.saturating_sub(1);
        }
        if d != ret {
            self.requests[req].job.slots[i].returning = true;
            self.start_transfer(req, i, d, ret, now);
        } else {
            self.slot_done(req, i, now);
        }
    }

    fn slot_done(&mut self, req: usize, i: usize, now: f64) {
        let j = &mut self.requests[req].job;
        j.slots[i].end = now;
        j.pending -= 1;
        if j.pending == 0 {
            self.queue.push(now, EventKind::LayerComplete, Payload::Layer { req });
        }
    }

    fn on_layer(&mut self, req: usize, now: f64) -> Result<()> {
        let layers = self.s.spec.num_layers;
        let j = &mut self.requests[req].job;
        let mut parts = j
            .shard_parts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(b.0.cmp(&a.0)))
            .map(|(_, p)| p.1)
            .unwrap_or_default();
        if let Some(c) = j
            .slots
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.end.total_cmp(&b.1.end).then(b.0.cmp(&a.0)))
            .map(|(_, s)| s)
        {
            parts.add(&c.parts);
        }
        j.pass_parts.add(&parts);
        j.device = j.next_device;
        if !j.prefill {
            j.shards[0].0 = j.device;
        }
        std::mem::swap(&mut j.served_prev, &mut j.served_cur);
        j.layer += 1;
        if j.layer < layers {
            return self.start_layer(req, now);
        }
        self.pass_done(req, now)
    }

    fn pass_done(&mut self, req: usize, now: f64) -> Result<()> {
        let r = &mut self.requests[req];
        let device = r.job.shards.last().map_or(r.job.device, |s| s.0);
        self.quality.tokens += (r.job.tokens.1 - r.job.tokens.0) as u64;
        if r.job.prefill {
            r.prefill_end = now;
            r.prefill_parts = r.job.pass_parts;
            if r.output_len == 0 {
                self.complete(req, now);
                return Ok(());
            }
            let t = r.offset + r.input_len;
            return self.start_pass(req, false, (t, t + 1), device, now);
        }
        self.token_records.push(TokenRecord {
            request: req,
            index: r.next_out,
            start_s: r.job.pass_start,
            end_s: now,
            parts: r.job.pass_parts,
        });
        r.next_out += 1;
        if r.next_out < r.output_len {
            let t = r.offset + r.input_len + r.next_out;
            return self.start_pass(req, false, (t, t + 1), device, now);
        }
        self.complete(req, now);
        Ok(())
    }

    fn complete(&mut self, req: usize, now: f64) {
        self.requests[req].completion = Some(now);
        self.remaining -= 1;
        if self.s.arrival_interval_s.is_none() && req + 1 < self.requests.len() {
            self.queue.push(now, EventKind::RequestArrival, Payload::Arrival { req: req + 1 });
        }
        let live = self.requests.iter().filter(|r| r.completion.is_none() && r.plan < self.active_plan).count();
        if live == 0 {
            self.retire_plans();
        }
    }

    /// Drops the caches of superseded plans once no request uses them.
    fn retire_plans(&mut self) {
        for p in 0..self.active_plan {
            for c in self.plans[p].caches.iter_mut() {
                if let Some(c) = c.take() {
                    self.retired_paging.merge(&c.stats);
                }
            }
        }
    }

    fn on_hello(&mut self, idx: usize, now: f64) -> Result<()> {
        if self.remaining == 0 {
            return Ok(());
        }
        let id = self.s.participants[idx];
        let (c, m) = self.status[&id];
        let bytes = self.agents[idx].tick(ResourceStatus::new(c, m, now), self.s.perception, now);
        if let Some(bytes) = bytes {
            let msg = decode_hello(&bytes)?;
            for n in self.s.topology.neighbors(id) {
                self.traffic.hello_messages += 1;
                self.traffic.hello_bytes += HELLO_LEN as u64;
                if let Some(v) = self.views.get_mut(&n) {
                    v.receive(&msg, now);
                }
            }
        }
        self.queue.push(now + self.s.perception.check_interval(), EventKind::HelloTick, Payload::Hello { server: idx });
        Ok(())
    }

    fn on_replan_check(&mut self, now: f64) {
        if self.remaining == 0 {
            return;
        }
        self.queue.push(now + self.s.replan.check_period_s, EventKind::ReplanCheck, Payload::Replan);
        let current = self.advertised();
        if !check_replan(&self.baseline_popularity, &self.popularity, &self.snapshot_at_plan, &current, self.s.replan) {
            return;
        }
        self.replans += 1;
        self.baseline_popularity = self.popularity.clone();
        self.snapshot_at_plan = current.clone();
        let mut view = NeighborView::new();
        for (&id, &(c, m)) in &current {
            view.set(id, ResourceStatus::new(c, m, now));
        }
        let old = &self.plans[self.active_plan];
        let inputs = PlanInputs {
            spec: self.s.spec,
            topology: self.s.topology,
            participants: self.s.participants,
            entry: self.s.entry,
            view: &view,
            coact: self.s.coact,
            popularity: &self.popularity,
            cost: self.s.cost,
            plan: self.s.plan,
            quantization: self.s.quantization,
            paging: self.s.paging,
        };
        let next = plan_deployment(&inputs).and_then(|d| {
            let moves = migration_moves((&old.placement, &old.quant), (&d.placement, &d.quant), self.s.topology, self.s.spec)?;
            Ok((d, moves))
        });
        let (deployment, moves) = match next {
            Ok(x) => x,
            Err(_) => {
                self.replan_failures += 1;
                return;
            }
        };
        if deployment.placement == old.placement && deployment.quant == old.quant {
            return;
        }
        let mut activation = now;
        for m in &moves {
            self.traffic.migration_bytes += m.bytes;
            let path = match m.source {
                UpgradeSource::Cloud => vec![self.cloud_channel.expect("cloud source implies an uplink")],
                UpgradeSource::Peer(p) => {
                    let (a, b) = (self.server_devices[&p][0], self.server_devices[&m.server][0]);
                    self.path(a, b)
                }
            };
            let mut t = now;
            for ch in path {
                let c = &mut self.channels[ch];
                let start = t.max(c.busy_until);
                c.busy_until = start + m.bytes as f64 / c.bandwidth;
                t = c.busy_until + c.latency;
            }
            activation = activation.max(t);
        }
        match self.build_plan(deployment.placement, deployment.quant) {
            Ok(rt) => {
                self.plans.push(rt);
                self.traffic.advert_bytes += self.advert_bytes();
                let plan = self.plans.len() - 1;
                self.queue.push(activation, EventKind::TransferComplete, Payload::Migration { plan });
            }
            Err(_) => self.replan_failures += 1,
        }
    }

    fn finish(self) -> SimOutcome {
        let mut paging = self.retired_paging.clone();
        for plan in &self.plans {
            for c in plan.caches.iter().flatten() {
                paging.merge(&c.stats);
            }
        }
        let shared = self.plans[0].quant.shared_bytes(self.s.spec);
        let mut peak_resident_bytes: BTreeMap<ServerId, u64> = BTreeMap::new();
        for (d, dev) in self.devices.iter().enumerate() {
            let p = self.plans.iter().map(|pl| pl.peak[d]).max().unwrap_or(0);
            *peak_resident_bytes.entry(dev.server).or_default() += shared + p;
        }
        let request_records: Vec<RequestRecord> = self
            .requests
            .iter()
            .enumerate()
            .map(|(id, r)| RequestRecord {
                id,
                input_len: r.input_len,
                output_len: r.output_len,
                arrival_s: r.arrival,
                prefill_end_s: r.prefill_end,
                completion_s: r.completion.unwrap_or(r.arrival),
                prefill_parts: r.prefill_parts,
            })
            .collect();
        let input_tokens: u64 = self.requests.iter().map(|r| r.input_len as u64).sum();
        let output_tokens: u64 = self.requests.iter().map(|r| r.output_len as u64).sum();
        let first = request_records.iter().map(|r| r.arrival_s).fold(f64::INFINITY, f64::min);
        let last = request_records.iter().map(|r| r.completion_s).fold(0.0, f64::max);
        let makespan = if request_records.is_empty() { 0.0 } else { last - first.min(last) };
        let latencies: Vec<f64> = request_records.iter().map(RequestRecord::latency).collect();
        let mut traffic = self.traffic.clone();
        traffic.crossing_frequency = if self.token_records.is_empty() {
            0.0
        } else {
            self.crossings / self.token_records.len() as f64
        };
        let report = SimReport {
            requests: request_records.len(),
            input_tokens,
            output_tokens,
            makespan_s: makespan,
            avg_generation_throughput: if makespan > 0.0 { output_tokens as f64 / makespan } else { 0.0 },
            avg_latency_s: mean(latencies.iter().copied()),
            p95_latency_s: percentile(&latencies, 0.95),
            avg_token_latency_s: mean(self.token_records.iter().map(TokenRecord::latency)),
            traffic,
            paging: PagingSummary::from_stats(&paging, output_tokens),
            quality_score: quality_score(&self.quality),
            quality: self.quality.clone(),
            peak_resident_bytes,
            expert_compute_s: self.expert_compute_s,
            replans: self.replans,
            replan_failures: self.replan_failures,
            events_processed: self.events_processed,
            event_counts: self.event_counts,
            budget_checks: self.budget_checks,
            budget_violations: self.budget_violations,
            request_records,
            token_records: self.token_records,
        };
        SimOutcome {
            report,
            events: self.log,
        }
    }
}
