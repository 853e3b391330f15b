use edgemoe::model::ExpertRef;
use edgemoe::placement::Placement;
use edgemoe::scenario::{PlannedDeployment, Scenario};
use edgemoe::sim::{CostModel, SimReport};
use serde_json::{json, Value};

const GIB: u64 = 1 << 30;

fn server(id: u32, gpu_mem: u64) -> Value {
    json!({"id": id, "gpu_mem_bytes": gpu_mem, "host_mem_bytes": GIB, "ssd_bytes": GIB,
           "compute_rate": 1e12, "intra_bus_bandwidth": 16e9})
}

struct Shape {
    layers: usize,
    experts: usize,
    k: usize,
    servers: u32,
    gpu_mem: u64,
    bandwidth: f64,
    latency: f64,
    requests: usize,
    input: usize,
    output: usize,
}

impl Default for Shape {
    fn default() -> Self {
        Shape {
            layers: 4,
            experts: 8,
            k: 2,
            servers: 2,
            gpu_mem: GIB,
            bandwidth: 1e9,
            latency: 1e-4,
            requests: 2,
            input: 8,
            output: 6,
        }
    }
}

impl Shape {
    fn json(&self) -> Value {
        let servers: Vec<Value> = (1..=self.servers).map(|i| server(i, self.gpu_mem)).collect();
        let links: Vec<Value> = (1..self.servers)
            .map(|i| json!({"endpoints": [i, i + 1], "bandwidth": self.bandwidth, "propagation_latency": self.latency}))
            .collect();
        json!({
            "schema_version": 1,
            "name": "test",
            "model": {"num_layers": self.layers, "experts_per_layer": self.experts, "expert_param_bytes": 1 << 20,
                      "shared_param_bytes": 4 << 20, "top_k": self.k, "hidden_dim": 2048,
                      "activation_bytes_per_element": 2},
            "topology": {"servers": servers, "links": links},
            "workload": {"num_requests": self.requests, "input_len": self.input, "output_len": self.output,
                         "zipf_s": 0.8, "concentration": 4.0}
        })
    }

    fn scenario(&self) -> Scenario {
        from_value(self.json())
    }
}

fn from_value(v: Value) -> Scenario {
    Scenario::from_json(&serde_json::to_vec(&v).unwrap()).unwrap()
}

fn run(s: &Scenario) -> SimReport {
    s.run(s.seed).unwrap().report.buckets.remove(0).report
}

fn split_by_layer(s: &Scenario, owner: impl Fn(usize, usize) -> u32) -> Placement {
    let mut p = Placement::new();
    for l in 0..s.model.num_layers {
        for e in 0..s.model.experts_per_layer {
            p.assignment.entry(owner(l, e)).or_default().insert(ExpertRef::new(l, e));
        }
    }
    p.sync_shared_hosts();
    p
}

fn simulate(s: &Scenario, d: &PlannedDeployment) -> SimReport {
    let profile = s.profile(s.seed).unwrap();
    let trace = s.trace(s.seed).unwrap();
    s.simulate_trace(&profile, d, &trace).unwrap().0
}

fn deploy(s: &Scenario, p: Placement) -> PlannedDeployment {
    s.deployment_for(&s.profile(s.seed).unwrap(), p, None).unwrap()
}

fn times(s: &Scenario) -> (f64, f64) {
    let srv = s.topology.server(1).unwrap();
    let cost = CostModel::default();
    (
        cost.shared_compute_time(&s.model, srv),
        cost.expert_compute_time(&s.model, srv, edgemoe::compression::BitWidth::B16),
    )
}

#[test]
fn single_server_token_is_a_sum_of_layer_computes() {
    let s = Shape { servers: 1, requests: 1, input: 1, output: 1, ..Shape::default() }.scenario();
    let r = run(&s);
    let (shared, expert) = times(&s);
    let per_layer = shared + s.model.top_k as f64 * expert;
    let t = &r.token_records[0];
    assert!((t.latency() - s.model.num_layers as f64 * per_layer).abs() < 1e-12, "{t:?}");
    assert_eq!(t.parts.transfer_s, 0.0);
    assert_eq!(t.parts.stall_s, 0.0);
    assert_eq!(r.traffic.cross_server_transfers, 0);
    assert_eq!(r.paging.misses, 0);
}

#[test]
fn latency_parts_sum_to_end_to_end_time() {
    let shapes = [
        Shape::default(),
        Shape { servers: 3, k: 3, requests: 3, ..Shape::default() },
        // tight GPU memory forces paging stalls
        Shape { servers: 2, gpu_mem: 24 << 20, output: 12, ..Shape::default() },
    ];
    for shape in shapes {
        let r = run(&shape.scenario());
        assert!(!r.token_records.is_empty());
        for t in &r.token_records {
            assert!((t.parts.total() - t.latency()).abs() < 1e-9, "{t:?}");
        }
        for q in &r.request_records {
            assert!((q.prefill_parts.total() - (q.prefill_end_s - q.arrival_s)).abs() < 1e-9, "{q:?}");
        }
    }
}

#[test]
fn paging_pressure_shows_up_as_stall() {
    let r = run(&Shape { servers: 2, gpu_mem: 24 << 20, output: 12, ..Shape::default() }.scenario());
    assert!(r.paging.misses > 0);
    assert!(r.token_records.iter().any(|t| t.parts.stall_s > 0.0));
    assert_eq!(r.budget_violations, 0);
    assert_eq!(r.budget_checks, r.events_processed);
}

#[test]
fn equal_seeds_give_identical_reports() {
    let s = Shape { servers: 3, requests: 3, ..Shape::default() }.scenario();
    let a = s.run(7).unwrap().report.to_json().unwrap();
    let b = s.run(7).unwrap().report.to_json().unwrap();
    assert_eq!(a, b);
    let c = s.run(8).unwrap().report.to_json().unwrap();
    assert_ne!(a, c);
}

#[test]
fn expert_compute_does_not_depend_on_placement() {
    let s = Shape { servers: 3, requests: 3, ..Shape::default() }.scenario();
    let trace = s.trace(s.seed).unwrap();
    let (_, expert) = times(&s);
    let expected = trace.token_count() as f64 * (s.model.num_layers * s.model.top_k) as f64 * expert;
    let layouts = [
        split_by_layer(&s, |_, _| 1),
        split_by_layer(&s, |l, _| 1 + (l % 3) as u32),
        split_by_layer(&s, |_, e| 1 + (e % 3) as u32),
    ];
    for p in layouts {
        let r = simulate(&s, &deploy(&s, p));
        assert!((r.expert_compute_s - expected).abs() < 1e-9 * expected, "{} vs {expected}", r.expert_compute_s);
    }
}

#[test]
fn faster_links_never_raise_latency() {
    let base = Shape { servers: 3, requests: 3, ..Shape::default() };
    let s = base.scenario();
    let p = split_by_layer(&s, |_, e| 1 + (e % 3) as u32);
    let mut last = f64::INFINITY;
    for bw in [1e8, 1e9, 1e10, 1e11] {
        let fast = Shape { bandwidth: bw, ..Shape { servers: 3, requests: 3, ..Shape::default() } }.scenario();
        let r = simulate(&fast, &deploy(&fast, p.clone()));
        assert!(r.avg_latency_s <= last + 1e-12, "bandwidth {bw}: {} after {last}", r.avg_latency_s);
        last = r.avg_latency_s;
    }
}

#[test]
fn remote_expert_pays_latency_plus_bytes_over_bandwidth() {
    // layer 0 on server 1, layer 1 on server 2: each decode pass crosses once each way
    let shape = Shape { layers: 2, requests: 1, input: 1, output: 3, latency: 1e-3, ..Shape::default() };
    let s = shape.scenario();
    let d = deploy(&s, split_by_layer(&s, |l, _| 1 + l as u32));
    let r = simulate(&s, &d);
    let hop = 1e-3 + 4096.0 / 1e9;
    assert_eq!(s.model.activation_bytes(), 4096);
    // the first pass starts where the entry server's prefill left off
    for t in &r.token_records[1..] {
        assert!((t.parts.transfer_s - 2.0 * hop).abs() < 1e-12, "{t:?}");
    }
    let (shared, expert) = times(&s);
    let t = &r.token_records[1];
    let compute = 2.0 * (shared + 2.0 * expert);
    assert!((t.latency() - compute - 2.0 * hop).abs() < 1e-12, "{t:?}");
}

#[test]
fn split_selection_waits_for_the_slower_branch() {
    // one layer, both experts selected, each on its own server
    let shape = Shape { layers: 1, experts: 2, requests: 1, input: 1, output: 4, latency: 1e-3, ..Shape::default() };
    let s = shape.scenario();
    let d = deploy(&s, split_by_layer(&s, |_, e| 1 + e as u32));
    let r = simulate(&s, &d);
    let (shared, expert) = times(&s);
    let hop = 1e-3 + 4096.0 / 1e9;
    for t in &r.token_records {
        // the two experts run in parallel: one expert's compute on the critical path, not two
        assert!((t.parts.compute_s - (shared + expert)).abs() < 1e-12, "{t:?}");
        assert!(t.latency() >= shared + expert + hop - 1e-12);
        let hops = t.parts.transfer_s / hop;
        assert!((hops - hops.round()).abs() < 1e-9 && (1.0..=2.0).contains(&hops.round()), "{t:?}");
    }
}

#[test]
fn halved_memory_triggers_a_feasible_replan() {
    let mut v = Shape { servers: 3, requests: 6, output: 16, gpu_mem: 64 << 20, ..Shape::default() }.json();
    v["resource_events"] = json!([{"time_s": 0.05, "server": 3, "avail_compute_pct": 100, "avail_gpu_mem_pct": 50}]);
    v["perception"] = json!({"period_s": 0.02});
    v["replan"] = json!({"enabled": true, "check_period_s": 0.02, "resource_threshold_pct": 10.0});
    v["sim"] = json!({"arrival_interval_s": 0.05});
    let s = from_value(v);
    let r = run(&s);
    assert!(r.replans >= 1, "{r:?}");
    assert_eq!(r.replan_failures, 0);
    assert_eq!(r.budget_violations, 0);
    assert_eq!(r.request_records.len(), 6);
}

#[test]
fn quiet_run_never_replans() {
    let mut v = Shape { servers: 3, requests: 4, ..Shape::default() }.json();
    v["replan"] = json!({"enabled": true, "check_period_s": 0.01, "divergence_threshold": 1.0});
    let r = run(&from_value(v));
    assert_eq!(r.replans, 0);
    assert_eq!(r.traffic.migration_bytes, 0);
}

#[test]
fn throughput_is_output_over_makespan() {
    let r = run(&Shape { servers: 2, requests: 3, ..Shape::default() }.scenario());
    assert!((r.avg_generation_throughput - r.output_tokens as f64 / r.makespan_s).abs() < 1e-9);
    assert!(r.p95_latency_s >= r.avg_latency_s * 0.5);
}

#[test]
fn unused_topology_is_rejected_when_disconnected() {
    let mut v = Shape { servers: 2, ..Shape::default() }.json();
    v["topology"]["links"] = json!([]);
    let err = Scenario::from_json(&serde_json::to_vec(&v).unwrap()).and_then(|s| s.run(1).map(|_| ()));
    assert!(err.is_err());
}

#[test]
fn hello_traffic_is_twelve_bytes_per_message_once_per_period() {
    let mut v = Shape { servers: 3, requests: 4, output: 40, ..Shape::default() }.json();
    // a power of two keeps the check ticks exact
    v["perception"] = json!({"period_s": 1.0 / 4096.0});
    let s = from_value(v);
    let r = run(&s);
    assert!(r.makespan_s > 10.0 * s.perception.period_s);
    assert_eq!(r.traffic.hello_bytes, 12 * r.traffic.hello_messages);
    let periods = (r.makespan_s / s.perception.period_s).ceil() as u64;
    let links: u64 = (1..=3).map(|id| s.topology.neighbors(id).len() as u64).sum();
    assert_eq!(r.traffic.hello_messages, links * periods);
}
