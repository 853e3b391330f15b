//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use edgemoe::compression::{assign_bitwidths, fuse_tokens, BitWidth, PenaltyTable};
use edgemoe::edgenet::{decode_hello, encode_hello, NeighborView, ResourceStatus, HELLO_LEN};
use edgemoe::model::{ActivationSynth, ExpertRef, LengthDist};
use edgemoe::paging::{PagingConfig, Popularity};
use edgemoe::placement::{brute_force_place, expected_objective, place, segment_submodels, Placement};
use edgemoe::plan::{plan_deployment, PlanConfig, PlanInputs, QuantizationConfig};
use edgemoe::scenario::{compare, RunOutput, Scenario};
use edgemoe::sim::{CostModel, SimReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Verdict = (bool, String);

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

struct Timed {
    out: RunOutput,
    secs: f64,
}

fn run_file(name: &str) -> Timed {
    let s = Scenario::load(&scenario_path(name)).unwrap();
    let t = Instant::now();
    let out = s.run(s.seed).unwrap();
    Timed { out, secs: t.elapsed().as_secs_f64() }
}

struct Calibration {
    single: Timed,
    two: Timed,
    input_two: Timed,
    input_three: Timed,
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn c1_latency_ratio(c: &Calibration) -> Verdict {
    let rows = compare(&c.single.out.report, &c.two.out.report).unwrap();
    let checked: Vec<f64> = rows
        .iter()
        .filter(|r| r.input == 128 && [256, 512, 1024, 2048].contains(&r.output))
        .map(|r| r.latency_ratio)
        .collect();
    let in_band = checked.len() == 4 && checked.iter().all(|r| (1.4..=2.0).contains(r));
    let slowest = c.single.secs.max(c.two.secs);
    (
        in_band && slowest < 60.0,
        format!("ratios at outputs 256..2048 {}, slowest run {slowest:.1} s", fmt(&checked)),
    )
}

fn throughput(r: &RunOutput) -> Vec<(usize, f64)> {
    r.report.buckets.iter().map(|b| (b.output, b.report.avg_generation_throughput)).collect()
}

fn c2_throughput_ratio(c: &Calibration) -> Verdict {
    let rows = compare(&c.single.out.report, &c.two.out.report).unwrap();
    let ratios: Vec<f64> = rows.iter().map(|r| r.throughput_ratio).collect();
    let in_band = ratios.iter().all(|r| (1.2..=2.0).contains(r));
    let single: Vec<f64> = throughput(&c.single.out).into_iter().filter(|(o, _)| *o <= 1024).map(|(_, t)| t).collect();
    let rising = single.windows(2).all(|w| w[1] >= w[0]);
    (
        in_band && rising,
        format!("ratios {}, single-server tokens/s up to 1024 {}", fmt(&ratios), fmt(&single)),
    )
}

fn c3_input_trend(c: &Calibration) -> Verdict {
    let rows = compare(&c.input_three.out.report, &c.input_two.out.report).unwrap();
    let at = |input: usize| rows.iter().find(|r| r.input == input && r.output == 128).map(|r| r.latency_ratio);
    let (Some(short), Some(long)) = (at(64), at(2048)) else {
        return (false, "sweep lacks input 64 or 2048".into());
    };
    (short >= 1.0 && long > short, format!("two/three latency {short:.3} at input 64, {long:.3} at input 2048"))
}

fn c4_oracle() -> Verdict {
    let t = Instant::now();
    let (mut instances, mut within, mut dominated, mut seed) = (0, 0, 0, 0u64);
    while instances < 50 {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = rng.random_range(1..=2);
        let experts = rng.random_range(2..=3);
        let servers = rng.random_range(2..=3u32);
        let k = rng.random_range(1..=2usize.min(experts));
        let s = spec(layers, experts, k);
        let slack = rng.random_range(1.0..2.0);
        let cap = (s.total_expert_bytes() as f64 / servers as f64 * slack) as u64 + s.shared_param_bytes;
        let f = Fixture::new(s.clone(), line(servers, cap), kernel_coact(&s, seed, rng.random_range(0.5..4.0)));
        let Ok(oracle) = brute_force_place(&f.ctx()) else { continue };
        instances += 1;
        let best = expected_objective(&oracle, &f.ctx()).unwrap().value();
        let seg = segment_submodels(&f.coact, &s, (servers as usize).min(experts), 0).unwrap();
        match place(&seg, &f.ctx()) {
            Ok(h) => {
                let got = expected_objective(&h, &f.ctx()).unwrap().value();
                dominated += usize::from(best <= got + 1e-12);
                within += usize::from(got <= 1.2 * best + 1e-12);
            }
            // an infeasible heuristic is dominated but not within bounds
            Err(_) => dominated += 1,
        }
    }
    let secs = t.elapsed().as_secs_f64();
    (
        dominated == instances && within * 10 >= instances * 9 && secs < 30.0,
        format!("oracle <= heuristic on {dominated}/{instances}, within 1.2x on {within}/{instances}, {secs:.2} s"),
    )
}

fn c5_coverage() -> Verdict {
    let (mut feasible, mut gaps, mut over) = (0, 0, 0);
    for seed in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0fe);
        let layers = rng.random_range(1..=6);
        let experts = rng.random_range(2..=10);
        let s = spec(layers, experts, rng.random_range(1..=3usize.min(experts)));
        let n = rng.random_range(1..=4u32);
        let slack = rng.random_range(0.8..2.0);
        let cap = (s.total_expert_bytes() as f64 / n as f64 * slack) as u64 + s.shared_param_bytes;
        let mut topology = line(n, cap);
        for srv in &mut topology.servers {
            srv.ssd_bytes = rng.random_range(1..4 * MIB);
        }
        let mut view = NeighborView::new();
        for id in 1..=n {
            if rng.random_bool(0.3) {
                view.set(id, ResourceStatus::new(rng.random_range(0..=100), rng.random_range(60..=100), 0.0));
            }
        }
        let participants: Vec<u32> = (1..=n).collect();
        let coact = kernel_coact(&s, seed, rng.random_range(0.5..8.0));
        let popularity = Popularity::from_marginals(&coact.marginals, 0.9);
        let plan = PlanConfig { replication_budget: rng.random_range(0..4), ..PlanConfig::default() };
        let quantization = QuantizationConfig { enabled: rng.random_bool(0.5), ..QuantizationConfig::default() };
        let (cost, paging) = (CostModel::default(), PagingConfig::default());
        let inputs = PlanInputs {
            spec: &s,
            topology: &topology,
            participants: &participants,
            entry: 1,
            view: &view,
            coact: &coact,
            popularity: &popularity,
            cost: &cost,
            plan: &plan,
            quantization: &quantization,
            paging: &paging,
        };
        let Ok(d) = plan_deployment(&inputs) else { continue };
        feasible += 1;
        gaps += coverage_gaps(&d.placement, &s);
        over += capacity_violations(&d.placement, &s, &d.quant, &topology, &view).len();
    }
    (
        gaps == 0 && over == 0 && feasible > 0,
        format!("{feasible}/1000 feasible plans, {gaps} uncovered experts, {over} capacity violations"),
    )
}

fn c6_hello() -> Verdict {
    let mut bad_round_trips = 0;
    for c in 0..=100u8 {
        for m in 0..=100u8 {
            let frame = encode_hello(&ResourceStatus::new(c, m, 0.0), 3, 17).unwrap();
            let ok = frame.len() == HELLO_LEN
                && HELLO_LEN == 12
                && decode_hello(&frame)
                    .is_ok_and(|h| (h.avail_compute_pct, h.avail_gpu_mem_pct, h.sender, h.seq) == (c, m, 3, 17));
            bad_round_trips += usize::from(!ok);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut missed = 0;
    for _ in 0..10_000 {
        let status = ResourceStatus::new(rng.random_range(0..=100), rng.random_range(0..=100), 0.0);
        let mut frame = encode_hello(&status, rng.random(), rng.random()).unwrap();
        let i = rng.random_range(0..HELLO_LEN);
        frame[i] ^= rng.random_range(1..=255u8);
        missed += usize::from(decode_hello(&frame).is_ok());
    }
    (
        bad_round_trips == 0 && missed == 0,
        format!("{bad_round_trips}/10201 round-trip failures, {missed}/10000 corruptions undetected"),
    )
}

fn gib_server(id: u32, gpu_mem: u64, ssd: u64) -> Value {
    json!({"id": id, "gpu_mem_bytes": gpu_mem, "host_mem_bytes": 1u64 << 30, "ssd_bytes": ssd,
           "compute_rate": 1e12, "intra_bus_bandwidth": 16e9})
}

fn small_scenario(servers: u32, gpu_mem: u64, ssd: u64, workload: Value, extra: Value) -> Scenario {
    let mut v = json!({
        "schema_version": 1,
        "name": "acceptance",
        "model": {"num_layers": 6, "experts_per_layer": 8, "expert_param_bytes": 1 << 20,
                  "shared_param_bytes": 4 << 20, "top_k": 2, "hidden_dim": 256,
                  "activation_bytes_per_element": 2},
        "topology": {
            "servers": (1..=servers).map(|i| gib_server(i, gpu_mem, ssd)).collect::<Vec<_>>(),
            "links": (1..servers).map(|i| json!({"endpoints": [i, i + 1], "bandwidth": 1e9,
                                                 "propagation_latency": 1e-4})).collect::<Vec<_>>()
        },
        "workload": workload
    });
    if let (Value::Object(base), Value::Object(more)) = (&mut v, extra) {
        base.extend(more);
    }
    Scenario::from_json(&serde_json::to_vec(&v).unwrap()).unwrap()
}

fn only_bucket(s: &Scenario, seed: u64) -> (SimReport, f64) {
    let out = s.run(seed).unwrap();
    let analytic = out.report.objective.expected_cross_transitions;
    (out.report.buckets.into_iter().next().unwrap().report, analytic)
}

fn c7_monte_carlo() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    let mut ok = true;
    for seed in 1..=5u64 {
        // three servers, each holding about 40% of the experts
        let gpu = (4 << 20) + (48 << 20) * 2 / 5;
        let s = small_scenario(
            3,
            gpu,
            1,
            json!({"num_requests": 50, "input_len": 4, "output_len": 2000, "zipf_s": 0.8,
                   "concentration": 1.0 + seed as f64, "kernel_seed": seed}),
            json!({"seed": seed, "placement": {"planner": {"profile_tokens": 400_000}}}),
        );
        let (r, analytic) = only_bucket(&s, seed);
        let simulated = r.traffic.crossing_frequency;
        let rel = (analytic - simulated).abs() / simulated.max(1e-12);
        worst = worst.max(rel);
        ok &= r.output_tokens >= 100_000 && analytic > 0.0 && rel <= 0.02;
        details.push(format!("{analytic:.4}/{simulated:.4}"));
    }
    (ok, format!("analytic/simulated {}, worst gap {:.2}%", details.join(" "), 100.0 * worst))
}

fn paging_scenario(gpu_experts: u64, depth: usize, requests: usize) -> Scenario {
    small_scenario(
        2,
        (4 << 20) + gpu_experts * (1 << 20),
        1 << 30,
        json!({"num_requests": requests, "input_len": 16, "output_len": 256, "zipf_s": 0.8,
               "concentration": 4.0}),
        json!({"paging": {"prefetch_depth": depth}}),
    )
}

fn c8_paging() -> Verdict {
    // budget safety over a long run
    let long = paging_scenario(10, 2, 400);
    let (big, _) = only_bucket(&long, long.seed);
    let safe = big.events_processed >= 1_000_000
        && big.budget_checks == big.events_processed
        && big.budget_violations == 0;

    // prefetch depth on the testbed scenario, over at least 10 000 tokens
    let stall = |depth: usize| {
        let mut s = Scenario::load(&scenario_path("output_sweep_two.json")).unwrap();
        s.sweep.clear();
        s.workload.num_requests = 5;
        s.workload.output_len = LengthDist::Fixed(2048);
        s.paging.prefetch_depth = depth;
        let r = only_bucket(&s, s.seed).0;
        assert!(r.output_tokens >= 10_000);
        r.paging.mean_stall_per_token_s
    };
    let (deep, none) = (stall(2), stall(0));

    // hit rate against the GPU budget, placement held fixed
    let base = paging_scenario(8, 2, 40);
    let profile = base.profile(base.seed).unwrap();
    let placement = base.deploy(&profile).unwrap().placement;
    let trace = base.bucket_trace(0, base.seed).unwrap();
    let rates: Vec<f64> = [6u64, 10, 14, 18, 24]
        .iter()
        .map(|&g| {
            let s = paging_scenario(g, 2, 40);
            let d = s.deployment_for(&profile, placement.clone(), None).unwrap();
            s.simulate_trace(&profile, &d, &trace).unwrap().0.paging.hit_rate
        })
        .collect();
    let monotone = rates.windows(2).all(|w| w[1] >= w[0]);
    (
        safe && deep <= none && monotone,
        format!(
            "{} events, {} checks, {} violations; stall per token depth 2 {:.4e} s vs depth 0 {:.4e} s; hit rates {}",
            big.events_processed,
            big.budget_checks,
            big.budget_violations,
            deep,
            none,
            fmt(&rates)
        ),
    )
}

fn c9_compression() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut byte_mismatches = 0;
    for _ in 0..1000 {
        let (layers, experts, servers) = (rng.random_range(1..4), rng.random_range(2..7), rng.random_range(1..4u32));
        let mut s = spec(layers, experts, 1);
        s.expert_param_bytes = rng.random_range(1..=1u64 << 22);
        let mut p = Placement::new();
        for x in s.experts() {
            p.assignment.entry(rng.random_range(1..=servers)).or_default().insert(x);
        }
        p.sync_shared_hosts();
        let mut pop = Popularity::<f64>::uniform(&s, 0.9);
        for _ in 0..rng.random_range(0..60) {
            pop.update([ExpertRef::new(rng.random_range(0..layers), rng.random_range(0..experts))]);
        }
        let slack = rng.random_range(0.0..1.2);
        let budgets: BTreeMap<u32, u64> = p
            .assignment
            .iter()
            .map(|(&id, set)| {
                let n = set.len() as u64;
                let floor = n * BitWidth::B4.scale_bytes(s.expert_param_bytes);
                (id, floor + ((n * s.expert_param_bytes - floor) as f64 * slack) as u64)
            })
            .collect();
        let q = assign_bitwidths(&pop, &p, &s, &budgets, BitWidth::B16, PenaltyTable::default()).unwrap();
        for (&id, set) in &p.assignment {
            let formula: u64 =
                set.iter().map(|&x| s.expert_param_bytes * q.bits(id, x).unwrap().bits() as u64 / 16).sum();
            byte_mismatches += usize::from(q.server_expert_bytes(&s, &p, id) != formula);
        }
    }

    let mut broken_batches = 0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..8);
        let batch: Vec<Vec<f64>> =
            (0..rng.random_range(0..50)).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let bytes = rng.random_range(1..10_000u64);
        let out = fuse_tokens(&batch, rng.random_range(-1.0..=1.0), bytes);
        let conserved = out.group_sizes.iter().sum::<usize>() == batch.len()
            && out.saved_bytes + out.groups() as u64 * bytes == batch.len() as u64 * bytes;
        broken_batches += usize::from(!conserved);
    }

    let mut greedy_misses = 0;
    for seed in 0..500u64 {
        let n = rng.random_range(1..=12);
        let synth = ActivationSynth::<f64>::new(32, seed, 0.0);
        let batch: Vec<Vec<f64>> = (0..n).map(|t| synth.vector(t, 0, rng.random_range(0..5))).collect();
        greedy_misses += usize::from(fuse_tokens(&batch, 0.99, 1).groups() != exact_groups(&batch, 0.99));
    }
    (
        byte_mismatches == 0 && broken_batches == 0 && greedy_misses == 0,
        format!(
            "{byte_mismatches} byte mismatches over 1000 policies, {broken_batches}/1000 batches broke conservation, \
             greedy != exact on {greedy_misses}/500 batches"
        ),
    )
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Minimum number of groups whose members are pairwise at least `tau`
/// similar, by subset dynamic programming.
fn exact_groups(batch: &[Vec<f64>], tau: f64) -> usize {
    let n = batch.len();
    let full = (1usize << n) - 1;
    let mut clique = vec![false; 1 << n];
    clique[0] = true;
    for m in 1..=full {
        let low = m.trailing_zeros() as usize;
        let rest = m & (m - 1);
        clique[m] = clique[rest] && (0..n).filter(|j| rest >> j & 1 == 1).all(|j| cosine(&batch[low], &batch[j]) >= tau);
    }
    let mut best = vec![usize::MAX; 1 << n];
    best[0] = 0;
    for m in 1..=full {
        let low = 1 << m.trailing_zeros();
        let mut sub = m;
        while sub > 0 {
            if sub & low != 0 && clique[sub] && best[m ^ sub] != usize::MAX {
                best[m] = best[m].min(best[m ^ sub] + 1);
            }
            sub = (sub - 1) & m;
        }
    }
    best[full]
}

fn c10_determinism(c: &Calibration) -> Verdict {
    let pairs = [
        ("output_sweep_single.json", &c.single),
        ("output_sweep_two.json", &c.two),
        ("input_sweep_two.json", &c.input_two),
        ("input_sweep_three.json", &c.input_three),
    ];
    let mut differing = Vec::new();
    for (name, first) in pairs {
        let again = run_file(name);
        if first.out.report.to_json().unwrap() != again.out.report.to_json().unwrap() {
            differing.push(name);
        }
    }
    (differing.is_empty(), format!("{} scenarios rerun, differing: {differing:?}", pairs.len()))
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    })
}

fn main() {
    let calibration = catch_unwind(|| Calibration {
        single: run_file("output_sweep_single.json"),
        two: run_file("output_sweep_two.json"),
        input_two: run_file("input_sweep_two.json"),
        input_three: run_file("input_sweep_three.json"),
    })
    .ok();
    let with_cal = |f: fn(&Calibration) -> Verdict| match &calibration {
        Some(c) => guarded(|| f(c)),
        None => (false, "a calibration scenario failed to run".to_string()),
    };

    let results: Vec<(usize, &str, Verdict)> = vec![
        (1, "two-server vs single-server latency ratio", with_cal(c1_latency_ratio)),
        (2, "single-server vs two-server throughput ratio", with_cal(c2_throughput_ratio)),
        (3, "two-server vs three-server trend over input length", with_cal(c3_input_trend)),
        (4, "heuristic placement against the exhaustive oracle", guarded(c4_oracle)),
        (5, "coverage and capacity over randomized plans", guarded(c5_coverage)),
        (6, "hello codec", guarded(c6_hello)),
        (7, "expected crossings against simulation", guarded(c7_monte_carlo)),
        (8, "paging budget, prefetch and budget sweep", guarded(c8_paging)),
        (9, "compression laws", guarded(c9_compression)),
        (10, "byte-identical reports", with_cal(c10_determinism)),
    ];
    let mut failed = 0;
    for (n, name, (ok, detail)) in &results {
        println!("{} criterion {n}: {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
