mod common;

use common::*;
use edgemoe::edgenet::{EdgeTopology, ResourceStatus};
use edgemoe::model::{ExpertRef, MoeModelSpec};
use edgemoe::placement::{
    brute_force_place, expected_objective, internal_mass, place, route_replica, segment_submodels, Placement,
    SubModel,
};
use edgemoe::Error;
use proptest::prelude::*;

fn identity(e: usize) -> Vec<f64> {
    (0..e * e).map(|x| if x / e == x % e { 1.0 } else { 0.0 }).collect()
}

fn objective(p: &Placement, f: &Fixture) -> f64 {
    expected_objective(p, &f.ctx()).unwrap().value()
}

#[test]
fn one_big_server_takes_everything() {
    let s = spec(3, 4, 2);
    let f = Fixture::new(s.clone(), line(1, 1 << 30), kernel_coact(&s, 1, 2.0));
    let seg = segment_submodels(&f.coact, &s, 1, 0).unwrap();
    let p = place(&seg, &f.ctx()).unwrap();
    assert_eq!(p, Placement::single_server(&s, 1));
    assert_eq!(expected_objective(&p, &f.ctx()).unwrap().expected_cross_transitions, 0.0);
}

#[test]
fn half_capacity_forces_one_submodel_per_server() {
    let s = spec(2, 2, 1);
    let half = s.shared_param_bytes + s.total_expert_bytes() / 2;
    let mut topo = line(2, half);
    for srv in &mut topo.servers {
        srv.ssd_bytes = 1;
    }
    // one byte of SSD is not enough for another expert
    let f = Fixture::new(s.clone(), topo, coact_from(&s, vec![identity(2)]));
    let seg = segment_submodels(&f.coact, &s, 2, 0).unwrap();
    let p = place(&seg, &f.ctx()).unwrap();
    assert_eq!(coverage_gaps(&p, &s), 0);
    let mut hosted: Vec<Vec<ExpertRef>> = p.assignment.values().map(|v| v.iter().copied().collect()).collect();
    let mut models: Vec<Vec<ExpertRef>> = seg.submodels.iter().map(|m| {
        let mut v: Vec<_> = m.experts().collect();
        v.sort();
        v
    }).collect();
    hosted.sort();
    models.sort();
    assert_eq!(hosted, models);
}

#[test]
fn heuristic_within_twenty_percent_of_oracle() {
    let mut compared = 0;
    for seed in 0..50u64 {
        let s = spec(2, 3, 1);
        let slack = 1.0 + (seed % 5) as f64 * 0.25;
        let cap = (s.total_expert_bytes() as f64 / 2.0 * slack) as u64 + s.shared_param_bytes;
        let f = Fixture::new(s.clone(), line(2, cap), kernel_coact(&s, seed, 2.0));
        let seg = segment_submodels(&f.coact, &s, 2, 0).unwrap();
        let (Ok(h), Ok(o)) = (place(&seg, &f.ctx()), brute_force_place(&f.ctx())) else { continue };
        compared += 1;
        assert!(objective(&h, &f) <= 1.2 * objective(&o, &f) + 1e-12, "seed {seed}: {} vs {} {:?} {:?}", objective(&h, &f), objective(&o, &f), h, o);
    }
    assert!(compared >= 40);
}

#[test]
fn too_little_capacity_reports_the_shortfall() {
    let s = spec(2, 4, 1);
    let f = Fixture::new(s.clone(), line(2, 4 * MIB), kernel_coact(&s, 3, 1.0));
    let seg = segment_submodels(&f.coact, &s, 2, 0).unwrap();
    match place(&seg, &f.ctx()) {
        Err(Error::Infeasible { shortfall_bytes, .. }) => assert!(shortfall_bytes > 0),
        other => panic!("expected infeasibility, got {other:?}"),
    }
}

#[test]
fn brute_force_keeps_identity_chains_together() {
    let s = spec(2, 2, 1);
    let topo = line(2, s.shared_param_bytes + 2 * MIB);
    let f = Fixture::new(s.clone(), topo, coact_from(&s, vec![identity(2)]));
    let p = brute_force_place(&f.ctx()).unwrap();
    assert_eq!(expected_objective(&p, &f.ctx()).unwrap().expected_cross_transitions, 0.0);
    for e in 0..2 {
        assert_eq!(p.hosts_of(ExpertRef::new(0, e)), p.hosts_of(ExpertRef::new(1, e)));
    }
}

#[test]
fn brute_force_matches_place_on_one_server() {
    let s = spec(2, 3, 1);
    let f = Fixture::new(s.clone(), line(1, 1 << 30), kernel_coact(&s, 9, 1.0));
    let seg = segment_submodels(&f.coact, &s, 1, 0).unwrap();
    assert_eq!(brute_force_place(&f.ctx()).unwrap(), place(&seg, &f.ctx()).unwrap());
}

#[test]
fn brute_force_errors() {
    let s = spec(2, 3, 1);
    let f = Fixture::new(s.clone(), line(2, MIB), kernel_coact(&s, 9, 1.0));
    assert!(matches!(brute_force_place(&f.ctx()), Err(Error::Infeasible { .. })));

    let big = spec(4, 8, 1);
    let f = Fixture::new(big.clone(), line(3, 1 << 30), kernel_coact(&big, 9, 1.0));
    assert!(matches!(brute_force_place(&f.ctx()), Err(Error::SizeGuard { .. })));
}

#[test]
fn diagonal_split_crosses_half_the_time() {
    let s = spec(2, 2, 1);
    let f = Fixture::new(s.clone(), line(2, 1 << 30), coact_from(&s, vec![vec![0.5; 4]]));
    let mut p = Placement::new();
    p.assignment.insert(1, [ExpertRef::new(0, 0), ExpertRef::new(1, 1)].into());
    p.assignment.insert(2, [ExpertRef::new(0, 1), ExpertRef::new(1, 0)].into());
    p.sync_shared_hosts();
    let o = expected_objective(&p, &f.ctx()).unwrap();
    assert!((o.expected_cross_transitions - 0.5).abs() < 1e-12);
}

#[test]
fn single_server_has_no_crossings() {
    let s = spec(3, 4, 2);
    let f = Fixture::new(s.clone(), line(3, 1 << 30), kernel_coact(&s, 4, 1.0));
    let p = Placement::single_server(&s, 2);
    assert_eq!(expected_objective(&p, &f.ctx()).unwrap().expected_cross_transitions, 0.0);
}

fn replicated(s: &MoeModelSpec, x: ExpertRef, hosts: &[u32]) -> Placement {
    let mut p = Placement::single_server(s, 1);
    p.assignment.get_mut(&1).unwrap().remove(&x);
    for &h in hosts {
        p.assignment.entry(h).or_default().insert(x);
    }
    p.sync_shared_hosts();
    p
}

#[test]
fn routing_single_host_is_forced() {
    let s = spec(1, 2, 1);
    let f = Fixture::new(s.clone(), line(3, 1 << 30), kernel_coact(&s, 1, 1.0));
    let x = ExpertRef::new(0, 1);
    let p = replicated(&s, x, &[2]);
    assert_eq!(route_replica(&f.ctx(), x, &p, 1, &f.view), 2);
}

#[test]
fn routing_prefers_the_local_copy() {
    let s = spec(1, 2, 1);
    let mut f = Fixture::new(s.clone(), line(3, 1 << 30), kernel_coact(&s, 1, 1.0));
    f.view.set(1, ResourceStatus::new(50, 100, 0.0));
    let x = ExpertRef::new(0, 1);
    let p = replicated(&s, x, &[1, 2]);
    assert_eq!(route_replica(&f.ctx(), x, &p, 1, &f.view), 1);
}

#[test]
fn routing_avoids_a_saturated_near_host() {
    // token on 1; B = 2 is one hop away but fully loaded, C = 3 two hops and idle
    let s = spec(1, 2, 1);
    let mut f = Fixture::new(s.clone(), line(3, 1 << 30), kernel_coact(&s, 1, 1.0));
    f.view.set(2, ResourceStatus::new(0, 100, 0.0));
    f.view.set(3, ResourceStatus::new(100, 100, 0.0));
    let x = ExpertRef::new(0, 1);
    let p = replicated(&s, x, &[2, 3]);
    let ctx = f.ctx();
    let bits = edgemoe::compression::BitWidth::B16;
    let via_b = ctx.hop_time(1, 2, bits) + ctx.expert_time(2, x) / 0.01;
    let via_c = ctx.hop_time(1, 3, bits) + ctx.expert_time(3, x);
    assert!(via_c < via_b);
    assert_eq!(route_replica(&ctx, x, &p, 1, &f.view), 3);

    // with both idle the nearer copy wins
    f.view.set(2, ResourceStatus::new(100, 100, 0.0));
    assert_eq!(route_replica(&f.ctx(), x, &p, 1, &f.view), 2);
}

/// Best internal mass over all balanced two-way per-layer partitions.
fn best_two_way_mass(f: &Fixture) -> f64 {
    let e = f.spec.experts_per_layer;
    let halves: Vec<u32> = (0u32..1 << e).filter(|m| m.count_ones() as usize == e / 2).collect();
    let mut best: f64 = 0.0;
    for &a in &halves {
        for &b in &halves {
            let sub = |ma: u32, mb: u32| SubModel {
                layers: vec![
                    (0..e).filter(|i| ma >> i & 1 == 1).collect(),
                    (0..e).filter(|i| mb >> i & 1 == 1).collect(),
                ],
            };
            let mask = (1u32 << e) - 1;
            let parts = [sub(a, b), sub(!a & mask, !b & mask)];
            best = best.max(internal_mass(&f.coact, &parts));
        }
    }
    best
}

#[test]
fn segmentation_is_near_the_exhaustive_best() {
    for seed in 0..10 {
        let s = spec(2, 4, 1);
        let f = Fixture::new(s.clone(), line(2, 1 << 30), kernel_coact(&s, seed, 2.0));
        let seg = segment_submodels(&f.coact, &s, 2, 0).unwrap();
        let got = internal_mass(&f.coact, &seg.submodels);
        assert!(got >= 0.8 * best_two_way_mass(&f), "seed {seed}");
    }
}

fn random_instance(seed: u64, layers: usize, experts: usize, servers: u32, slack: f64) -> Fixture {
    let s = spec(layers, experts, 1);
    let need = s.total_bytes() as f64 / servers as f64;
    let topo: EdgeTopology = line(servers, (need * slack) as u64 + s.shared_param_bytes);
    Fixture::new(s.clone(), topo, kernel_coact(&s, seed, 3.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn place_covers_and_fits(seed in 0u64..10_000, layers in 1usize..5, experts in 2usize..7,
                             servers in 1u32..4, slack in 1.0f64..2.5, r in 0usize..4) {
        let f = random_instance(seed, layers, experts, servers, slack);
        let k = (servers as usize).min(experts);
        let seg = segment_submodels(&f.coact, &f.spec, k, r).unwrap();
        prop_assert!(seg.covers(&f.spec));
        prop_assert!(seg.replicated_slots(&f.spec) <= r);
        if let Ok(p) = place(&seg, &f.ctx()) {
            prop_assert_eq!(coverage_gaps(&p, &f.spec), 0);
            prop_assert!(capacity_violations(&p, &f.spec, &f.quant, &f.topology, &f.view).is_empty());
            for s in p.servers() {
                prop_assert!(p.shared_hosts.contains(&s));
            }
        }
    }

    #[test]
    fn oracle_dominates_heuristic(seed in 0u64..10_000, experts in 2usize..4, servers in 1u32..4,
                                  slack in 1.0f64..2.0) {
        let f = random_instance(seed, 2, experts, servers, slack);
        let seg = segment_submodels(&f.coact, &f.spec, (servers as usize).min(experts), 0).unwrap();
        if let (Ok(h), Ok(o)) = (place(&seg, &f.ctx()), brute_force_place(&f.ctx())) {
            prop_assert!(objective(&o, &f) <= objective(&h, &f) + 1e-12);
        }
    }

    #[test]
    fn replicas_never_hurt(seed in 0u64..10_000, experts in 3usize..6, servers in 2u32..4) {
        let f = random_instance(seed, 3, experts, servers, 3.0);
        let k = servers as usize;
        let mut last = f64::INFINITY;
        for r in 0..4 {
            let seg = segment_submodels(&f.coact, &f.spec, k, r).unwrap();
            let v = objective(&place(&seg, &f.ctx()).unwrap(), &f);
            prop_assert!(v <= last + 1e-12, "R={} gave {} after {}", r, v, last);
            last = v;
        }
    }

    #[test]
    fn routing_is_a_pure_function(seed in 0u64..1000, avail in 0u8..=100, current in 1u32..4) {
        let s = spec(1, 2, 1);
        let mut f = Fixture::new(s.clone(), line(3, 1 << 30), kernel_coact(&s, seed, 1.0));
        f.view.set(2, ResourceStatus::new(avail, 100, 0.0));
        let x = ExpertRef::new(0, 0);
        let p = replicated(&s, x, &[2, 3]);
        let a = route_replica(&f.ctx(), x, &p, current, &f.view);
        let b = route_replica(&f.ctx(), x, &p, current, &f.view);
        prop_assert_eq!(a, b);
        prop_assert!(a == 2 || a == 3);
    }
}
