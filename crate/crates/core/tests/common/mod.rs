#![allow(dead_code)]

use std::collections::BTreeMap;

use edgemoe::compression::{BitWidth, PenaltyTable, QuantPolicy};
use edgemoe::edgenet::{CloudLink, EdgeTopology, LinkSpec, NeighborView, ServerId, ServerSpec};
use edgemoe::model::{CoActivation, LengthDist, MoeModelSpec, RoutingKernel, WorkloadParams};
use edgemoe::placement::{ObjectiveWeights, PlanContext, DEFAULT_LOW_WATER_PCT};
use edgemoe::sim::CostModel;

pub const MIB: u64 = 1 << 20;

pub fn spec(layers: usize, experts: usize, k: usize) -> MoeModelSpec {
    MoeModelSpec {
        num_layers: layers,
        experts_per_layer: experts,
        expert_param_bytes: MIB,
        shared_param_bytes: 4 * MIB,
        top_k: k,
        hidden_dim: 512,
        activation_bytes_per_element: 2,
    }
}

pub fn server(id: ServerId, gpu_mem_bytes: u64) -> ServerSpec {
    ServerSpec {
        id,
        gpu_mem_bytes,
        host_mem_bytes: 1 << 30,
        ssd_bytes: 1,
        compute_rate: 1e12,
        intra_bus_bandwidth: 16e9,
        gpu_count: 1,
        intra_bus_latency_s: 0.0,
    }
}

pub fn link(a: ServerId, b: ServerId, bandwidth: f64, latency: f64) -> LinkSpec {
    LinkSpec {
        endpoints: [a, b],
        bandwidth,
        propagation_latency: latency,
    }
}

/// Servers `1..=n` in a line, 1 GB/s and 0.1 ms per link.
pub fn line(n: u32, gpu_mem_bytes: u64) -> EdgeTopology {
    EdgeTopology {
        servers: (1..=n).map(|id| server(id, gpu_mem_bytes)).collect(),
        links: (1..n).map(|a| link(a, a + 1, 1e9, 1e-4)).collect(),
        cloud_link: Some(CloudLink {
            bandwidth: 1e7,
            propagation_latency: 0.05,
        }),
    }
}

pub fn workload(seed: u64, concentration: f64) -> WorkloadParams {
    WorkloadParams {
        num_requests: 1,
        input_len: LengthDist::Fixed(1),
        output_len: LengthDist::Fixed(1),
        zipf_s: 0.8,
        concentration,
        kernel_seed: seed,
    }
}

pub fn kernel_coact(spec: &MoeModelSpec, seed: u64, concentration: f64) -> CoActivation<f64> {
    CoActivation::from_kernel(spec, &RoutingKernel::new(spec, &workload(seed, concentration)))
}

/// Coactivation with uniform first-layer marginals and the given transition
/// matrices.
pub fn coact_from(spec: &MoeModelSpec, transitions: Vec<Vec<f64>>) -> CoActivation<f64> {
    let e = spec.experts_per_layer;
    let mut c = CoActivation {
        num_layers: spec.num_layers,
        experts_per_layer: e,
        marginals: vec![vec![1.0 / e as f64; e]; spec.num_layers],
        transitions,
    };
    c.marginals = c.propagated_marginals();
    c
}

pub fn full_precision() -> QuantPolicy {
    QuantPolicy {
        shared_bits: BitWidth::B16,
        servers: BTreeMap::new(),
        penalties: PenaltyTable::default(),
    }
}

/// Owns everything a [`PlanContext`] borrows.
pub struct Fixture {
    pub spec: MoeModelSpec,
    pub topology: EdgeTopology,
    pub participants: Vec<ServerId>,
    pub view: NeighborView,
    pub quant: QuantPolicy,
    pub cost: CostModel,
    pub coact: CoActivation<f64>,
}

impl Fixture {
    pub fn new(spec: MoeModelSpec, topology: EdgeTopology, coact: CoActivation<f64>) -> Self {
        let participants = topology.servers.iter().map(|s| s.id).collect();
        Fixture {
            spec,
            topology,
            participants,
            view: NeighborView::new(),
            quant: full_precision(),
            cost: CostModel::default(),
            coact,
        }
    }

    pub fn ctx(&self) -> PlanContext<'_> {
        PlanContext {
            spec: &self.spec,
            topology: &self.topology,
            participants: &self.participants,
            entry: self.participants[0],
            view: &self.view,
            quant: &self.quant,
            cost: &self.cost,
            coact: &self.coact,
            weights: ObjectiveWeights::default(),
            low_water_pct: DEFAULT_LOW_WATER_PCT,
        }
    }

    /// Bytes of shared weights plus every expert at full precision.
    pub fn model_bytes(&self) -> u64 {
        self.spec.total_bytes()
    }
}

/// Recomputes each server's resident bytes from scratch and compares them
/// with its capacity; returns the violations.
pub fn capacity_violations(
    placement: &edgemoe::placement::Placement,
    spec: &MoeModelSpec,
    quant: &QuantPolicy,
    topology: &EdgeTopology,
    view: &NeighborView,
) -> Vec<(ServerId, u64, u64)> {
    let mut out = Vec::new();
    for (&id, experts) in &placement.assignment {
        let s = topology.server(id).unwrap();
        let shared = quant.shared_bits.scale_bytes(spec.shared_param_bytes) * s.gpu_count as u64;
        let bytes: u64 = shared
            + experts
                .iter()
                .map(|&x| quant.bits_or_full(id, x).scale_bytes(spec.expert_param_bytes))
                .sum::<u64>();
        let cap = s.gpu_mem_bytes * view.avail_gpu_mem_pct(id) as u64 / 100 + s.ssd_bytes;
        if bytes > cap {
            out.push((id, bytes, cap));
        }
    }
    out
}

/// Experts no server hosts.
pub fn coverage_gaps(placement: &edgemoe::placement::Placement, spec: &MoeModelSpec) -> usize {
    spec.experts().filter(|&x| placement.hosts_of(x).is_empty()).count()
}
