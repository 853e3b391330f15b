//! Segmentation, placement and precision assignment as one step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compression::{assign_bitwidths, BitWidth, PenaltyTable, QuantPolicy};
use crate::edgenet::{EdgeTopology, NeighborView, ServerId};
use crate::error::{Error, Result};
use crate::model::{CoActivation, MoeModelSpec};
use crate::paging::{PagingConfig, Popularity};
use crate::placement::{
    device_expert_budget, expected_objective, place, segment_submodels, server_capacities, ObjectiveWeights,
    Placement, PlacementObjective, PlanContext, Segmentation, DEFAULT_LOW_WATER_PCT,
};
use crate::sim::CostModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    /// Sub-models to cut; defaults to the number of participants.
    pub num_submodels: Option<usize>,
    pub replication_budget: usize,
    pub weights: ObjectiveWeights,
    /// Minimum available compute for a server to keep serving its own copy.
    pub low_water_pct: u8,
    /// Tokens in the profiling trace the co-activation is estimated from.
    pub profile_tokens: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            num_submodels: None,
            replication_budget: 0,
            weights: ObjectiveWeights::default(),
            low_water_pct: DEFAULT_LOW_WATER_PCT,
            profile_tokens: 4096,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_submodels == Some(0) {
            return Err(Error::config("placement.num_submodels", "must be >= 1"));
        }
        if self.low_water_pct > 100 {
            return Err(Error::config("placement.low_water_pct", "must be <= 100"));
        }
        if !(self.weights.alpha_latency >= 0.0) || self.weights.beta_frequency.is_some_and(|b| !(b >= 0.0)) {
            return Err(Error::config("placement.weights", "weights must be >= 0"));
        }
        if self.profile_tokens == 0 {
            return Err(Error::config("placement.profile_tokens", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizationConfig {
    /// Fit experts into GPU memory by lowering the precision of unpopular
    /// ones; when off every expert stays at 16 bits.
    pub enabled: bool,
    pub shared_bits: BitWidth,
    pub penalties: PenaltyTable,
}

impl Default for QuantizationConfig {
    fn default() -> Self {
        QuantizationConfig {
            enabled: false,
            shared_bits: BitWidth::B16,
            penalties: PenaltyTable::default(),
        }
    }
}

/// A complete deployment decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub segmentation: Segmentation,
    pub placement: Placement,
    pub quant: QuantPolicy,
    pub objective: PlacementObjective,
}

#[derive(Debug, Clone, Copy)]
pub struct PlanInputs<'a> {
    pub spec: &'a MoeModelSpec,
    pub topology: &'a EdgeTopology,
    pub participants: &'a [ServerId],
    pub entry: ServerId,
    pub view: &'a NeighborView,
    pub coact: &'a CoActivation<f64>,
    pub popularity: &'a Popularity<f64>,
    pub cost: &'a CostModel,
    pub plan: &'a PlanConfig,
    pub quantization: &'a QuantizationConfig,
    pub paging: &'a PagingConfig,
}

impl PlanInputs<'_> {
    pub fn context<'b>(&'b self, quant: &'b QuantPolicy) -> PlanContext<'b> {
        PlanContext {
            spec: self.spec,
            topology: self.topology,
            participants: self.participants,
            entry: self.entry,
            view: self.view,
            quant,
            cost: self.cost,
            coact: self.coact,
            weights: self.plan.weights,
            low_water_pct: self.plan.low_water_pct,
        }
    }

    /// GPU bytes left for experts on each participant, summed over its GPUs.
    pub fn gpu_expert_budgets(&self, shared_bits: BitWidth) -> BTreeMap<ServerId, u64> {
        let shared = shared_bits.scale_bytes(self.spec.shared_param_bytes);
        self.participants
            .iter()
            .filter_map(|&id| self.topology.server(id).map(|s| (id, s)))
            .map(|(id, s)| {
                let per_gpu =
                    device_expert_budget(s, self.view.avail_gpu_mem_pct(id), shared, self.paging.gpu_reserve_fraction);
                (id, per_gpu * s.gpu_count as u64)
            })
            .collect()
    }
}

/// Segments, places and assigns precisions.
pub fn plan_deployment(inp: &PlanInputs<'_>) -> Result<Deployment> {
    let k = inp.plan.num_submodels.unwrap_or(inp.participants.len()).max(1);
    let segmentation = segment_submodels(inp.coact, inp.spec, k, inp.plan.replication_budget)?;
    let sizing = QuantPolicy {
        shared_bits: inp.quantization.shared_bits,
        servers: BTreeMap::new(),
        penalties: inp.quantization.penalties.clone(),
    };
    let placement = place(&segmentation, &inp.context(&sizing))?;
    let quant = if inp.quantization.enabled {
        assign_bitwidths(
            inp.popularity,
            &placement,
            inp.spec,
            &inp.gpu_expert_budgets(inp.quantization.shared_bits),
            inp.quantization.shared_bits,
            inp.quantization.penalties.clone(),
        )?
    } else {
        QuantPolicy::uniform(&placement, BitWidth::B16, inp.quantization.shared_bits, inp.quantization.penalties.clone())
    };
    let caps = server_capacities(inp.topology, inp.participants, inp.view);
    placement.check_coverage(inp.spec)?;
    placement.check_capacity(inp.spec, &quant, inp.topology, &caps)?;
    let objective = expected_objective(&placement, &inp.context(&quant))?;
    Ok(Deployment {
        segmentation,
        placement,
        quant,
        objective,
    })
}
