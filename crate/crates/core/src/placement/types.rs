use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::compression::QuantPolicy;
use crate::edgenet::{EdgeTopology, NeighborView, ServerId};
use crate::error::{Error, Result};
use crate::model::{ExpertRef, MoeModelSpec};

/// A full-depth slice of the model: a non-empty expert subset per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModel {
    pub layers: Vec<BTreeSet<usize>>,
}

impl SubModel {
    pub fn experts(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, set)| set.iter().map(move |&e| ExpertRef::new(l, e)))
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, e: ExpertRef) -> bool {
        self.layers[e.layer()].contains(&e.expert())
    }
}

/// An extra copy of an expert granted to another sub-model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaSlot {
    pub submodel: usize,
    pub expert: ExpertRef,
}

/// Sub-models plus the replica copies they were granted, in priority order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub submodels: Vec<SubModel>,
    pub replicas: Vec<ReplicaSlot>,
}

impl Segmentation {
    /// Sub-model `m` without its replica copies.
    pub fn base(&self, m: usize) -> SubModel {
        let mut sm = self.submodels[m].clone();
        for r in self.replicas.iter().filter(|r| r.submodel == m) {
            sm.layers[r.expert.layer()].remove(&r.expert.expert());
        }
        sm
    }

    /// `sum of per-layer set sizes - layers * experts`.
    pub fn replicated_slots(&self, spec: &MoeModelSpec) -> usize {
        let total: usize = self.submodels.iter().map(SubModel::len).sum();
        total.saturating_sub(spec.num_experts())
    }

    pub fn covers(&self, spec: &MoeModelSpec) -> bool {
        (0..spec.num_layers).all(|l| {
            let union: BTreeSet<usize> = self.submodels.iter().flat_map(|m| m.layers[l].iter().copied()).collect();
            union.len() == spec.experts_per_layer
        })
    }
}

/// Expert copies per server, plus the servers holding the shared weights.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Placement {
    pub assignment: BTreeMap<ServerId, BTreeSet<ExpertRef>>,
    pub shared_hosts: BTreeSet<ServerId>,
}

impl Placement {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single_server(spec: &MoeModelSpec, id: ServerId) -> Self {
        let mut p = Placement::new();
        p.assignment.insert(id, spec.experts().collect());
        p.shared_hosts.insert(id);
        p
    }

    pub fn experts_on(&self, server: ServerId) -> impl Iterator<Item = ExpertRef> + '_ {
        self.assignment.get(&server).into_iter().flat_map(|s| s.iter().copied())
    }

    pub fn hosts(&self, server: ServerId, e: ExpertRef) -> bool {
        self.assignment.get(&server).is_some_and(|s| s.contains(&e))
    }

    /// Servers hosting `e`, ascending.
    pub fn hosts_of(&self, e: ExpertRef) -> Vec<ServerId> {
        self.assignment
            .iter()
            .filter(|(_, s)| s.contains(&e))
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn servers(&self) -> impl Iterator<Item = ServerId> + '_ {
        self.assignment.keys().copied()
    }

    /// Marks every server hosting at least one expert as a shared-weight
    /// host and drops empty entries.
    pub fn sync_shared_hosts(&mut self) {
        self.assignment.retain(|_, s| !s.is_empty());
        self.shared_hosts = self.assignment.keys().copied().collect();
    }

    pub fn check_coverage(&self, spec: &MoeModelSpec) -> Result<()> {
        let union: BTreeSet<ExpertRef> = self.assignment.values().flatten().copied().collect();
        if let Some(missing) = spec.experts().find(|e| !union.contains(e)) {
            return Err(Error::Structural(format!("coverage violated: {missing} is hosted nowhere")));
        }
        if let Some(extra) = union
            .iter()
            .find(|e| e.layer() >= spec.num_layers || e.expert() >= spec.experts_per_layer)
        {
            return Err(Error::Structural(format!("placement names {extra}, outside the model")));
        }
        for id in self.assignment.iter().filter(|(_, s)| !s.is_empty()).map(|(id, _)| id) {
            if !self.shared_hosts.contains(id) {
                return Err(Error::Structural(format!(
                    "server {id} executes experts without hosting the shared weights"
                )));
            }
        }
        Ok(())
    }

    /// Bytes resident on `server`: quantized experts plus one copy of the
    /// shared weights per GPU.
    pub fn resident_bytes(&self, spec: &MoeModelSpec, quant: &QuantPolicy, topology: &EdgeTopology, server: ServerId) -> u64 {
        let gpus = topology.server(server).map(|s| s.gpu_count as u64).unwrap_or(1);
        let shared = if self.shared_hosts.contains(&server) {
            quant.shared_bytes(spec) * gpus
        } else {
            0
        };
        shared + quant.server_expert_bytes(spec, self, server)
    }

    pub fn check_capacity(
        &self,
        spec: &MoeModelSpec,
        quant: &QuantPolicy,
        topology: &EdgeTopology,
        capacities: &BTreeMap<ServerId, u64>,
    ) -> Result<()> {
        for &id in self.assignment.keys().chain(self.shared_hosts.iter()) {
            let cap = capacities
                .get(&id)
                .copied()
                .ok_or_else(|| Error::Structural(format!("server {id} has no capacity entry")))?;
            let used = self.resident_bytes(spec, quant, topology, id);
            if used > cap {
                return Err(Error::infeasible(format!("server {id} holds {used} bytes, capacity {cap}"), used - cap));
            }
        }
        Ok(())
    }

    /// `{"<server_id>": [[layer, expert], ...], "shared_hosts": [...]}`
    pub fn to_json_value(&self) -> Value {
        let mut map = Map::new();
        for (id, set) in &self.assignment {
            let list: Vec<Value> = set
                .iter()
                .map(|e| Value::from(vec![Value::from(e.layer), Value::from(e.expert)]))
                .collect();
            map.insert(id.to_string(), Value::from(list));
        }
        map.insert(
            "shared_hosts".into(),
            Value::from(self.shared_hosts.iter().map(|&s| Value::from(s)).collect::<Vec<_>>()),
        );
        Value::Object(map)
    }

    pub fn from_json_value(v: &Value) -> Result<Self> {
        let obj = v
            .as_object()
            .ok_or_else(|| Error::config("placement", "expected a JSON object"))?;
        let mut p = Placement::new();
        for (k, val) in obj {
            if k == "shared_hosts" {
                let list: Vec<ServerId> = serde_json::from_value(val.clone())
                    .map_err(|e| Error::config("placement.shared_hosts", e.to_string()))?;
                p.shared_hosts = list.into_iter().collect();
                continue;
            }
            let id: ServerId = k
                .parse()
                .map_err(|_| Error::config(format!("placement.{k}"), "keys must be server ids or `shared_hosts`"))?;
            let pairs: Vec<(u32, u32)> = serde_json::from_value(val.clone())
                .map_err(|e| Error::config(format!("placement.{k}"), e.to_string()))?;
            p.assignment.insert(
                id,
                pairs.into_iter().map(|(l, e)| ExpertRef { layer: l, expert: e }).collect(),
            );
        }
        Ok(p)
    }
}

/// Bytes each server can hold for this deployment: the available share of
/// its GPU memory plus its SSD.
pub fn server_capacities(topology: &EdgeTopology, participants: &[ServerId], view: &NeighborView) -> BTreeMap<ServerId, u64> {
    participants
        .iter()
        .filter_map(|&id| topology.server(id).map(|s| (id, s)))
        .map(|(id, s)| {
            let gpu = (s.gpu_mem_bytes as f64 * view.avail_gpu_mem_pct(id) as f64 / 100.0).floor() as u64;
            (id, gpu + s.ssd_bytes)
        })
        .collect()
}

/// GPU bytes left for experts on each GPU of `server` after the shared
/// weights and the reserved working set.
pub fn device_expert_budget(
    server: &crate::edgenet::ServerSpec,
    avail_gpu_mem_pct: u8,
    shared_bytes: u64,
    reserve_fraction: f64,
) -> u64 {
    let per_gpu = server.gpu_mem_bytes as f64 / server.gpu_count as f64 * avail_gpu_mem_pct as f64 / 100.0;
    let usable = (per_gpu * (1.0 - reserve_fraction)).floor() as u64;
    usable.saturating_sub(shared_bytes)
}
