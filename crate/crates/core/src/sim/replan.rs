use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::compression::{BitWidth, QuantPolicy};
use crate::edgenet::{EdgeTopology, ServerId};
use crate::error::{Error, Result};
use crate::model::{ExpertRef, MoeModelSpec};
use crate::paging::Popularity;
use crate::placement::Placement;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplanTriggerConfig {
    pub enabled: bool,
    /// Mean per-layer total-variation distance that triggers a replan.
    pub divergence_threshold: f64,
    /// Percentage-point change of any advertised resource that triggers a
    /// replan.
    pub resource_threshold_pct: f64,
    pub check_period_s: f64,
}

impl Default for ReplanTriggerConfig {
    fn default() -> Self {
        ReplanTriggerConfig {
            enabled: false,
            divergence_threshold: 0.2,
            resource_threshold_pct: 20.0,
            check_period_s: 5.0,
        }
    }
}

impl ReplanTriggerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.divergence_threshold > 0.0 && self.divergence_threshold <= 1.0) {
            return Err(Error::config("replan.divergence_threshold", "must lie in (0, 1]"));
        }
        if !(self.resource_threshold_pct >= 0.0) {
            return Err(Error::config("replan.resource_threshold_pct", "must be >= 0"));
        }
        if !(self.check_period_s > 0.0) {
            return Err(Error::config("replan.check_period_s", "must be > 0"));
        }
        Ok(())
    }
}

/// Advertised `(compute %, GPU memory %)` per server.
pub type ResourceSnapshot = BTreeMap<ServerId, (u8, u8)>;

/// Whether popularity drifted or advertised resources moved enough since the
/// last plan to warrant planning again.
pub fn check_replan(
    baseline: &Popularity<f64>,
    current: &Popularity<f64>,
    resources_at_plan: &ResourceSnapshot,
    resources_now: &ResourceSnapshot,
    cfg: &ReplanTriggerConfig,
) -> bool {
    if current.divergence(baseline) > cfg.divergence_threshold {
        return true;
    }
    resources_now.iter().any(|(id, &(c, m))| {
        let (c0, m0) = resources_at_plan.get(id).copied().unwrap_or((100, 100));
        (c as f64 - c0 as f64).abs() > cfg.resource_threshold_pct
            || (m as f64 - m0 as f64).abs() > cfg.resource_threshold_pct
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UpgradeSource {
    Peer(ServerId),
    Cloud,
}

/// Cheapest source of `expert` at `target` bits for `requester`.
///
/// Peers qualify when they hold the expert at `target` bits or more and
/// send `target`-bit bytes; the cloud always sends full precision. Ties go
/// to peers, then to the smallest id.
pub fn precision_upgrade(
    requester: ServerId,
    expert: ExpertRef,
    target: BitWidth,
    placement: &Placement,
    quant: &QuantPolicy,
    topology: &EdgeTopology,
    spec: &MoeModelSpec,
) -> Result<(UpgradeSource, f64)> {
    if let Some(current) = placement.hosts(requester, expert).then(|| quant.bits_or_full(requester, expert)) {
        if target <= current {
            return Err(Error::UpgradeUnavailable(format!(
                "{expert} on server {requester} is already at {} bits, {} requested",
                current.bits(),
                target.bits()
            )));
        }
    }
    let bytes = target.scale_bytes(spec.expert_param_bytes) as f64;
    let mut best: Option<(f64, UpgradeSource)> = None;
    for peer in placement.hosts_of(expert).into_iter().filter(|&p| p != requester) {
        if quant.bits_or_full(peer, expert) < target {
            continue;
        }
        if let Some(t) = topology.path_transfer_time(bytes, peer, requester) {
            if best.is_none_or(|(b, _)| t < b) {
                best = Some((t, UpgradeSource::Peer(peer)));
            }
        }
    }
    if let Some(cloud) = &topology.cloud_link {
        let t = cloud.propagation_latency + spec.expert_param_bytes as f64 / cloud.bandwidth;
        if best.is_none_or(|(b, _)| t < b) {
            best = Some((t, UpgradeSource::Cloud));
        }
    }
    best.map(|(t, s)| (s, t)).ok_or_else(|| {
        Error::UpgradeUnavailable(format!(
            "no peer holds {expert} at {} bits or more and there is no cloud uplink",
            target.bits()
        ))
    })
}

/// One expert copy the new plan needs that the old one lacks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MigrationMove {
    pub server: ServerId,
    pub expert: ExpertRef,
    pub bits: BitWidth,
    pub bytes: u64,
    pub source: UpgradeSource,
}

/// Copies to fetch when switching from the old to the new deployment.
///
/// A copy moves when its server did not hold the expert before, or held it
/// at fewer bits. Same-precision moves fetch from the nearest old host;
/// up-bit moves go through [`precision_upgrade`].
pub fn migration_moves(
    old: (&Placement, &QuantPolicy),
    new: (&Placement, &QuantPolicy),
    topology: &EdgeTopology,
    spec: &MoeModelSpec,
) -> Result<Vec<MigrationMove>> {
    let mut moves = Vec::new();
    for (&server, set) in &new.0.assignment {
        for &x in set {
            let want = new.1.bits_or_full(server, x);
            let had = old.0.hosts(server, x).then(|| old.1.bits_or_full(server, x));
            if had.is_some_and(|h| h >= want) {
                continue;
            }
            let bytes = want.scale_bytes(spec.expert_param_bytes);
            let (source, _) = precision_upgrade(server, x, want, old.0, old.1, topology, spec)?;
            let bytes = if source == UpgradeSource::Cloud { spec.expert_param_bytes } else { bytes };
            moves.push(MigrationMove {
                server,
                expert: x,
                bits: want,
                bytes,
                source,
            });
        }
    }
    Ok(moves)
}
