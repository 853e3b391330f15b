use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::edgenet::ServerId;
use crate::error::{Error, Result};
use crate::model::{ExpertRef, MoeModelSpec};
use crate::paging::Popularity;
use crate::placement::Placement;
use crate::scalar::Scalar;

/// Supported weight precisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum BitWidth {
    B4,
    B8,
    B16,
}

impl BitWidth {
    pub const ALL_DESC: [BitWidth; 3] = [BitWidth::B16, BitWidth::B8, BitWidth::B4];

    pub fn bits(self) -> u8 {
        match self {
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::B16 => 16,
        }
    }

    /// `full_bytes * bits / 16`, rounded down.
    pub fn scale_bytes(self, full_bytes: u64) -> u64 {
        full_bytes * self.bits() as u64 / 16
    }

    pub fn fraction(self) -> f64 {
        self.bits() as f64 / 16.0
    }
}

impl TryFrom<u8> for BitWidth {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            4 => Ok(BitWidth::B4),
            8 => Ok(BitWidth::B8),
            16 => Ok(BitWidth::B16),
            other => Err(format!("unsupported bit-width {other}; expected 4, 8 or 16")),
        }
    }
}

impl From<BitWidth> for u8 {
    fn from(b: BitWidth) -> u8 {
        b.bits()
    }
}

/// Quality penalty per expert-token activation at each precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyTable {
    pub b16: f64,
    pub b8: f64,
    pub b4: f64,
}

impl Default for PenaltyTable {
    fn default() -> Self {
        PenaltyTable {
            b16: 0.0,
            b8: 0.001,
            b4: 0.005,
        }
    }
}

impl PenaltyTable {
    pub fn penalty(&self, b: BitWidth) -> f64 {
        match b {
            BitWidth::B16 => self.b16,
            BitWidth::B8 => self.b8,
            BitWidth::B4 => self.b4,
        }
    }
}

/// Per-server, per-expert precision. A replicated expert may carry a
/// different precision on each server that hosts it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantPolicy {
    pub shared_bits: BitWidth,
    #[serde(with = "server_bits")]
    pub servers: BTreeMap<ServerId, BTreeMap<ExpertRef, BitWidth>>,
    pub penalties: PenaltyTable,
}

mod server_bits {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        m: &BTreeMap<ServerId, BTreeMap<ExpertRef, BitWidth>>,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let flat: BTreeMap<String, Vec<(u32, u32, BitWidth)>> = m
            .iter()
            .map(|(id, ex)| (id.to_string(), ex.iter().map(|(e, b)| (e.layer, e.expert, *b)).collect()))
            .collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<BTreeMap<ServerId, BTreeMap<ExpertRef, BitWidth>>, D::Error> {
        let flat: BTreeMap<String, Vec<(u32, u32, BitWidth)>> = BTreeMap::deserialize(d)?;
        flat.into_iter()
            .map(|(id, v)| {
                let id: ServerId = id.parse().map_err(serde::de::Error::custom)?;
                Ok((
                    id,
                    v.into_iter()
                        .map(|(l, e, b)| (ExpertRef { layer: l, expert: e }, b))
                        .collect(),
                ))
            })
            .collect()
    }
}

impl QuantPolicy {
    /// Every hosted expert copy at `bits`.
    pub fn uniform(placement: &Placement, bits: BitWidth, shared_bits: BitWidth, penalties: PenaltyTable) -> Self {
        let servers = placement
            .assignment
            .iter()
            .map(|(id, set)| (*id, set.iter().map(|e| (*e, bits)).collect()))
            .collect();
        QuantPolicy {
            shared_bits,
            servers,
            penalties,
        }
    }

    pub fn full_precision(placement: &Placement) -> Self {
        Self::uniform(placement, BitWidth::B16, BitWidth::B16, PenaltyTable::default())
    }

    pub fn bits(&self, server: ServerId, e: ExpertRef) -> Option<BitWidth> {
        self.servers.get(&server).and_then(|m| m.get(&e)).copied()
    }

    /// Precision of `e` on `server`, full precision when unspecified.
    pub fn bits_or_full(&self, server: ServerId, e: ExpertRef) -> BitWidth {
        self.bits(server, e).unwrap_or(BitWidth::B16)
    }

    pub fn expert_bytes(&self, spec: &MoeModelSpec, server: ServerId, e: ExpertRef) -> u64 {
        self.bits_or_full(server, e).scale_bytes(spec.expert_param_bytes)
    }

    pub fn shared_bytes(&self, spec: &MoeModelSpec) -> u64 {
        self.shared_bits.scale_bytes(spec.shared_param_bytes)
    }

    /// Sum of quantized expert bytes hosted by `server`.
    pub fn server_expert_bytes(&self, spec: &MoeModelSpec, placement: &Placement, server: ServerId) -> u64 {
        placement
            .experts_on(server)
            .map(|e| self.expert_bytes(spec, server, e))
            .sum()
    }

    /// Every placed expert copy has an entry.
    pub fn covers(&self, placement: &Placement) -> bool {
        placement
            .assignment
            .iter()
            .all(|(id, set)| set.iter().all(|e| self.bits(*id, *e).is_some()))
    }
}

/// Popularity-ordered greedy precision assignment.
///
/// Per server, experts are visited in descending popularity and each takes
/// the widest precision that still leaves room for every remaining expert at
/// 4 bits. `budgets` holds the bytes available for expert weights on each
/// server. Fails when even an all-4-bit assignment does not fit.
pub fn assign_bitwidths<T: Scalar>(
    popularity: &Popularity<T>,
    placement: &Placement,
    spec: &MoeModelSpec,
    budgets: &BTreeMap<ServerId, u64>,
    shared_bits: BitWidth,
    penalties: PenaltyTable,
) -> Result<QuantPolicy> {
    let full = spec.expert_param_bytes;
    let min_bytes = BitWidth::B4.scale_bytes(full);
    let mut servers = BTreeMap::new();
    for (&id, hosted) in &placement.assignment {
        let budget = *budgets
            .get(&id)
            .ok_or_else(|| Error::config(format!("budgets.{id}"), "no memory budget for server"))?;
        let mut order: Vec<ExpertRef> = hosted.iter().copied().collect();
        order.sort_by(|a, b| {
            popularity
                .score(*b)
                .partial_cmp(&popularity.score(*a))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(b))
        });
        let floor = min_bytes * order.len() as u64;
        if floor > budget {
            return Err(Error::infeasible(
                format!("server {id}: {} experts exceed its budget even at 4 bits", order.len()),
                floor - budget,
            ));
        }
        let mut used = 0u64;
        let mut cap = BitWidth::B16;
        let mut bits = BTreeMap::new();
        for (idx, e) in order.iter().enumerate() {
            let rest = min_bytes * (order.len() - idx - 1) as u64;
            let b = BitWidth::ALL_DESC
                .into_iter()
                .filter(|b| *b <= cap)
                .find(|b| used + b.scale_bytes(full) + rest <= budget)
                .expect("4-bit floor fits");
            used += b.scale_bytes(full);
            cap = b;
            bits.insert(*e, b);
        }
        servers.insert(id, bits);
    }
    Ok(QuantPolicy {
        shared_bits,
        servers,
        penalties,
    })
}
