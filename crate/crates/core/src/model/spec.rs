use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Geometry of the simulated MoE model.
///
/// Byte sizes are at full (16-bit) precision. A parameter therefore occupies
/// two bytes, and quantizing an expert to `b` bits scales its size by `b/16`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeModelSpec {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub expert_param_bytes: u64,
    pub shared_param_bytes: u64,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub activation_bytes_per_element: u64,
}

/// Bytes per parameter at full precision.
pub const FULL_PRECISION_BYTES_PER_PARAM: u64 = 2;

impl MoeModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("model.num_layers", "must be at least 1"));
        }
        if self.experts_per_layer == 0 {
            return Err(Error::config("model.experts_per_layer", "must be at least 1"));
        }
        if self.experts_per_layer > u16::MAX as usize + 1 {
            return Err(Error::config("model.experts_per_layer", "at most 65536 experts per layer"));
        }
        if self.top_k == 0 || self.top_k > self.experts_per_layer {
            return Err(Error::config(
                "model.top_k",
                format!("must lie in [1, {}]", self.experts_per_layer),
            ));
        }
        if self.hidden_dim == 0 {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        if self.activation_bytes_per_element == 0 {
            return Err(Error::config("model.activation_bytes_per_element", "must be at least 1"));
        }
        Ok(())
    }

    pub fn num_experts(&self) -> usize {
        self.num_layers * self.experts_per_layer
    }

    /// `shared + layers * experts * expert_bytes`, at full precision.
    pub fn total_bytes(&self) -> u64 {
        self.shared_param_bytes + self.num_experts() as u64 * self.expert_param_bytes
    }

    pub fn total_expert_bytes(&self) -> u64 {
        self.num_experts() as u64 * self.expert_param_bytes
    }

    pub fn expert_params(&self) -> f64 {
        self.expert_param_bytes as f64 / FULL_PRECISION_BYTES_PER_PARAM as f64
    }

    pub fn shared_params(&self) -> f64 {
        self.shared_param_bytes as f64 / FULL_PRECISION_BYTES_PER_PARAM as f64
    }

    /// Size of one token's hidden state at full precision.
    pub fn activation_bytes(&self) -> u64 {
        self.hidden_dim as u64 * self.activation_bytes_per_element
    }

    pub fn expert_ref(&self, layer: usize, expert: usize) -> Result<ExpertRef> {
        if layer >= self.num_layers || expert >= self.experts_per_layer {
            return Err(Error::Structural(format!(
                "expert ({layer}, {expert}) outside a {}x{} model",
                self.num_layers, self.experts_per_layer
            )));
        }
        Ok(ExpertRef::new(layer, expert))
    }

    /// Every expert of the model in (layer, expert) order.
    pub fn experts(&self) -> impl Iterator<Item = ExpertRef> + '_ {
        (0..self.num_layers)
            .flat_map(move |l| (0..self.experts_per_layer).map(move |e| ExpertRef::new(l, e)))
    }

    /// Stable content hash used in serialized trace headers.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }
}

/// One expert of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExpertRef {
    pub layer: u32,
    pub expert: u32,
}

impl ExpertRef {
    pub fn new(layer: usize, expert: usize) -> Self {
        ExpertRef {
            layer: layer as u32,
            expert: expert as u32,
        }
    }

    pub fn layer(self) -> usize {
        self.layer as usize
    }

    pub fn expert(self) -> usize {
        self.expert as usize
    }

    /// Dense index into `num_layers * experts_per_layer` arrays.
    pub fn flat(self, experts_per_layer: usize) -> usize {
        self.layer() * experts_per_layer + self.expert()
    }
}

impl std::fmt::Display for ExpertRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "e{}@{}", self.expert, self.layer)
    }
}
