use serde::{Deserialize, Serialize};

use crate::compression::BitWidth;
use crate::edgenet::ServerSpec;
use crate::model::MoeModelSpec;

/// Roofline-style compute and transfer proxy.
///
/// A token's pass through an expert costs `params * flops_per_param` FLOPs,
/// executed at the GPU's effective rate
/// `compute_rate * compute_efficiency / gpu_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModel {
    pub flops_per_param: f64,
    pub compute_efficiency: f64,
    /// Scale expert compute by `bits/16` for quantized experts.
    pub quant_compute_speedup: bool,
    /// Scale transferred activations by the destination expert's `bits/16`.
    pub activation_quantization: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            flops_per_param: 2.0,
            compute_efficiency: 0.4,
            quant_compute_speedup: false,
            activation_quantization: true,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.flops_per_param > 0.0) {
            return Err(crate::Error::config("cost.flops_per_param", "must be > 0"));
        }
        if !(self.compute_efficiency > 0.0 && self.compute_efficiency <= 1.0) {
            return Err(crate::Error::config("cost.compute_efficiency", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Effective FLOP/s of one GPU of `server` at full availability.
    pub fn device_rate(&self, server: &ServerSpec) -> f64 {
        server.compute_rate * self.compute_efficiency / server.gpu_count as f64
    }

    /// Seconds for one token through one expert on one GPU of `server`.
    pub fn expert_compute_time(&self, spec: &MoeModelSpec, server: &ServerSpec, bits: BitWidth) -> f64 {
        let scale = if self.quant_compute_speedup { bits.fraction() } else { 1.0 };
        spec.expert_params() * self.flops_per_param * scale / self.device_rate(server)
    }

    /// Seconds of non-expert work per token per layer.
    pub fn shared_compute_time(&self, spec: &MoeModelSpec, server: &ServerSpec) -> f64 {
        spec.shared_params() / spec.num_layers as f64 * self.flops_per_param / self.device_rate(server)
    }

    /// Bytes of one token's hidden state sent to an expert at `bits`.
    pub fn token_transfer_bytes(&self, spec: &MoeModelSpec, bits: BitWidth) -> f64 {
        let full = spec.activation_bytes() as f64;
        if self.activation_quantization {
            full * bits.fraction()
        } else {
            full
        }
    }
}
