use serde::{Deserialize, Serialize};

/// Penalties accrued over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityLedger {
    pub tokens: u64,
    /// Expert activations a fully processed token makes (`layers * top_k`).
    pub activations_per_token: u64,
    /// Sum over expert-token activations of the precision penalty.
    pub quantization: f64,
    pub fusion: f64,
    pub pruning: f64,
    pub fused_tokens: u64,
    pub pruned_tokens: u64,
}

impl QualityLedger {
    pub fn new(activations_per_token: u64) -> Self {
        QualityLedger {
            activations_per_token,
            ..Default::default()
        }
    }

    pub fn record_fused(&mut self, merged: u64, penalty: f64) {
        self.fused_tokens += merged;
        self.fusion += merged as f64 * penalty;
    }

    pub fn record_pruned(&mut self, pruned: u64, penalty: f64) {
        self.pruned_tokens += pruned;
        self.pruning += pruned as f64 * penalty;
    }

    /// Penalty per token: quantization averaged over a token's activations,
    /// fusion and pruning charged per affected token.
    pub fn per_token_penalty(&self) -> f64 {
        if self.tokens == 0 {
            return 0.0;
        }
        let quant = self.quantization / self.activations_per_token.max(1) as f64;
        (quant + self.fusion + self.pruning) / self.tokens as f64
    }
}

/// `1 - per-token penalty`, clamped to `[0, 1]`.
pub fn quality_score(ledger: &QualityLedger) -> f64 {
    (1.0 - ledger.per_token_penalty()).clamp(0.0, 1.0)
}
