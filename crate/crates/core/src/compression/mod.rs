//! Per-expert precision assignment, token fusion and token pruning.

mod fusion;
mod prune;
mod quality;
mod quant;

pub use fusion::{fuse_tokens, FusionConfig, FusionOutcome};
pub use prune::{prune_tokens, PruneConfig, PruneMode, PruneOutcome};
pub use quality::{quality_score, QualityLedger};
pub use quant::{assign_bitwidths, BitWidth, PenaltyTable, QuantPolicy};
