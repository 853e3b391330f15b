//! GPU/SSD expert residency, popularity prediction and prefetching.

mod cache;
mod popularity;

pub use cache::{Access, AccessKind, ExpertCacheState, InFlight, LoadCommand, PagingStats, PrefetchPlan};
pub(crate) use cache::percentile_with_zeros;
pub use popularity::{predict_ahead, LayerPrediction, Popularity, DEFAULT_BLEND, DEFAULT_DECAY};

use serde::{Deserialize, Serialize};

/// Paging and prefetch settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PagingConfig {
    /// Layers predicted and preloaded ahead of the current one; 0 disables
    /// prefetching.
    pub prefetch_depth: usize,
    /// Predicted experts preloaded per layer; `None` uses the model's top-k.
    pub prefetch_width: Option<usize>,
    pub decay: f64,
    pub blend: f64,
    /// Share of each GPU kept free for activations and workspace.
    pub gpu_reserve_fraction: f64,
}

impl Default for PagingConfig {
    fn default() -> Self {
        PagingConfig {
            prefetch_depth: 2,
            prefetch_width: None,
            decay: DEFAULT_DECAY,
            blend: DEFAULT_BLEND,
            gpu_reserve_fraction: 0.0,
        }
    }
}

impl PagingConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(crate::Error::config("paging.decay", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(crate::Error::config("paging.blend", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.gpu_reserve_fraction) {
            return Err(crate::Error::config("paging.gpu_reserve_fraction", "must lie in [0, 1)"));
        }
        if self.prefetch_width == Some(0) {
            return Err(crate::Error::config("paging.prefetch_width", "must be >= 1"));
        }
        Ok(())
    }
}
