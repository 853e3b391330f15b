use serde::{Deserialize, Serialize};

/// Pruning rule; exactly one mode is active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Drop tokens with importance strictly below the threshold.
    Threshold(f64),
    /// Drop the `floor(p * n)` least important tokens.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub enabled: bool,
    pub mode: PruneMode,
    /// Quality penalty per pruned token.
    pub penalty: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            enabled: false,
            mode: PruneMode::Threshold(0.05),
            penalty: 0.01,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let v = match self.mode {
            PruneMode::Threshold(v) | PruneMode::Fraction(v) => v,
        };
        if !(0.0..=1.0).contains(&v) {
            return Err(crate::Error::config("compression.pruning.mode", "value must lie in [0, 1]"));
        }
        if !(self.penalty >= 0.0) {
            return Err(crate::Error::config("compression.pruning.penalty", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneOutcome {
    /// Indices into the batch, in original order.
    pub retained: Vec<usize>,
    pub pruned: Vec<usize>,
    pub saved_bytes: u64,
}

pub fn prune_tokens(importance: &[f64], mode: PruneMode, bytes_per_token: u64) -> PruneOutcome {
    let n = importance.len();
    let mut drop = vec![false; n];
    match mode {
        PruneMode::Threshold(theta) => {
            for (d, &s) in drop.iter_mut().zip(importance) {
                *d = s < theta;
            }
        }
        PruneMode::Fraction(p) => {
            let m = ((p * n as f64).floor() as usize).min(n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                importance[a]
                    .partial_cmp(&importance[b])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            for &i in &order[..m] {
                drop[i] = true;
            }
        }
    }
    let (pruned, retained): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| drop[i]);
    PruneOutcome {
        saved_bytes: pruned.len() as u64 * bytes_per_token,
        retained,
        pruned,
    }
}
