use serde::{Deserialize, Serialize};

use crate::scalar::{cosine_similarity, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub enabled: bool,
    /// Cosine threshold for joining a group.
    pub threshold: f64,
    /// Quality penalty per merged token.
    pub penalty: f64,
    /// Cluster noise of the synthetic activations fed to fusion.
    pub activation_noise: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            enabled: false,
            threshold: 0.95,
            penalty: 0.002,
            activation_noise: crate::model::DEFAULT_CLUSTER_NOISE,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(crate::Error::config("compression.fusion.threshold", "must lie in [-1, 1]"));
        }
        if !(self.penalty >= 0.0) || !(self.activation_noise >= 0.0) {
            return Err(crate::Error::config("compression.fusion", "penalty and noise must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome<T> {
    /// One mean vector per group.
    pub centroids: Vec<Vec<T>>,
    /// Group index of every input token.
    pub membership: Vec<usize>,
    pub group_sizes: Vec<usize>,
    pub saved_bytes: u64,
}

impl<T> FusionOutcome<T> {
    pub fn groups(&self) -> usize {
        self.group_sizes.len()
    }

    /// Tokens folded into an earlier group.
    pub fn merged(&self) -> usize {
        self.membership.len() - self.group_sizes.len()
    }
}

/// First-fit greedy fusion of a batch bound for one (server, expert).
///
/// Tokens are scanned in order; each joins the first group whose running
/// centroid has cosine similarity `>= threshold` with it, or opens a new
/// group.
pub fn fuse_tokens<T: Scalar>(batch: &[Vec<T>], threshold: T, bytes_per_token: u64) -> FusionOutcome<T> {
    let mut sums: Vec<Vec<T>> = Vec::new();
    let mut group_sizes: Vec<usize> = Vec::new();
    let mut membership = Vec::with_capacity(batch.len());
    for v in batch {
        let found = sums.iter().zip(&group_sizes).position(|(sum, &n)| {
            let inv = T::one() / T::of_count(n);
            let centroid: Vec<T> = sum.iter().map(|&x| x * inv).collect();
            cosine_similarity(&centroid, v) >= threshold
        });
        match found {
            Some(g) => {
                for (s, &x) in sums[g].iter_mut().zip(v) {
                    *s = *s + x;
                }
                group_sizes[g] += 1;
                membership.push(g);
            }
            None => {
                sums.push(v.clone());
                group_sizes.push(1);
                membership.push(sums.len() - 1);
            }
        }
    }
    let centroids = sums
        .into_iter()
        .zip(&group_sizes)
        .map(|(s, &n)| {
            let inv = T::one() / T::of_count(n);
            s.into_iter().map(|x| x * inv).collect()
        })
        .collect();
    let saved_bytes = (batch.len() - group_sizes.len()) as u64 * bytes_per_token;
    FusionOutcome {
        centroids,
        membership,
        group_sizes,
        saved_bytes,
    }
}
