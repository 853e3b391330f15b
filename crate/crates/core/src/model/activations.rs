//! Synthetic hidden-state vectors with per-(layer, expert) cluster structure.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::spec::MoeModelSpec;
use super::trace::RoutingTrace;
use crate::scalar::Scalar;

pub const DEFAULT_CLUSTER_NOISE: f64 = 0.5;

const CENTROID_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 finalizer; derives independent sub-seeds.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Deterministic generator for token activation vectors.
///
/// A token routed to expert `e` at layer `l` gets `centroid(l, e) + noise * z`
/// with `z` standard normal, seeded from (token, layer, expert).
#[derive(Debug, Clone)]
pub struct ActivationSynth<T> {
    pub hidden_dim: usize,
    pub seed: u64,
    pub noise: T,
}

impl<T: Scalar> ActivationSynth<T> {
    pub fn new(hidden_dim: usize, seed: u64, noise: T) -> Self {
        ActivationSynth { hidden_dim, seed, noise }
    }

    pub fn for_trace(trace: &RoutingTrace, spec: &MoeModelSpec, noise: T) -> Self {
        Self::new(spec.hidden_dim, trace.token_embedding_seed, noise)
    }

    fn gaussian(&self, seed: u64) -> impl Iterator<Item = T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.hidden_dim).map(move |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z)
        })
    }

    pub fn centroid(&self, layer: usize, expert: usize) -> Vec<T> {
        self.gaussian(derive_seed(self.seed ^ CENTROID_SALT, &[layer as u64, expert as u64]))
            .collect()
    }

    pub fn vector(&self, token: usize, layer: usize, expert: usize) -> Vec<T> {
        let mut v = self.centroid(layer, expert);
        if self.noise != T::zero() {
            let noise = self.gaussian(derive_seed(self.seed, &[token as u64, layer as u64, expert as u64]));
            for (x, z) in v.iter_mut().zip(noise) {
                *x = *x + self.noise * z;
            }
        }
        v
    }
}

/// Activation vectors of every token entering `layer`, clustered by each
/// token's primary expert there.
pub fn synthesize_activations<T: Scalar>(
    trace: &RoutingTrace,
    spec: &MoeModelSpec,
    layer: usize,
    noise: T,
) -> Vec<Vec<T>> {
    let synth = ActivationSynth::for_trace(trace, spec, noise);
    (0..trace.token_count())
        .map(|tok| synth.vector(tok, layer, trace.selections(tok, layer)[0] as usize))
        .collect()
}
