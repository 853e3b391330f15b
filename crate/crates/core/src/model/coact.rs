use serde::{Deserialize, Serialize};

use super::spec::MoeModelSpec;
use super::trace::{RoutingKernel, RoutingTrace};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Transition probabilities between experts of adjacent layers, plus the
/// per-layer activation marginals they were estimated alongside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoActivation<T> {
    pub num_layers: usize,
    pub experts_per_layer: usize,
    /// `marginals[l][i]`: share of layer-`l` selections that went to expert `i`.
    pub marginals: Vec<Vec<T>>,
    /// One row-major `experts x experts` matrix per adjacent layer pair.
    pub transitions: Vec<Vec<T>>,
}

impl<T: Scalar> CoActivation<T> {
    pub fn zeros(num_layers: usize, experts_per_layer: usize) -> Self {
        CoActivation {
            num_layers,
            experts_per_layer,
            marginals: vec![vec![T::zero(); experts_per_layer]; num_layers],
            transitions: vec![
                vec![T::zero(); experts_per_layer * experts_per_layer];
                num_layers.saturating_sub(1)
            ],
        }
    }

    pub fn get(&self, pair: usize, from: usize, to: usize) -> T {
        self.transitions[pair][from * self.experts_per_layer + to]
    }

    pub fn row(&self, pair: usize, from: usize) -> &[T] {
        let e = self.experts_per_layer;
        &self.transitions[pair][from * e..(from + 1) * e]
    }

    pub fn num_pairs(&self) -> usize {
        self.transitions.len()
    }

    pub fn check_against(&self, spec: &MoeModelSpec) -> Result<()> {
        if self.num_layers != spec.num_layers || self.experts_per_layer != spec.experts_per_layer {
            return Err(Error::Structural(format!(
                "co-activation is {}x{}, model is {}x{}",
                self.num_layers, self.experts_per_layer, spec.num_layers, spec.experts_per_layer
            )));
        }
        Ok(())
    }

    /// Per-layer marginals induced by the kernel: layer 0 as estimated,
    /// `pi[l+1] = pi[l] * P_l` afterwards. Zero rows leak their mass, which
    /// only happens for experts that were never observed.
    pub fn propagated_marginals(&self) -> Vec<Vec<T>> {
        let e = self.experts_per_layer;
        let mut out = Vec::with_capacity(self.num_layers);
        out.push(self.marginals[0].clone());
        for pair in 0..self.num_pairs() {
            let prev = &out[pair];
            let mut next = vec![T::zero(); e];
            for (i, &pi) in prev.iter().enumerate() {
                if pi == T::zero() {
                    continue;
                }
                for (n, &p) in next.iter_mut().zip(self.row(pair, i)) {
                    *n = *n + pi * p;
                }
            }
            out.push(next);
        }
        out
    }

    pub fn convert<U: Scalar>(&self) -> CoActivation<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect::<Vec<U>>();
        CoActivation {
            num_layers: self.num_layers,
            experts_per_layer: self.experts_per_layer,
            marginals: self.marginals.iter().map(cv).collect(),
            transitions: self.transitions.iter().map(cv).collect(),
        }
    }

    /// Exact statistics of a generator kernel (marginals propagated from the
    /// Zipf first layer).
    pub fn from_kernel(spec: &MoeModelSpec, kernel: &RoutingKernel) -> Self {
        let mut c = Self::zeros(spec.num_layers, spec.experts_per_layer);
        c.marginals[0] = kernel.first_layer.iter().map(|&w| T::of(w)).collect();
        for (dst, src) in c.transitions.iter_mut().zip(&kernel.transitions) {
            *dst = src.iter().map(|&w| T::of(w)).collect();
        }
        let pm = c.propagated_marginals();
        c.marginals = pm;
        c
    }
}

/// Maximum-likelihood transition estimate from a trace.
///
/// With `top_k > 1` every (from, to) pair of one token's consecutive
/// selections receives weight `1/k`, so observed rows still sum to one.
pub fn estimate_coactivation<T: Scalar>(trace: &RoutingTrace, spec: &MoeModelSpec) -> Result<CoActivation<T>> {
    trace.check_against(spec)?;
    if trace.is_empty() {
        return Err(Error::Structural("cannot estimate co-activation from an empty trace".into()));
    }
    let (layers, e, k) = (spec.num_layers, spec.experts_per_layer, spec.top_k);
    let mut counts = CoActivationCounts::new(layers, e);
    for tok in 0..trace.token_count() {
        for l in 0..layers {
            counts.observe_layer(l, trace.selections(tok, l), (l + 1 < layers).then(|| trace.selections(tok, l + 1)), k);
        }
    }
    Ok(counts.finish())
}

/// Streaming transition counter, also used by the simulator to re-estimate
/// statistics before a replan.
#[derive(Debug, Clone)]
pub struct CoActivationCounts {
    layers: usize,
    experts: usize,
    marginal: Vec<Vec<f64>>,
    pair: Vec<Vec<f64>>,
}

impl CoActivationCounts {
    pub fn new(layers: usize, experts: usize) -> Self {
        CoActivationCounts {
            layers,
            experts,
            marginal: vec![vec![0.0; experts]; layers],
            pair: vec![vec![0.0; experts * experts]; layers.saturating_sub(1)],
        }
    }

    pub fn observe_layer(&mut self, layer: usize, here: &[u16], next: Option<&[u16]>, k: usize) {
        for &i in here {
            self.marginal[layer][i as usize] += 1.0;
        }
        if let Some(next) = next {
            let w = 1.0 / k as f64;
            let m = &mut self.pair[layer];
            for &i in here {
                for &j in next {
                    m[i as usize * self.experts + j as usize] += w;
                }
            }
        }
    }

    pub fn observe_token(&mut self, trace: &RoutingTrace, token: usize) {
        for l in 0..self.layers {
            let next = (l + 1 < self.layers).then(|| trace.selections(token, l + 1));
            self.observe_layer(l, trace.selections(token, l), next, trace.top_k);
        }
    }

    pub fn total_observations(&self) -> f64 {
        self.marginal.first().map(|m| m.iter().sum()).unwrap_or(0.0)
    }

    pub fn finish<T: Scalar>(&self) -> CoActivation<T> {
        let e = self.experts;
        let mut out = CoActivation::zeros(self.layers, e);
        for (l, counts) in self.marginal.iter().enumerate() {
            let total: f64 = counts.iter().sum();
            if total > 0.0 {
                out.marginals[l] = counts.iter().map(|&c| T::of(c / total)).collect();
            }
        }
        for (pair, m) in self.pair.iter().enumerate() {
            let dst = &mut out.transitions[pair];
            for i in 0..e {
                let row = &m[i * e..(i + 1) * e];
                let total: f64 = row.iter().sum();
                if total > 0.0 {
                    for j in 0..e {
                        dst[i * e + j] = T::of(row[j] / total);
                    }
                }
            }
        }
        out
    }
}
