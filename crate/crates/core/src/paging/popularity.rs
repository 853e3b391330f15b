use serde::{Deserialize, Serialize};

use crate::model::{CoActivation, ExpertRef, MoeModelSpec};
use crate::scalar::{normalize, Scalar};

pub const DEFAULT_DECAY: f64 = 0.98;
pub const DEFAULT_BLEND: f64 = 0.5;

/// Exponentially weighted per-layer activation frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Popularity<T> {
    pub decay: T,
    /// `scores[layer][expert]`, each layer a probability vector.
    pub scores: Vec<Vec<T>>,
}

impl<T: Scalar> Popularity<T> {
    pub fn uniform(spec: &MoeModelSpec, decay: T) -> Self {
        let u = T::one() / T::of_count(spec.experts_per_layer);
        Popularity {
            decay,
            scores: vec![vec![u; spec.experts_per_layer]; spec.num_layers],
        }
    }

    /// Seeds the scores with known per-layer marginals.
    pub fn from_marginals(marginals: &[Vec<T>], decay: T) -> Self {
        let mut scores = marginals.to_vec();
        for row in &mut scores {
            if row.iter().all(|&x| x == T::zero()) {
                let u = T::one() / T::of_count(row.len());
                row.iter_mut().for_each(|x| *x = u);
            }
            normalize(row);
        }
        Popularity { decay, scores }
    }

    pub fn score(&self, e: ExpertRef) -> T {
        self.scores[e.layer()][e.expert()]
    }

    pub fn layer(&self, layer: usize) -> &[T] {
        &self.scores[layer]
    }

    /// `freq' = decay * freq + (1 - decay) * [selected]`, renormalized, for
    /// every layer touched by `observed`.
    pub fn update(&mut self, observed: impl IntoIterator<Item = ExpertRef>) {
        let mut hits: Vec<Vec<usize>> = vec![Vec::new(); self.scores.len()];
        for e in observed {
            hits[e.layer()].push(e.expert());
        }
        let keep = self.decay;
        let add = T::one() - self.decay;
        for (row, hit) in self.scores.iter_mut().zip(&hits) {
            if hit.is_empty() {
                continue;
            }
            row.iter_mut().for_each(|x| *x = keep * *x);
            for &e in hit {
                row[e] = row[e] + add;
            }
            normalize(row);
        }
    }

    /// Mean over layers of the per-layer total variation distance.
    pub fn divergence(&self, other: &Popularity<T>) -> T {
        let n = self.scores.len().max(1);
        let sum: T = self
            .scores
            .iter()
            .zip(&other.scores)
            .map(|(a, b)| crate::scalar::total_variation(a, b))
            .sum();
        sum / T::of_count(n)
    }

    pub fn convert<U: Scalar>(&self) -> Popularity<U> {
        Popularity {
            decay: U::of(self.decay.as_f64()),
            scores: self
                .scores
                .iter()
                .map(|r| r.iter().map(|x| U::of(x.as_f64())).collect())
                .collect(),
        }
    }
}

/// Ranked expert predictions for each layer after the current one.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction<T> {
    pub layer: usize,
    /// `(expert, score)` in descending score order.
    pub ranked: Vec<(usize, T)>,
}

/// Predicts the experts of layers `layer+1 ..= layer+depth`.
///
/// The next layer is scored by `sum_{i in current} P[i][j]`; each deeper
/// layer `l + 1 + d` blends the kernel-power score with the stationary
/// popularity, `(1 - blend) * (v P^d) + blend * pop`. Ties fall back to popularity, then
/// to the expert index.
pub fn predict_ahead<T: Scalar>(
    popularity: &Popularity<T>,
    layer: usize,
    current: &[u16],
    coact: &CoActivation<T>,
    depth: usize,
    blend: T,
) -> Vec<LayerPrediction<T>> {
    let e = coact.experts_per_layer;
    let last = (layer + depth).min(coact.num_layers.saturating_sub(1));
    let mut out = Vec::new();
    let mut v = vec![T::zero(); e];
    for &i in current {
        let w = T::one() / T::of_count(current.len());
        for (x, &p) in v.iter_mut().zip(coact.row(layer, i as usize)) {
            *x = *x + w * p;
        }
    }
    for target in layer + 1..=last {
        let pop = popularity.layer(target);
        let mut score = v.clone();
        if target > layer + 1 {
            let mut next = vec![T::zero(); e];
            for (i, &vi) in v.iter().enumerate() {
                if vi == T::zero() {
                    continue;
                }
                for (x, &p) in next.iter_mut().zip(coact.row(target - 1, i)) {
                    *x = *x + vi * p;
                }
            }
            score = next
                .iter()
                .zip(pop)
                .map(|(&x, &p)| (T::one() - blend) * x + blend * p)
                .collect();
            v = next;
        }
        let mut ranked: Vec<(usize, T)> = score.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(pop[b.0].partial_cmp(&pop[a.0]).unwrap_or(std::cmp::Ordering::Equal))
                .then(a.0.cmp(&b.0))
        });
        out.push(LayerPrediction { layer: target, ranked });
    }
    out
}
