use std::collections::BTreeSet;

use super::types::{ReplicaSlot, Segmentation, SubModel};
use crate::error::{Error, Result};
use crate::model::{CoActivation, ExpertRef, MoeModelSpec};
use crate::scalar::Scalar;

/// Transition mass `pi_l(i) * P_l[i][j]` between adjacent layers.
pub(crate) fn flows<T: Scalar>(coact: &CoActivation<T>) -> Vec<Vec<f64>> {
    let e = coact.experts_per_layer;
    let pi = coact.propagated_marginals();
    (0..coact.num_pairs())
        .map(|pair| {
            let mut f = vec![0.0; e * e];
            for i in 0..e {
                let w = pi[pair][i].as_f64();
                for j in 0..e {
                    f[i * e + j] = w * coact.get(pair, i, j).as_f64();
                }
            }
            f
        })
        .collect()
}

/// Summed flow between consecutive-layer member sets over every sub-model.
pub fn internal_mass<T: Scalar>(coact: &CoActivation<T>, submodels: &[SubModel]) -> f64 {
    let f = flows(coact);
    internal_mass_with(&f, coact.experts_per_layer, submodels)
}

fn internal_mass_with(f: &[Vec<f64>], e: usize, submodels: &[SubModel]) -> f64 {
    submodels
        .iter()
        .map(|m| {
            (0..f.len())
                .map(|pair| {
                    m.layers[pair]
                        .iter()
                        .flat_map(|&i| m.layers[pair + 1].iter().map(move |&j| f[pair][i * e + j]))
                        .sum::<f64>()
                })
                .sum::<f64>()
        })
        .sum()
}

struct Grower<'a> {
    f: &'a [Vec<f64>],
    e: usize,
    layers: usize,
    /// `owner[l][i]`: sub-model holding expert `i` of layer `l`.
    owner: Vec<Vec<Option<usize>>>,
}

impl Grower<'_> {
    /// Flow between expert `i@l` and the members of sub-model `m` at the
    /// neighbouring layers.
    fn affinity(&self, l: usize, i: usize, m: usize) -> f64 {
        let e = self.e;
        let mut g = 0.0;
        if l > 0 {
            for p in 0..e {
                if self.owner[l - 1][p] == Some(m) {
                    g += self.f[l - 1][p * e + i];
                }
            }
        }
        if l + 1 < self.layers {
            for n in 0..e {
                if self.owner[l + 1][n] == Some(m) {
                    g += self.f[l][i * e + n];
                }
            }
        }
        g
    }

    fn count(&self, l: usize, m: usize) -> usize {
        self.owner[l].iter().filter(|o| **o == Some(m)).count()
    }

    /// Highest-mass chain through unassigned experts, one per layer.
    fn seed_chain(&self) -> Vec<usize> {
        let (e, layers) = (self.e, self.layers);
        let free = |l: usize, i: usize| self.owner[l][i].is_none();
        let mut score = vec![vec![f64::NEG_INFINITY; e]; layers];
        let mut back = vec![vec![0usize; e]; layers];
        for i in (0..e).filter(|&i| free(0, i)) {
            score[0][i] = 0.0;
        }
        for l in 1..layers {
            for j in (0..e).filter(|&j| free(l, j)) {
                for i in (0..e).filter(|&i| free(l - 1, i)) {
                    let s = score[l - 1][i] + self.f[l - 1][i * e + j];
                    if s > score[l][j] {
                        score[l][j] = s;
                        back[l][j] = i;
                    }
                }
            }
        }
        let mut last = 0;
        for j in (0..e).filter(|&j| free(layers - 1, j)) {
            if score[layers - 1][j] > score[layers - 1][last] || !free(layers - 1, last) {
                last = j;
            }
        }
        let mut chain = vec![0; layers];
        chain[layers - 1] = last;
        for l in (1..layers).rev() {
            chain[l - 1] = back[l][chain[l]];
        }
        chain
    }
}

/// Seed-and-grow segmentation into `k` full-depth sub-models.
///
/// Each sub-model is seeded with the heaviest remaining chain of experts,
/// grown by the unassigned expert adding the most internal transition mass
/// (at most `ceil(E/k) + 1` experts per layer), and refined by single
/// moves and swaps until no change raises the total internal mass. The
/// `replication_budget` heaviest (expert, foreign sub-model) affinities are
/// then granted as replica copies.
pub fn segment_submodels<T: Scalar>(
    coact: &CoActivation<T>,
    spec: &MoeModelSpec,
    k: usize,
    replication_budget: usize,
) -> Result<Segmentation> {
    coact.check_against(spec)?;
    let (layers, e) = (spec.num_layers, spec.experts_per_layer);
    if k == 0 {
        return Err(Error::config("placement.num_submodels", "must be >= 1"));
    }
    if k > e {
        return Err(Error::infeasible(
            format!("{k} sub-models cannot each hold an expert of a {e}-expert layer"),
            0,
        ));
    }
    let f = flows(coact);
    let mut g = Grower {
        f: &f,
        e,
        layers,
        owner: vec![vec![None; e]; layers],
    };

    for m in 0..k {
        for (l, i) in g.seed_chain().into_iter().enumerate() {
            g.owner[l][i] = Some(m);
        }
    }

    let cap = e.div_ceil(k) + 1;
    // gain[l][i][m], refreshed around each placed expert.
    let mut gain: Vec<Vec<Vec<f64>>> = (0..layers)
        .map(|l| (0..e).map(|i| (0..k).map(|m| g.affinity(l, i, m)).collect()).collect())
        .collect();
    loop {
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for l in 0..layers {
            let full: Vec<bool> = (0..k).map(|m| g.count(l, m) >= cap).collect();
            for i in (0..e).filter(|&i| g.owner[l][i].is_none()) {
                for m in (0..k).filter(|&m| !full[m]) {
                    let v = gain[l][i][m];
                    if best.is_none_or(|(b, ..)| v > b) {
                        best = Some((v, l, i, m));
                    }
                }
            }
        }
        let Some((_, l, i, m)) = best else { break };
        g.owner[l][i] = Some(m);
        for nl in [l.wrapping_sub(1), l + 1] {
            if nl < layers {
                for n in 0..e {
                    gain[nl][n][m] = g.affinity(nl, n, m);
                }
            }
        }
    }

    refine(&mut g, k, cap);

    let mut submodels: Vec<SubModel> = (0..k)
        .map(|m| SubModel {
            layers: (0..layers)
                .map(|l| (0..e).filter(|&i| g.owner[l][i] == Some(m)).collect::<BTreeSet<_>>())
                .collect(),
        })
        .collect();

    let mut candidates: Vec<(f64, ReplicaSlot)> = Vec::new();
    if k > 1 && replication_budget > 0 {
        for l in 0..layers {
            for i in 0..e {
                for m in (0..k).filter(|&m| g.owner[l][i] != Some(m)) {
                    let a = g.affinity(l, i, m);
                    if a > 0.0 {
                        candidates.push((a, ReplicaSlot { submodel: m, expert: ExpertRef::new(l, i) }));
                    }
                }
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.expert.cmp(&b.1.expert)).then(a.1.submodel.cmp(&b.1.submodel)));
    }
    let replicas: Vec<ReplicaSlot> = candidates.into_iter().take(replication_budget).map(|(_, r)| r).collect();
    for r in &replicas {
        submodels[r.submodel].layers[r.expert.layer()].insert(r.expert.expert());
    }
    Ok(Segmentation { submodels, replicas })
}

/// Move/swap local search on total internal mass.
fn refine(g: &mut Grower<'_>, k: usize, cap: usize) {
    if k < 2 {
        return;
    }
    const EPS: f64 = 1e-12;
    let (layers, e) = (g.layers, g.e);
    for _ in 0..10_000 {
        let mut improved = false;
        for l in 0..layers {
            for i in 0..e {
                let from = g.owner[l][i].expect("grown segmentation is complete");
                if g.count(l, from) <= 1 {
                    continue;
                }
                let here = g.affinity(l, i, from);
                for to in (0..k).filter(|&m| m != from) {
                    if g.count(l, to) >= cap {
                        continue;
                    }
                    if g.affinity(l, i, to) > here + EPS {
                        g.owner[l][i] = Some(to);
                        improved = true;
                        break;
                    }
                }
            }
            for a in 0..e {
                for b in a + 1..e {
                    let (ma, mb) = (g.owner[l][a].unwrap(), g.owner[l][b].unwrap());
                    if ma == mb {
                        continue;
                    }
                    let before = g.affinity(l, a, ma) + g.affinity(l, b, mb);
                    let after = g.affinity(l, a, mb) + g.affinity(l, b, ma);
                    if after > before + EPS {
                        g.owner[l][a] = Some(mb);
                        g.owner[l][b] = Some(ma);
                        improved = true;
                    }
                }
            }
        }
        if !improved {
            break;
        }
    }
}
