//! Synthetic routing workloads.
//!
//! First-layer expert choice follows a Zipf law; every later layer is drawn
//! from a seeded Markov kernel over the previous layer's selections. The
//! kernel is a property of the simulated model (keyed by
//! [`WorkloadParams::kernel_seed`]), the token stream is keyed by the run
//! seed, so profiling traces and run traces share routing statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spec::{ExpertRef, MoeModelSpec};
use crate::error::{Error, Result};

pub const TRACE_FORMAT: &str = "edgemoe-routing-trace";
pub const TRACE_VERSION: u32 = 1;

fn default_kernel_seed() -> u64 {
    0x00c0_e1ed
}

/// Token-length distribution of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LengthDist {
    Fixed(usize),
    Uniform { min: usize, max: usize },
}

impl LengthDist {
    fn sample(&self, rng: &mut impl Rng) -> usize {
        match *self {
            LengthDist::Fixed(n) => n,
            LengthDist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    fn validate(&self, path: &str) -> Result<()> {
        if let LengthDist::Uniform { min, max } = *self {
            if min > max {
                return Err(Error::config(path, format!("min {min} exceeds max {max}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadParams {
    pub num_requests: usize,
    pub input_len: LengthDist,
    pub output_len: LengthDist,
    /// Zipf exponent of first-layer expert popularity.
    pub zipf_s: f64,
    /// Layer-transition concentration; 0 gives uniform transitions.
    pub concentration: f64,
    #[serde(default = "default_kernel_seed")]
    pub kernel_seed: u64,
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.zipf_s >= 0.0) || !self.zipf_s.is_finite() {
            return Err(Error::config("workload.zipf_s", "must be a finite value >= 0"));
        }
        if !(self.concentration >= 0.0) || !self.concentration.is_finite() {
            return Err(Error::config("workload.concentration", "must be a finite value >= 0"));
        }
        self.input_len.validate("workload.input_len")?;
        self.output_len.validate("workload.output_len")?;
        Ok(())
    }
}

/// Ground-truth routing statistics of the synthetic model.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingKernel {
    experts: usize,
    /// Normalized Zipf weights over first-layer experts (expert 0 is rank 1).
    pub first_layer: Vec<f64>,
    /// Row-stochastic `experts x experts` matrices, one per adjacent layer
    /// pair, row-major.
    pub transitions: Vec<Vec<f64>>,
}

impl RoutingKernel {
    pub fn new(spec: &MoeModelSpec, workload: &WorkloadParams) -> Self {
        let e = spec.experts_per_layer;
        let mut first_layer: Vec<f64> =
            (1..=e).map(|r| (r as f64).powf(-workload.zipf_s)).collect();
        let z: f64 = first_layer.iter().sum();
        first_layer.iter_mut().for_each(|w| *w /= z);

        let mut rng = ChaCha8Rng::seed_from_u64(workload.kernel_seed);
        let transitions = (0..spec.num_layers.saturating_sub(1))
            .map(|_| {
                let mut m = vec![0.0; e * e];
                for row in m.chunks_mut(e) {
                    for w in row.iter_mut() {
                        let u: f64 = 1.0 - rng.random::<f64>();
                        *w = u.powf(workload.concentration);
                    }
                    let s: f64 = row.iter().sum();
                    if s > 0.0 {
                        row.iter_mut().for_each(|w| *w /= s);
                    } else {
                        row.iter_mut().for_each(|w| *w = 1.0 / e as f64);
                    }
                }
                m
            })
            .collect();
        RoutingKernel {
            experts: e,
            first_layer,
            transitions,
        }
    }

    pub fn transition(&self, pair: usize, from: usize, to: usize) -> f64 {
        self.transitions[pair][from * self.experts + to]
    }

    pub fn row(&self, pair: usize, from: usize) -> &[f64] {
        &self.transitions[pair][from * self.experts..(from + 1) * self.experts]
    }
}

/// Draws `k` distinct indices, each proportional to `weights` among the
/// indices not yet chosen.
fn sample_distinct(weights: &[f64], k: usize, rng: &mut impl Rng, out: &mut Vec<u16>) {
    let start = out.len();
    for _ in 0..k {
        let chosen = &out[start..];
        let total: f64 = weights
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(&(*i as u16)))
            .map(|(_, w)| w)
            .sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            let mut last = None;
            for (i, &w) in weights.iter().enumerate() {
                if chosen.contains(&(i as u16)) || w <= 0.0 {
                    continue;
                }
                last = Some(i);
                if u < w {
                    pick = Some(i);
                    break;
                }
                u -= w;
            }
            pick.or(last).expect("positive total has a candidate")
        } else {
            (0..weights.len())
                .find(|i| !chosen.contains(&(*i as u16)))
                .expect("k <= number of experts")
        };
        out.push(pick as u16);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestShape {
    pub input_len: usize,
    pub output_len: usize,
}

impl RequestShape {
    pub fn tokens(&self) -> usize {
        self.input_len + self.output_len
    }
}

/// Per-token, per-layer top-k expert selections.
///
/// Tokens are stored request by request, each request's input (prefill)
/// tokens first and its output tokens after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub spec_hash: String,
    pub seed: u64,
    pub token_embedding_seed: u64,
    pub num_layers: usize,
    pub experts_per_layer: usize,
    pub top_k: usize,
    pub requests: Vec<RequestShape>,
    /// `tokens * num_layers * top_k` expert indices; the first entry of each
    /// group is the primary (highest-gate) choice.
    pub selections: Vec<u16>,
    /// Per-token importance in `[0, 1)`.
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub spec_hash: String,
    pub seed: u64,
    pub token_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    format: String,
    version: u32,
    header: TraceHeader,
    trace: RoutingTrace,
}

impl RoutingTrace {
    pub fn token_count(&self) -> usize {
        self.importance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.importance.is_empty()
    }

    /// Selections of `token` at `layer`, primary choice first.
    pub fn selections(&self, token: usize, layer: usize) -> &[u16] {
        let base = (token * self.num_layers + layer) * self.top_k;
        &self.selections[base..base + self.top_k]
    }

    pub fn selected_refs(&self, token: usize, layer: usize) -> impl Iterator<Item = ExpertRef> + '_ {
        self.selections(token, layer)
            .iter()
            .map(move |&e| ExpertRef::new(layer, e as usize))
    }

    /// First token index of every request.
    pub fn request_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.requests
            .iter()
            .map(|r| {
                let start = acc;
                acc += r.tokens();
                start
            })
            .collect()
    }

    pub fn header(&self) -> TraceHeader {
        TraceHeader {
            spec_hash: self.spec_hash.clone(),
            seed: self.seed,
            token_count: self.token_count(),
        }
    }

    /// Checks that this trace was produced for a model with `spec`'s routing
    /// geometry and that every selection is in range and distinct.
    pub fn check_against(&self, spec: &MoeModelSpec) -> Result<()> {
        if self.num_layers != spec.num_layers
            || self.experts_per_layer != spec.experts_per_layer
            || self.top_k != spec.top_k
        {
            return Err(Error::Structural(format!(
                "trace geometry {}x{} top-{} does not match model {}x{} top-{}",
                self.num_layers,
                self.experts_per_layer,
                self.top_k,
                spec.num_layers,
                spec.experts_per_layer,
                spec.top_k
            )));
        }
        let tokens: usize = self.requests.iter().map(RequestShape::tokens).sum();
        if tokens != self.importance.len()
            || self.selections.len() != tokens * self.num_layers * self.top_k
        {
            return Err(Error::Structural("trace arrays have inconsistent lengths".into()));
        }
        for group in self.selections.chunks(self.top_k) {
            for (i, &e) in group.iter().enumerate() {
                if e as usize >= self.experts_per_layer || group[..i].contains(&e) {
                    return Err(Error::Structural(format!("invalid selection group {group:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let file = TraceFile {
            format: TRACE_FORMAT.to_string(),
            version: TRACE_VERSION,
            header: self.header(),
            trace: self.clone(),
        };
        Ok(serde_json::to_vec(&file)?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: TraceFile = serde_json::from_slice(bytes)?;
        if file.format != TRACE_FORMAT || file.version != TRACE_VERSION {
            return Err(Error::Structural(format!(
                "unsupported trace format {} v{}",
                file.format, file.version
            )));
        }
        if file.header != file.trace.header() {
            return Err(Error::Structural("trace header does not match body".into()));
        }
        Ok(file.trace)
    }
}

/// Generates a deterministic routing trace.
pub fn generate_trace(spec: &MoeModelSpec, workload: &WorkloadParams, seed: u64) -> Result<RoutingTrace> {
    spec.validate()?;
    workload.validate()?;
    let kernel = RoutingKernel::new(spec, workload);
    generate_trace_with_kernel(spec, workload, &kernel, seed)
}

pub fn generate_trace_with_kernel(
    spec: &MoeModelSpec,
    workload: &WorkloadParams,
    kernel: &RoutingKernel,
    seed: u64,
) -> Result<RoutingTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requests: Vec<RequestShape> = (0..workload.num_requests)
        .map(|_| RequestShape {
            input_len: workload.input_len.sample(&mut rng),
            output_len: workload.output_len.sample(&mut rng),
        })
        .collect();
    Ok(route_requests(spec, kernel, requests, seed, &mut rng))
}

/// Trace for explicitly given request shapes.
pub fn generate_trace_for_shapes(
    spec: &MoeModelSpec,
    kernel: &RoutingKernel,
    requests: Vec<RequestShape>,
    seed: u64,
) -> Result<RoutingTrace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(route_requests(spec, kernel, requests, seed, &mut rng))
}

fn route_requests(spec: &MoeModelSpec, kernel: &RoutingKernel, requests: Vec<RequestShape>, seed: u64, rng: &mut ChaCha8Rng) -> RoutingTrace {
    let token_embedding_seed = rng.random::<u64>();
    let tokens: usize = requests.iter().map(RequestShape::tokens).sum();

    let (layers, k, e) = (spec.num_layers, spec.top_k, spec.experts_per_layer);
    let mut selections = Vec::with_capacity(tokens * layers * k);
    let mut importance = Vec::with_capacity(tokens);
    let mut mix = vec![0.0; e];
    for _ in 0..tokens {
        sample_distinct(&kernel.first_layer, k, rng, &mut selections);
        for pair in 0..layers - 1 {
            mix.iter_mut().for_each(|m| *m = 0.0);
            let prev = selections.len() - k;
            for slot in 0..k {
                let from = selections[prev + slot] as usize;
                for (m, p) in mix.iter_mut().zip(kernel.row(pair, from)) {
                    *m += p / k as f64;
                }
            }
            sample_distinct(&mix, k, rng, &mut selections);
        }
        importance.push(rng.random::<f64>());
    }

    RoutingTrace {
        spec_hash: spec.content_hash(),
        seed,
        token_embedding_seed,
        num_layers: layers,
        experts_per_layer: e,
        top_k: k,
        requests,
        selections,
        importance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(layers: usize, experts: usize, k: usize) -> MoeModelSpec {
        MoeModelSpec {
            num_layers: layers,
            experts_per_layer: experts,
            expert_param_bytes: 1024,
            shared_param_bytes: 4096,
            top_k: k,
            hidden_dim: 16,
            activation_bytes_per_element: 2,
        }
    }

    fn workload(requests: usize, input: usize, output: usize) -> WorkloadParams {
        WorkloadParams {
            num_requests: requests,
            input_len: LengthDist::Fixed(input),
            output_len: LengthDist::Fixed(output),
            zipf_s: 1.2,
            concentration: 2.0,
            kernel_seed: 3,
        }
    }

    #[test]
    fn one_request_two_tokens_two_layers() {
        let t = generate_trace(&spec(2, 4, 1), &workload(1, 1, 1), 99).unwrap();
        assert_eq!(t.token_count(), 2);
        assert_eq!(t.selections.len(), 2 * 2);
        t.check_against(&spec(2, 4, 1)).unwrap();
    }

    #[test]
    fn degenerate_single_expert() {
        let t = generate_trace(&spec(1, 1, 1), &workload(3, 5, 7), 1).unwrap();
        assert!(t.selections.iter().all(|&e| e == 0));
    }

    #[test]
    fn rejects_negative_zipf() {
        let mut w = workload(1, 1, 1);
        w.zipf_s = -0.5;
        assert!(matches!(
            generate_trace(&spec(2, 4, 1), &w, 0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn rejects_inverted_length_range() {
        let mut w = workload(1, 1, 1);
        w.output_len = LengthDist::Uniform { min: 9, max: 3 };
        assert!(generate_trace(&spec(2, 4, 1), &w, 0).is_err());
    }

    #[test]
    fn negative_lengths_do_not_parse() {
        let json = r#"{"num_requests":1,"input_len":-3,"output_len":4,"zipf_s":1.0,"concentration":1.0}"#;
        assert!(serde_json::from_str::<WorkloadParams>(json).is_err());
    }

    #[test]
    fn first_layer_follows_zipf() {
        // Primary-slot frequency of rank-1 vs rank-2 expert ~ 2^s.
        let s = spec(2, 8, 2);
        let t = generate_trace(&s, &workload(1, 5_000, 5_000), 7).unwrap();
        let mut counts = [0usize; 8];
        for tok in 0..t.token_count() {
            counts[t.selections(tok, 0)[0] as usize] += 1;
        }
        let ratio = counts[0] as f64 / counts[1] as f64;
        let expected = 2f64.powf(1.2);
        assert!((ratio - expected).abs() / expected < 0.10, "ratio {ratio} vs {expected}");
    }

    #[test]
    fn kernel_rows_are_stochastic() {
        let k = RoutingKernel::new(&spec(4, 6, 2), &workload(1, 1, 1));
        for pair in 0..3 {
            for i in 0..6 {
                let s: f64 = k.row(pair, i).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip_and_header() {
        let s = spec(3, 5, 2);
        let t = generate_trace(&s, &workload(2, 3, 4), 11).unwrap();
        let bytes = t.to_json().unwrap();
        let back = RoutingTrace::from_json(&bytes).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.header().token_count, 14);
        assert_eq!(back.header().spec_hash, s.content_hash());
    }

    #[test]
    fn tampered_header_is_rejected() {
        let s = spec(2, 3, 1);
        let t = generate_trace(&s, &workload(1, 1, 1), 1).unwrap();
        let text = String::from_utf8(t.to_json().unwrap()).unwrap();
        let tampered = text.replacen("\"token_count\":2", "\"token_count\":3", 1);
        assert!(RoutingTrace::from_json(tampered.as_bytes()).is_err());
    }

    #[test]
    fn check_against_detects_mismatch() {
        let t = generate_trace(&spec(2, 4, 1), &workload(1, 1, 1), 0).unwrap();
        assert!(matches!(t.check_against(&spec(3, 4, 1)), Err(Error::Structural(_))));
    }
}
