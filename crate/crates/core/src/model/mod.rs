//! Model geometry, synthetic routing workloads and co-activation statistics.

mod activations;
mod coact;
mod spec;
mod trace;

pub use activations::{derive_seed, mix64, synthesize_activations, ActivationSynth, DEFAULT_CLUSTER_NOISE};
pub use coact::{estimate_coactivation, CoActivation, CoActivationCounts};
pub use spec::{ExpertRef, MoeModelSpec, FULL_PRECISION_BYTES_PER_PARAM};
pub use trace::{
    generate_trace, generate_trace_for_shapes, generate_trace_with_kernel, LengthDist, RequestShape, RoutingKernel, RoutingTrace,
    TraceHeader, WorkloadParams, TRACE_FORMAT, TRACE_VERSION,
};
