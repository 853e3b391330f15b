//! Scenario files and the trace → plan → simulate pipeline built on them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compression::{BitWidth, FusionConfig, PruneConfig, QuantPolicy};
use crate::edgenet::{EdgeTopology, NeighborView, PerceptionConfig, ServerId};
use crate::error::{Error, Result};
use crate::model::{
    derive_seed, estimate_coactivation, generate_trace_for_shapes, generate_trace_with_kernel, CoActivation,
    LengthDist, MoeModelSpec, RequestShape, RoutingKernel, RoutingTrace, WorkloadParams,
};
use crate::paging::{PagingConfig, Popularity};
use crate::placement::{expected_objective, Placement, PlacementObjective};
use crate::plan::{plan_deployment, PlanConfig, PlanInputs, QuantizationConfig};
use crate::sim::{simulate, CostModel, EventRecord, ReplanTriggerConfig, ResourceEvent, SimReport, SimSetup};

pub const SCHEMA_VERSION: u32 = 1;

const PROFILE_STREAM: u64 = 0x5052_4f46;
const BUCKET_STREAM: u64 = 0x4255_434b;

fn default_seed() -> u64 {
    42
}

/// Input and output lengths of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bucket {
    pub input: usize,
    pub output: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementMode {
    #[default]
    Plan,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSection {
    pub mode: PlacementMode,
    /// Placement JSON for `fixed` mode, relative to the scenario file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Optional precision policy for `fixed` mode; all experts at 16 bits
    /// when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quant_file: Option<PathBuf>,
    pub planner: PlanConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionSection {
    pub quantization: QuantizationConfig,
    pub fusion: FusionConfig,
    pub pruning: PruneConfig,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Spacing between request arrivals; each request arrives when the
    /// previous one completes when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub arrival_interval_s: Option<f64>,
    pub record_events: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub model: MoeModelSpec,
    pub topology: EdgeTopology,
    /// Servers that take part; every server of the topology when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub participants: Vec<ServerId>,
    /// Server that receives requests; the first participant when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry_server: Option<ServerId>,
    pub workload: WorkloadParams,
    /// Fixed-length sweep points, each simulated separately. The workload's
    /// own length distributions are used when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<Bucket>,
    #[serde(default)]
    pub placement: PlacementSection,
    #[serde(default)]
    pub paging: PagingConfig,
    #[serde(default)]
    pub compression: CompressionSection,
    #[serde(default)]
    pub perception: PerceptionConfig,
    #[serde(default)]
    pub replan: ReplanTriggerConfig,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub resource_events: Vec<ResourceEvent>,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Directory relative file references resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn parse<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })
}

impl Scenario {
    /// Parses and validates a scenario.
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let s: Scenario = parse(bytes)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut s = Self::from_json(&bytes)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.model.validate()?;
        self.topology.validate()?;
        self.workload.validate()?;
        let participants = self.participants();
        for &p in &participants {
            if self.topology.server(p).is_none() {
                return Err(Error::config("participants", format!("server {p} is not in the topology")));
            }
        }
        if participants.is_empty() {
            return Err(Error::config("participants", "no servers take part"));
        }
        if !self.topology.connects(&participants) {
            return Err(Error::config("participants", "participating servers are not connected"));
        }
        if !participants.contains(&self.entry()) {
            return Err(Error::config("entry_server", format!("server {} does not take part", self.entry())));
        }
        if self.placement.mode == PlacementMode::Fixed && self.placement.file.is_none() {
            return Err(Error::config("placement.file", "fixed mode needs a placement file"));
        }
        self.placement.planner.validate()?;
        self.paging.validate()?;
        self.compression.fusion.validate()?;
        self.compression.pruning.validate()?;
        self.perception.validate()?;
        if self.replan.enabled {
            self.replan.validate()?;
        }
        self.cost.validate()?;
        for (i, ev) in self.resource_events.iter().enumerate() {
            if !participants.contains(&ev.server) {
                return Err(Error::config(format!("resource_events[{i}].server"), "not a participant"));
            }
            if !(ev.time_s >= 0.0) || ev.avail_compute_pct > 100 || ev.avail_gpu_mem_pct > 100 {
                return Err(Error::config(format!("resource_events[{i}]"), "time must be >= 0, percentages <= 100"));
            }
        }
        if let Some(i) = self.sim.arrival_interval_s {
            if !(i >= 0.0) {
                return Err(Error::config("sim.arrival_interval_s", "must be >= 0"));
            }
        }
        Ok(())
    }

    pub fn participants(&self) -> Vec<ServerId> {
        if self.participants.is_empty() {
            self.topology.servers.iter().map(|s| s.id).collect()
        } else {
            self.participants.clone()
        }
    }

    pub fn entry(&self) -> ServerId {
        self.entry_server
            .or_else(|| self.participants().first().copied())
            .unwrap_or_default()
    }

    pub fn kernel(&self) -> RoutingKernel {
        RoutingKernel::new(&self.model, &self.workload)
    }

    /// Sweep points; a single point standing for the workload itself when no
    /// sweep is configured.
    pub fn buckets(&self) -> Vec<Option<Bucket>> {
        if self.sweep.is_empty() {
            vec![None]
        } else {
            self.sweep.iter().copied().map(Some).collect()
        }
    }

    /// The workload trace `cmd trace` writes.
    pub fn trace(&self, seed: u64) -> Result<RoutingTrace> {
        generate_trace_with_kernel(&self.model, &self.workload, &self.kernel(), seed)
    }

    /// Trace simulated for sweep point `i`.
    pub fn bucket_trace(&self, i: usize, seed: u64) -> Result<RoutingTrace> {
        let kernel = self.kernel();
        let seed = derive_seed(seed, &[BUCKET_STREAM, i as u64]);
        match self.buckets()[i] {
            None => generate_trace_with_kernel(&self.model, &self.workload, &kernel, seed),
            Some(b) => {
                let shapes = vec![
                    RequestShape {
                        input_len: b.input,
                        output_len: b.output,
                    };
                    self.workload.num_requests
                ];
                generate_trace_for_shapes(&self.model, &kernel, shapes, seed)
            }
        }
    }

    /// Routing statistics the planner learns from a profiling run.
    pub fn profile(&self, seed: u64) -> Result<Profile> {
        let shapes = vec![RequestShape {
            input_len: self.placement.planner.profile_tokens,
            output_len: 0,
        }];
        let trace = generate_trace_for_shapes(&self.model, &self.kernel(), shapes, derive_seed(seed, &[PROFILE_STREAM]))?;
        let coact: CoActivation<f64> = estimate_coactivation(&trace, &self.model)?;
        let popularity = Popularity::from_marginals(&coact.marginals, self.paging.decay);
        Ok(Profile { coact, popularity })
    }

    fn initial_view(&self) -> NeighborView {
        let mut view = NeighborView::new();
        for ev in self.resource_events.iter().filter(|e| e.time_s <= 0.0) {
            view.set(
                ev.server,
                crate::edgenet::ResourceStatus::new(ev.avail_compute_pct, ev.avail_gpu_mem_pct, 0.0),
            );
        }
        view
    }

    /// Plans a deployment, or loads the fixed one.
    pub fn deploy(&self, profile: &Profile) -> Result<PlannedDeployment> {
        let participants = self.participants();
        let view = self.initial_view();
        let inputs = PlanInputs {
            spec: &self.model,
            topology: &self.topology,
            participants: &participants,
            entry: self.entry(),
            view: &view,
            coact: &profile.coact,
            popularity: &profile.popularity,
            cost: &self.cost,
            plan: &self.placement.planner,
            quantization: &self.compression.quantization,
            paging: &self.paging,
        };
        match self.placement.mode {
            PlacementMode::Plan => {
                let d = plan_deployment(&inputs)?;
                Ok(PlannedDeployment {
                    placement: d.placement,
                    quant: d.quant,
                    objective: d.objective,
                })
            }
            PlacementMode::Fixed => {
                let path = self.base_dir.join(self.placement.file.as_ref().expect("validated"));
                let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&path)?)?;
                let placement = Placement::from_json_value(&value)?;
                let quant = match &self.placement.quant_file {
                    Some(q) => Some(parse::<QuantPolicy>(&std::fs::read(self.base_dir.join(q))?)?),
                    None => None,
                };
                self.deployment_for(profile, placement, quant)
            }
        }
    }

    /// Checks a given placement against this scenario and scores it. All
    /// copies run at 16 bits when `quant` is `None`.
    pub fn deployment_for(
        &self,
        profile: &Profile,
        placement: Placement,
        quant: Option<QuantPolicy>,
    ) -> Result<PlannedDeployment> {
        let participants = self.participants();
        let view = self.initial_view();
        let quant = quant.unwrap_or_else(|| {
            QuantPolicy::uniform(
                &placement,
                BitWidth::B16,
                self.compression.quantization.shared_bits,
                self.compression.quantization.penalties.clone(),
            )
        });
        placement.check_coverage(&self.model)?;
        if !quant.covers(&placement) {
            return Err(Error::Structural("precision policy does not cover the placement".into()));
        }
        let caps = crate::placement::server_capacities(&self.topology, &participants, &view);
        placement.check_capacity(&self.model, &quant, &self.topology, &caps)?;
        let inputs = PlanInputs {
            spec: &self.model,
            topology: &self.topology,
            participants: &participants,
            entry: self.entry(),
            view: &view,
            coact: &profile.coact,
            popularity: &profile.popularity,
            cost: &self.cost,
            plan: &self.placement.planner,
            quantization: &self.compression.quantization,
            paging: &self.paging,
        };
        let objective = expected_objective(&placement, &inputs.context(&quant))?;
        Ok(PlannedDeployment {
            placement,
            quant,
            objective,
        })
    }

    /// Simulates one trace under `deployment`.
    pub fn simulate_trace(
        &self,
        profile: &Profile,
        deployment: &PlannedDeployment,
        trace: &RoutingTrace,
    ) -> Result<(SimReport, Vec<EventRecord>)> {
        let participants = self.participants();
        let setup = SimSetup {
            spec: &self.model,
            topology: &self.topology,
            participants: &participants,
            entry: self.entry(),
            placement: deployment.placement.clone(),
            quant: deployment.quant.clone(),
            coact: &profile.coact,
            popularity: profile.popularity.clone(),
            cost: &self.cost,
            paging: &self.paging,
            fusion: &self.compression.fusion,
            prune: &self.compression.pruning,
            perception: &self.perception,
            replan: &self.replan,
            plan: &self.placement.planner,
            quantization: &self.compression.quantization,
            resource_events: &self.resource_events,
            arrival_interval_s: self.sim.arrival_interval_s,
            record_events: self.sim.record_events,
        };
        let out = simulate(setup, trace)?;
        Ok((out.report, out.events))
    }

    /// Full pipeline: profile, deploy, then simulate every sweep point.
    pub fn run(&self, seed: u64) -> Result<RunOutput> {
        let profile = self.profile(seed)?;
        let deployment = self.deploy(&profile)?;
        let mut buckets = Vec::new();
        let mut events = Vec::new();
        for (i, b) in self.buckets().into_iter().enumerate() {
            let trace = self.bucket_trace(i, seed)?;
            let (report, ev) = self.simulate_trace(&profile, &deployment, &trace)?;
            let (input, output) = match b {
                Some(b) => (b.input, b.output),
                None => (fixed_or_zero(self.workload.input_len), fixed_or_zero(self.workload.output_len)),
            };
            buckets.push(BucketReport { input, output, report });
            events.push(ev);
        }
        Ok(RunOutput {
            report: RunReport {
                scenario: self.name.clone(),
                seed,
                objective: deployment.objective,
                buckets,
            },
            deployment,
            events,
        })
    }
}

fn fixed_or_zero(d: LengthDist) -> usize {
    match d {
        LengthDist::Fixed(n) => n,
        LengthDist::Uniform { .. } => 0,
    }
}

/// Co-activation and popularity estimated from a profiling trace.
#[derive(Debug, Clone)]
pub struct Profile {
    pub coact: CoActivation<f64>,
    pub popularity: Popularity<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedDeployment {
    pub placement: Placement,
    pub quant: QuantPolicy,
    pub objective: PlacementObjective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub input: usize,
    pub output: usize,
    pub report: SimReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub objective: PlacementObjective,
    pub buckets: Vec<BucketReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        parse(bytes)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub deployment: PlannedDeployment,
    /// Recorded events per sweep point; empty unless recording is enabled.
    pub events: Vec<Vec<EventRecord>>,
}

/// One aligned sweep point of two runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub input: usize,
    pub output: usize,
    /// `latency(b) / latency(a)`.
    pub latency_ratio: f64,
    /// `throughput(a) / throughput(b)`.
    pub throughput_ratio: f64,
}

/// Ratios between two runs over the same sweep points.
pub fn compare(a: &RunReport, b: &RunReport) -> Result<Vec<RatioRow>> {
    let key = |r: &RunReport| r.buckets.iter().map(|x| (x.input, x.output)).collect::<Vec<_>>();
    if key(a) != key(b) {
        return Err(Error::Value(format!(
            "sweep points differ: {:?} vs {:?}",
            key(a),
            key(b)
        )));
    }
    Ok(a.buckets
        .iter()
        .zip(&b.buckets)
        .map(|(x, y)| RatioRow {
            input: x.input,
            output: x.output,
            latency_ratio: y.report.avg_latency_s / x.report.avg_latency_s,
            throughput_ratio: x.report.avg_generation_throughput / y.report.avg_generation_throughput,
        })
        .collect())
}
