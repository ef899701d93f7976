//! Experiment configuration file (TOML). Every block rejects unknown keys.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rack::{Dispatch, Fault, NetworkConfig, RunConfig, RunError, TimedFault};
use crate::server::IntraPolicy;
use crate::switch::{stage_cost, MinLayout, PipelineBudget, ReqTableConfig, SchedulingPolicy, TrackingConfig, TrackingKind};
use crate::workload::{ClassSpec, WorkloadSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("pipeline budget: {0}")]
    Pipeline(#[from] crate::switch::PipelineError),
    #[error(transparent)]
    Run(#[from] RunError),
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.into(), msg: msg.into() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServersBlock {
    pub count: usize,
    /// Workers per server; a single entry applies to every server.
    pub workers: Vec<u32>,
    /// Number of servers (lowest ids first) active at time zero.
    #[serde(default)]
    pub initial_active: Option<usize>,
    /// Locality class -> servers allowed to serve it.
    #[serde(default)]
    pub locality_sets: BTreeMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkBlock {
    pub client_switch_us: f64,
    pub switch_server_us: f64,
    pub switch_latency_us: f64,
    pub reply_loss_prob: f64,
    /// Delay before the control plane purges a crashed server's mappings.
    pub control_plane_delay_us: f64,
}

impl Default for NetworkBlock {
    fn default() -> Self {
        let n = NetworkConfig::default();
        NetworkBlock {
            client_switch_us: n.client_switch_us,
            switch_server_us: n.switch_server_us,
            switch_latency_us: n.switch_latency_us,
            reply_loss_prob: n.reply_loss_prob,
            control_plane_delay_us: 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadBlock {
    #[serde(default = "default_clients")]
    pub clients: u32,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_packet_gap")]
    pub packet_gap_us: f64,
    pub classes: Vec<ClassSpec>,
}

fn default_clients() -> u32 {
    4
}

fn default_warmup() -> f64 {
    0.1
}

fn default_packet_gap() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Sampling,
    Shortest,
    RoundRobin,
    Hash,
    Random,
    Jbsq,
    GlobalCfcfs,
    GlobalPs,
    Client,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    pub kind: PolicyKind,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_bound")]
    pub bound: u32,
    /// Client-based mode: number of clients (overrides the workload block).
    #[serde(default)]
    pub clients: Option<u32>,
    #[serde(default = "yes")]
    pub local_increment: bool,
}

fn default_k() -> usize {
    2
}

fn default_bound() -> u32 {
    3
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrackingName {
    Int1,
    Int2,
    Int3,
    Proactive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingBlock {
    pub kind: TrackingName,
    #[serde(default)]
    pub decrement_miss_prob: f64,
    #[serde(default)]
    pub double_count_prob: f64,
}

impl Default for TrackingBlock {
    fn default() -> Self {
        TrackingBlock { kind: TrackingName::Int1, decrement_miss_prob: 0.0, double_count_prob: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutName {
    Tree,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineBlock {
    pub max_stages: usize,
    pub comparisons_per_stage: usize,
    pub reads_per_stage: usize,
    pub layout: LayoutName,
}

impl Default for PipelineBlock {
    fn default() -> Self {
        let b = PipelineBudget::default();
        PipelineBlock {
            max_stages: b.max_stages,
            comparisons_per_stage: b.comparisons_per_stage,
            reads_per_stage: b.reads_per_stage,
            layout: LayoutName::Tree,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReqTableBlock {
    pub stages: usize,
    pub slots_per_stage: usize,
    /// Zero or absent disables the stale-mapping sweep.
    pub ttl_us: Option<f64>,
    pub sweep_period_us: f64,
}

impl Default for ReqTableBlock {
    fn default() -> Self {
        let r = ReqTableConfig::default();
        ReqTableBlock {
            stages: r.stages,
            slots_per_stage: r.slots_per_stage,
            ttl_us: r.ttl_us,
            sweep_period_us: r.sweep_period_us,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntraName {
    Cfcfs,
    Ps,
    MultiqueueCfcfs,
    MultiqueuePs,
    StrictPriority,
    WeightedFair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntraBlock {
    pub kind: IntraName,
    #[serde(default = "default_slice")]
    pub slice_us: f64,
    #[serde(default)]
    pub preempt_threshold_us: Option<f64>,
    #[serde(default = "default_context_switch")]
    pub context_switch_us: f64,
    #[serde(default = "default_priority_preempt")]
    pub priority_preempt_us: f64,
    #[serde(default)]
    pub weights: Vec<f64>,
}

fn default_slice() -> f64 {
    25.0
}

fn default_context_switch() -> f64 {
    0.5
}

fn default_priority_preempt() -> f64 {
    5.0
}

impl Default for IntraBlock {
    fn default() -> Self {
        IntraBlock {
            kind: IntraName::Cfcfs,
            slice_us: default_slice(),
            preempt_threshold_us: None,
            context_switch_us: default_context_switch(),
            priority_preempt_us: default_priority_preempt(),
            weights: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub load_fractions: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_requests")]
    pub requests_per_point: u64,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

fn default_requests() -> u64 {
    500_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FaultEntry {
    SwitchFail { at_us: f64, duration_us: f64 },
    AddServer { at_us: f64, server: usize },
    RemoveServer { at_us: f64, server: usize, #[serde(default = "yes")] planned: bool },
    SetLoad { at_us: f64, load_fraction: f64 },
}

impl FaultEntry {
    fn timed(&self) -> TimedFault {
        match *self {
            FaultEntry::SwitchFail { at_us, duration_us } => TimedFault { at_us, fault: Fault::SwitchFail { duration_us } },
            FaultEntry::AddServer { at_us, server } => TimedFault { at_us, fault: Fault::AddServer { server } },
            FaultEntry::RemoveServer { at_us, server, planned } => {
                TimedFault { at_us, fault: Fault::RemoveServer { server, planned } }
            }
            FaultEntry::SetLoad { at_us, load_fraction } => TimedFault { at_us, fault: Fault::SetLoad { load_fraction } },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub dir: String,
    pub timeline_bucket_us: Option<f64>,
    pub sample_queue_lengths: bool,
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock { dir: "results".into(), timeline_bucket_us: None, sample_queue_lengths: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub servers: ServersBlock,
    #[serde(default)]
    pub network: NetworkBlock,
    pub workload: WorkloadBlock,
    pub policy: PolicyBlock,
    #[serde(default)]
    pub tracking: TrackingBlock,
    #[serde(default)]
    pub pipeline: PipelineBlock,
    #[serde(default)]
    pub reqtable: ReqTableBlock,
    #[serde(default)]
    pub intra: IntraBlock,
    pub sweep: SweepBlock,
    #[serde(default)]
    pub faults: Vec<FaultEntry>,
    #[serde(default)]
    pub output: OutputBlock,
}

/// Reads, parses and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn workers(&self) -> Vec<u32> {
        match self.servers.workers.as_slice() {
            [w] => vec![*w; self.servers.count],
            ws => ws.to_vec(),
        }
    }

    fn locality_sets(&self) -> Result<BTreeMap<u32, Vec<usize>>, ConfigError> {
        self.servers
            .locality_sets
            .iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|l| (l, v.clone()))
                    .map_err(|_| invalid("servers.locality_sets", format!("locality class `{k}` is not an integer")))
            })
            .collect()
    }

    pub fn switch_policy(&self) -> Option<SchedulingPolicy> {
        let p = &self.policy;
        Some(match p.kind {
            PolicyKind::Sampling => SchedulingPolicy::Sampling { k: p.k },
            PolicyKind::Shortest => SchedulingPolicy::Shortest,
            PolicyKind::RoundRobin => SchedulingPolicy::RoundRobin,
            PolicyKind::Hash => SchedulingPolicy::HashRandom,
            PolicyKind::Random => SchedulingPolicy::Random,
            PolicyKind::Jbsq => SchedulingPolicy::Jbsq { bound: p.bound },
            PolicyKind::GlobalCfcfs | PolicyKind::GlobalPs | PolicyKind::Client => return None,
        })
    }

    fn intra_policy(&self) -> IntraPolicy {
        let i = &self.intra;
        match (self.policy.kind, i.kind) {
            (PolicyKind::GlobalCfcfs, _) => IntraPolicy::Cfcfs { preempt_threshold_us: i.preempt_threshold_us },
            (PolicyKind::GlobalPs, _) => IntraPolicy::Ps { slice_us: i.slice_us },
            (_, IntraName::Cfcfs) => IntraPolicy::Cfcfs { preempt_threshold_us: i.preempt_threshold_us },
            (_, IntraName::Ps) => IntraPolicy::Ps { slice_us: i.slice_us },
            (_, IntraName::MultiqueueCfcfs) => IntraPolicy::MultiQueueCfcfs { preempt_threshold_us: i.preempt_threshold_us },
            (_, IntraName::MultiqueuePs) => IntraPolicy::MultiQueuePs { slice_us: i.slice_us },
            (_, IntraName::StrictPriority) => IntraPolicy::StrictPriority {
                preempt_threshold_us: i.preempt_threshold_us,
                preempt_latency_us: i.priority_preempt_us,
            },
            (_, IntraName::WeightedFair) => IntraPolicy::WeightedFair { slice_us: i.slice_us, weights: i.weights.clone() },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.servers.count == 0 {
            return Err(invalid("servers.count", "must be at least 1"));
        }
        let w = &self.servers.workers;
        if w.is_empty() || (w.len() != 1 && w.len() != self.servers.count) {
            return Err(invalid("servers.workers", "give one entry or one per server"));
        }
        if let Some(a) = self.servers.initial_active {
            if a == 0 || a > self.servers.count {
                return Err(invalid("servers.initial_active", "must be between 1 and servers.count"));
            }
        }
        if self.sweep.load_fractions.is_empty() || self.sweep.seeds.is_empty() {
            return Err(invalid("sweep", "load_fractions and seeds must be non-empty"));
        }
        if self.sweep.requests_per_point == 0 {
            return Err(invalid("sweep.requests_per_point", "must be positive"));
        }
        if let Some(l) = self.sweep.load_fractions.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
            return Err(invalid("sweep.load_fractions", format!("{l} is not a positive load")));
        }
        let mut tags: Vec<u32> = self.workload.classes.iter().map(|c| c.class_tag).collect();
        tags.sort_unstable();
        if tags.windows(2).any(|p| p[0] == p[1]) {
            return Err(invalid("workload.classes", "class tags must be unique"));
        }
        if self.intra.kind == IntraName::WeightedFair && self.intra.weights.is_empty() {
            return Err(invalid("intra.weights", "weighted-fair needs one weight per client"));
        }
        if let Some(policy) = self.switch_policy() {
            let budget = PipelineBudget {
                max_stages: self.pipeline.max_stages,
                comparisons_per_stage: self.pipeline.comparisons_per_stage,
                reads_per_stage: self.pipeline.reads_per_stage,
                layout: match self.pipeline.layout {
                    LayoutName::Tree => MinLayout::Tree,
                    LayoutName::Linear => MinLayout::Linear,
                },
            };
            stage_cost(&policy, self.servers.count, &budget)?;
        }
        self.locality_sets()?;
        // Builds a representative point to run the full run-level checks.
        self.point(self.sweep.load_fractions[0], self.sweep.seeds[0])?.validate()?;
        Ok(())
    }

    /// Run configuration of one sweep point.
    pub fn point(&self, load_fraction: f64, seed: u64) -> Result<RunConfig, ConfigError> {
        let workers = self.workers();
        let n = workers.len();
        let active_count = self.servers.initial_active.unwrap_or(n);
        let mut workload = WorkloadSpec {
            classes: self.workload.classes.clone(),
            clients: self.workload.clients,
            packet_gap_us: self.workload.packet_gap_us,
        };
        let dispatch = match self.policy.kind {
            PolicyKind::GlobalCfcfs | PolicyKind::GlobalPs => Dispatch::Global,
            PolicyKind::Client => {
                if let Some(c) = self.policy.clients {
                    workload.clients = c;
                }
                Dispatch::Client { k: self.policy.k, local_increment: self.policy.local_increment }
            }
            _ => Dispatch::Switch(self.switch_policy().expect("switch policy")),
        };
        let mut cfg = RunConfig::new(n, 1, workload, dispatch, self.intra_policy());
        cfg.workers = workers;
        cfg.initial_active = (0..n).map(|i| i < active_count).collect();
        cfg.locality_sets = self.locality_sets()?;
        let net = &self.network;
        cfg.network = NetworkConfig {
            client_switch_us: net.client_switch_us,
            switch_server_us: net.switch_server_us,
            switch_latency_us: net.switch_latency_us,
            reply_loss_prob: net.reply_loss_prob,
        };
        cfg.control_plane_delay_us = net.control_plane_delay_us;
        let t = &self.tracking;
        cfg.tracking = TrackingConfig {
            kind: match t.kind {
                TrackingName::Int1 => TrackingKind::Int1,
                TrackingName::Int2 => TrackingKind::Int2,
                TrackingName::Int3 => TrackingKind::Int3,
                TrackingName::Proactive => TrackingKind::Proactive,
            },
            decrement_miss_prob: t.decrement_miss_prob,
            double_count_prob: t.double_count_prob,
        };
        let r = &self.reqtable;
        if r.stages == 0 || r.slots_per_stage == 0 {
            return Err(invalid("reqtable", "stages and slots_per_stage must be positive"));
        }
        cfg.reqtable = ReqTableConfig {
            stages: r.stages,
            slots_per_stage: r.slots_per_stage,
            ttl_us: r.ttl_us.filter(|t| *t > 0.0),
            sweep_period_us: r.sweep_period_us,
        };
        if cfg.reqtable.ttl_us.is_some() && !(r.sweep_period_us > 0.0) {
            return Err(invalid("reqtable.sweep_period_us", "must be positive when a TTL is set"));
        }
        cfg.context_switch_us = self.intra.context_switch_us;
        cfg.load_fraction = load_fraction;
        cfg.requests = self.sweep.requests_per_point;
        cfg.warmup_fraction = self.workload.warmup_fraction;
        cfg.seed = seed;
        cfg.faults = self.faults.iter().map(FaultEntry::timed).collect();
        cfg.timeline_bucket_us = self.output.timeline_bucket_us;
        cfg.sample_queues = self.output.sample_queue_lengths;
        Ok(cfg)
    }
}
