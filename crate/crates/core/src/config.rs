//! Benchmark configuration: the YAML schema, its typed form and semantic checks.
//!
//! The canonical layout keeps task definitions as top-level keys and the
//! workflow graph under `workflows:`. A multi-document stream where one
//! document holds only workflow nodes is merged into the same spec.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_yaml::{Mapping, Value};
use thiserror::Error;

/// Keys at the top level of a config document that are run options rather than tasks.
pub const OPTION_KEYS: &[&str] = &[
    "policy",
    "mode",
    "sample_interval",
    "output_dir",
    "seed",
    "max_concurrency",
    "on_failure",
    "node_timeout",
    "sim",
];

const WORKFLOWS_KEY: &str = "workflows";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("reference error: {}", join_violations(.0))]
    Reference(Vec<Violation>),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Schema {
        path: path.into(),
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Durations
// ---------------------------------------------------------------------------

/// A duration in seconds. Accepts `1s`, `0.25s`, `250ms` or a bare number of seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Secs(pub f64);

impl Secs {
    pub fn get(self) -> f64 {
        self.0
    }
}

/// Parse a duration literal into seconds.
pub fn parse_duration(text: &str) -> Result<f64, String> {
    let t = text.trim();
    let (num, scale) = if let Some(n) = t.strip_suffix("ms") {
        (n, 1e-3)
    } else if let Some(n) = t.strip_suffix("us") {
        (n, 1e-6)
    } else if let Some(n) = t.strip_suffix('s') {
        (n, 1.0)
    } else {
        (t, 1.0)
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| format!("invalid duration literal `{text}`"))?;
    if !value.is_finite() {
        return Err(format!("invalid duration literal `{text}`"));
    }
    if scale == 1.0 {
        Ok(value)
    } else {
        Ok(value * scale)
    }
}

impl Serialize for Secs {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{}s", self.0))
    }
}

impl<'de> Deserialize<'de> for Secs {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SecsVisitor;
        impl Visitor<'_> for SecsVisitor {
            type Value = Secs;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a duration such as 1s, 0.25s, 250ms or a number of seconds")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Secs, E> {
                Ok(Secs(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Secs, E> {
                Ok(Secs(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Secs, E> {
                Ok(Secs(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Secs, E> {
                parse_duration(v).map(Secs).map_err(E::custom)
            }
        }
        d.deserialize_any(SecsVisitor)
    }
}

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    Chatbot,
    DeepResearch,
    Imagegen,
    LiveCaptions,
    Synthetic,
}

impl AppKind {
    pub const ALL: [AppKind; 5] = [
        AppKind::Chatbot,
        AppKind::DeepResearch,
        AppKind::Imagegen,
        AppKind::LiveCaptions,
        AppKind::Synthetic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AppKind::Chatbot => "chatbot",
            AppKind::DeepResearch => "deep_research",
            AppKind::Imagegen => "imagegen",
            AppKind::LiveCaptions => "live_captions",
            AppKind::Synthetic => "synthetic",
        }
    }

    /// Lenient match used for the `Name (Kind)` task-key convention.
    pub fn from_loose(text: &str) -> Option<AppKind> {
        let norm: String = text
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match norm.as_str() {
            "chatbot" => Some(AppKind::Chatbot),
            "deepresearch" => Some(AppKind::DeepResearch),
            "imagegen" => Some(AppKind::Imagegen),
            "livecaptions" => Some(AppKind::LiveCaptions),
            "synthetic" => Some(AppKind::Synthetic),
            _ => None,
        }
    }
}

impl fmt::Display for AppKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Device {
    Cpu,
    Gpu,
    Hybrid,
}

impl Device {
    pub fn uses_gpu(self) -> bool {
        matches!(self, Device::Gpu | Device::Hybrid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Device::Cpu => "cpu",
            Device::Gpu => "gpu",
            Device::Hybrid => "hybrid",
        }
    }
}

/// Per-application latency objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slo {
    LatencyPair { ttft: f64, tpot: f64 },
    StepTime(f64),
    SegmentTime(f64),
    #[default]
    None,
}

impl Slo {
    pub fn is_none(&self) -> bool {
        matches!(self, Slo::None)
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            Slo::LatencyPair { .. } => "latency_pair",
            Slo::StepTime(_) => "step_time",
            Slo::SegmentTime(_) => "segment_time",
            Slo::None => "none",
        }
    }

    fn durations(&self) -> Vec<f64> {
        match *self {
            Slo::LatencyPair { ttft, tpot } => vec![ttft, tpot],
            Slo::StepTime(s) | Slo::SegmentTime(s) => vec![s],
            Slo::None => vec![],
        }
    }

    /// Whether this variant carries the latency semantics of `kind`.
    pub fn matches_kind(&self, kind: AppKind) -> bool {
        matches!(
            (kind, self),
            (_, Slo::None)
                | (AppKind::Chatbot, Slo::LatencyPair { .. })
                | (AppKind::Imagegen, Slo::StepTime(_))
                | (AppKind::LiveCaptions | AppKind::Synthetic, Slo::SegmentTime(_))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    #[default]
    Greedy,
    #[serde(alias = "partition")]
    StaticPartition,
}

impl Policy {
    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Greedy => "greedy",
            Policy::StaticPartition => "static_partition",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Live,
    #[serde(alias = "sim")]
    Simulated,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Live => "live",
            Mode::Simulated => "simulated",
        }
    }
}

/// What happens to the rest of the workflow when a node fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    CancelDependents,
    CancelAll,
}

/// Command used to launch an application's server process.
///
/// Arguments may contain `{model}`, `{device}` and `{kv_offload_flag}`
/// placeholders; an argument that renders empty is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaunchSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ready_timeout: Option<Secs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileKernel {
    pub duration: Secs,
    /// Share of the device's SMs the kernel asks for, in percent.
    pub sm_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occupancy: Option<f64>,
}

/// Workload description for synthetic tasks (and an override for simulated apps).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadProfile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sleep: Option<Secs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernels: Option<Vec<ProfileKernel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub name: String,
    pub app_kind: AppKind,
    pub model: Option<String>,
    pub num_requests: u32,
    pub device: Device,
    pub mps_share: u32,
    pub slo: Slo,
    pub dataset: Option<PathBuf>,
    pub server: Option<String>,
    pub endpoint: Option<String>,
    pub launch: Option<LaunchSpec>,
    /// `Some(true)` requires the KV cache in host memory, `Some(false)` forbids it.
    pub kv_cache_on_cpu: Option<bool>,
    pub timeout: Option<f64>,
    pub profile: Option<WorkloadProfile>,
    pub steps: Option<u32>,
    pub max_tokens: Option<u32>,
    pub segment_seconds: Option<f64>,
    pub segments: Option<u32>,
}

impl TaskDefinition {
    /// A task with every optional field unset and `mps_share` at its default.
    pub fn new(name: impl Into<String>, app_kind: AppKind, device: Device, num_requests: u32) -> Self {
        Self {
            name: name.into(),
            app_kind,
            model: None,
            num_requests,
            device,
            mps_share: 100,
            slo: Slo::None,
            dataset: None,
            server: None,
            endpoint: None,
            launch: None,
            kv_cache_on_cpu: None,
            timeout: None,
            profile: None,
            steps: None,
            max_tokens: None,
            segment_seconds: None,
            segments: None,
        }
    }

    pub fn with_slo(mut self, slo: Slo) -> Self {
        self.slo = slo;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowNodeSpec {
    pub node_id: String,
    pub uses: String,
    #[serde(default)]
    pub depend_on: Vec<String>,
    #[serde(default)]
    pub background: bool,
}

impl WorkflowNodeSpec {
    pub fn new(node_id: impl Into<String>, uses: impl Into<String>) -> Self {
        Self {
            node_id: node_id.into(),
            uses: uses.into(),
            depend_on: Vec::new(),
            background: false,
        }
    }

    pub fn depends_on<I: IntoIterator<Item = S>, S: Into<String>>(mut self, deps: I) -> Self {
        self.depend_on = deps.into_iter().map(Into::into).collect();
        self
    }

    pub fn in_background(mut self) -> Self {
        self.background = true;
        self
    }
}

/// Parameters of the simulated device and lifecycle phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSettings {
    #[serde(default = "SimSettings::default_sm_count")]
    pub sm_count: u32,
    #[serde(default = "SimSettings::default_setup")]
    pub setup_time: Secs,
    #[serde(default = "SimSettings::default_cleanup")]
    pub cleanup_time: Secs,
    /// Slow-down applied to kernels of CPU-placed apps, which run without contention.
    #[serde(default = "SimSettings::default_cpu_slowdown")]
    pub cpu_slowdown: f64,
}

impl SimSettings {
    fn default_sm_count() -> u32 {
        72
    }
    fn default_setup() -> Secs {
        Secs(2.0)
    }
    fn default_cleanup() -> Secs {
        Secs(0.5)
    }
    fn default_cpu_slowdown() -> f64 {
        4.0
    }
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            sm_count: Self::default_sm_count(),
            setup_time: Self::default_setup(),
            cleanup_time: Self::default_cleanup(),
            cpu_slowdown: Self::default_cpu_slowdown(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub policy: Policy,
    pub mode: Mode,
    /// Monitor sampling period in seconds.
    pub sample_interval: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub max_concurrency: Option<usize>,
    pub on_failure: FailurePolicy,
    /// Default per-node wall-clock limit in seconds.
    pub node_timeout: f64,
    pub sim: SimSettings,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            policy: Policy::Greedy,
            mode: Mode::Live,
            sample_interval: 0.1,
            output_dir: PathBuf::from("genaibench-out"),
            seed: 0,
            max_concurrency: None,
            on_failure: FailurePolicy::CancelDependents,
            node_timeout: 1800.0,
            sim: SimSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub tasks: BTreeMap<String, TaskDefinition>,
    pub workflow: Vec<WorkflowNodeSpec>,
    pub options: RunOptions,
}

impl BenchmarkSpec {
    pub fn task_for(&self, node: &WorkflowNodeSpec) -> Option<&TaskDefinition> {
        self.tasks.get(&node.uses)
    }

    pub fn node(&self, node_id: &str) -> Option<&WorkflowNodeSpec> {
        self.workflow.iter().find(|n| n.node_id == node_id)
    }

    pub fn add_task(&mut self, task: TaskDefinition) {
        self.tasks.insert(task.name.clone(), task);
    }
}

// ---------------------------------------------------------------------------
// Violations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    SloMismatch,
    DanglingReference,
    UnknownTask,
    DuplicateNode,
    InvalidIdentifier,
    InvalidValue,
    DependencyCycle,
    ServerConflict,
}

impl ViolationKind {
    /// Reference-class violations are caught by the parser itself.
    pub fn is_reference(self) -> bool {
        matches!(self, ViolationKind::DanglingReference | ViolationKind::UnknownTask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} [{}]: {}", self.kind, self.subject, self.message)
    }
}

fn violation(kind: ViolationKind, subject: &str, message: impl Into<String>) -> Violation {
    Violation {
        kind,
        subject: subject.to_string(),
        message: message.into(),
    }
}

/// Check every semantic invariant of `spec`, reporting all violations found.
pub fn validate_spec(spec: &BenchmarkSpec) -> Vec<Violation> {
    use ViolationKind::*;
    let mut out = Vec::new();

    for (key, task) in &spec.tasks {
        if key != &task.name {
            out.push(violation(InvalidValue, key, format!("task keyed as `{key}` is named `{}`", task.name)));
        }
        if task.num_requests < 1 {
            out.push(violation(InvalidValue, key, "num_requests must be at least 1"));
        }
        if task.mps_share == 0 || task.mps_share > 100 {
            out.push(violation(InvalidValue, key, format!("mps must be in (0, 100], got {}", task.mps_share)));
        }
        if task.slo.durations().iter().any(|d| !positive(*d)) {
            out.push(violation(InvalidValue, key, "SLO durations must be strictly positive"));
        }
        if !task.slo.matches_kind(task.app_kind) {
            out.push(violation(
                SloMismatch,
                key,
                format!("{} SLO does not apply to a {} task", task.slo.variant_name(), task.app_kind),
            ));
        }
        if task.timeout.is_some_and(|t| !positive(t)) {
            out.push(violation(InvalidValue, key, "timeout must be positive"));
        }
        if task.segment_seconds.is_some_and(|t| !positive(t)) {
            out.push(violation(InvalidValue, key, "segment_seconds must be positive"));
        }
        if task.steps == Some(0) {
            out.push(violation(InvalidValue, key, "steps must be at least 1"));
        }
        if let Some(profile) = &task.profile {
            check_profile(key, profile, &mut out);
        }
        if task.app_kind == AppKind::Synthetic && task.profile.is_none() {
            out.push(violation(InvalidValue, key, "synthetic tasks need a `profile`"));
        }
    }

    // Tasks sharing one server must agree on the model and on KV-cache placement.
    let mut groups: BTreeMap<&str, Vec<&TaskDefinition>> = BTreeMap::new();
    for task in spec.tasks.values() {
        if let Some(server) = &task.server {
            groups.entry(server.as_str()).or_default().push(task);
        }
    }
    for (server, members) in &groups {
        let models: BTreeSet<_> = members.iter().map(|t| t.model.as_deref()).collect();
        if models.len() > 1 {
            out.push(violation(ServerConflict, server, "sharers of one server name different models"));
        }
        let kv: BTreeSet<_> = members.iter().filter_map(|t| t.kv_cache_on_cpu).collect();
        if kv.len() > 1 {
            out.push(violation(ServerConflict, server, "sharers demand incompatible KV-cache placement"));
        }
    }

    let mut seen = HashMap::new();
    for node in &spec.workflow {
        if seen.insert(node.node_id.as_str(), ()).is_some() {
            out.push(violation(DuplicateNode, &node.node_id, "node id declared twice"));
        }
        if !is_identifier(&node.node_id) {
            out.push(violation(InvalidIdentifier, &node.node_id, "node ids use letters, digits, `_`, `-` or `.`"));
        }
        if !spec.tasks.contains_key(&node.uses) {
            out.push(violation(UnknownTask, &node.node_id, format!("uses undeclared task `{}`", node.uses)));
        }
    }
    for node in &spec.workflow {
        for dep in &node.depend_on {
            if !seen.contains_key(dep.as_str()) {
                out.push(violation(DanglingReference, &node.node_id, format!("depends on undeclared node `{dep}`")));
            }
        }
    }
    if let Some(cycle) = workflow_cycle(&spec.workflow) {
        out.push(violation(DependencyCycle, &cycle[0], format!("dependency cycle {}", cycle.join(" -> "))));
    }

    let o = &spec.options;
    if !positive(o.sample_interval) {
        out.push(violation(InvalidValue, "sample_interval", "must be positive"));
    }
    if !positive(o.node_timeout) {
        out.push(violation(InvalidValue, "node_timeout", "must be positive"));
    }
    if o.max_concurrency == Some(0) {
        out.push(violation(InvalidValue, "max_concurrency", "must be at least 1"));
    }
    if o.sim.sm_count == 0 {
        out.push(violation(InvalidValue, "sim.sm_count", "must be at least 1"));
    }
    if !positive(o.sim.cpu_slowdown) || o.sim.setup_time.0 < 0.0 || o.sim.cleanup_time.0 < 0.0 {
        out.push(violation(InvalidValue, "sim", "timings must be non-negative and cpu_slowdown positive"));
    }
    out
}

/// False for zero, negatives and NaN.
pub(crate) fn positive(x: f64) -> bool {
    x > 0.0
}

fn check_profile(key: &str, profile: &WorkloadProfile, out: &mut Vec<Violation>) {
    use ViolationKind::InvalidValue;
    match (&profile.sleep, &profile.kernels) {
        (Some(_), Some(_)) | (None, None) => {
            out.push(violation(InvalidValue, key, "profile needs exactly one of `sleep` or `kernels`"));
        }
        (Some(s), None) if !positive(s.0) => {
            out.push(violation(InvalidValue, key, "profile sleep must be positive"));
        }
        (None, Some(kernels)) => {
            for k in kernels {
                let occ_ok = k.occupancy.is_none_or(|o| o > 0.0 && o <= 1.0);
                if !positive(k.duration.0) || !(k.sm_percent > 0.0 && k.sm_percent <= 100.0) || !occ_ok {
                    out.push(violation(
                        InvalidValue,
                        key,
                        "profile kernels need duration > 0, sm_percent in (0,100], occupancy in (0,1]",
                    ));
                    break;
                }
            }
        }
        _ => {}
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

/// Returns one witnessing cycle among `depend_on` edges, if any.
fn workflow_cycle(nodes: &[WorkflowNodeSpec]) -> Option<Vec<String>> {
    let index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.node_id.as_str(), i))
        .collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; nodes.len()];
    let mut stack: Vec<usize> = Vec::new();

    fn visit(
        i: usize,
        nodes: &[WorkflowNodeSpec],
        index: &HashMap<&str, usize>,
        color: &mut [u8],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<String>> {
        color[i] = 1;
        stack.push(i);
        for dep in &nodes[i].depend_on {
            let Some(&j) = index.get(dep.as_str()) else { continue };
            if color[j] == 1 {
                let pos = stack.iter().position(|&s| s == j).unwrap_or(0);
                let mut cycle: Vec<String> = stack[pos..].iter().map(|&s| nodes[s].node_id.clone()).collect();
                cycle.push(nodes[j].node_id.clone());
                return Some(cycle);
            }
            if color[j] == 0 {
                if let Some(c) = visit(j, nodes, index, color, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        color[i] = 2;
        None
    }

    for i in 0..nodes.len() {
        if color[i] == 0 {
            if let Some(c) = visit(i, nodes, &index, &mut color, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    kind: Option<AppKind>,
    #[serde(alias = "server_model", default, skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    num_requests: u32,
    device: Device,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    server: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    launch: Option<LaunchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kv_cache_on_cpu: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timeout: Option<Secs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    profile: Option<WorkloadProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segment_seconds: Option<Secs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segments: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    uses: String,
    #[serde(default)]
    depend_on: Vec<String>,
    #[serde(default)]
    background: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptions {
    policy: Option<Policy>,
    mode: Option<Mode>,
    sample_interval: Option<Secs>,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    max_concurrency: Option<usize>,
    on_failure: Option<FailurePolicy>,
    node_timeout: Option<Secs>,
    sim: Option<SimSettings>,
}

/// Parse a YAML benchmark document (or multi-document stream) into a spec.
pub fn parse_config(text: &str) -> Result<BenchmarkSpec, ConfigError> {
    parse_config_with_base(text, None)
}

/// Parse a config file, resolving `dataset` paths against the file's directory.
pub fn parse_config_file(path: impl AsRef<Path>) -> Result<BenchmarkSpec, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config_with_base(&text, Some(&base))
}

pub fn parse_config_with_base(text: &str, base: Option<&Path>) -> Result<BenchmarkSpec, ConfigError> {
    let mut options = Mapping::new();
    let mut raw_tasks: Vec<(String, Value)> = Vec::new();
    let mut raw_nodes: Vec<(String, Value)> = Vec::new();

    for doc in serde_yaml::Deserializer::from_str(text) {
        let value = Value::deserialize(doc).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let map = match value {
            Value::Null => continue,
            Value::Mapping(m) => m,
            _ => return Err(schema("<root>", "a config document must be a mapping")),
        };
        if is_workflow_document(&map) {
            collect_named(map, "<workflow>", &mut raw_nodes)?;
            continue;
        }
        for (k, v) in map {
            let key = key_string(&k, "<root>")?;
            if key == WORKFLOWS_KEY {
                match v {
                    Value::Null => {}
                    Value::Mapping(m) => collect_named(m, WORKFLOWS_KEY, &mut raw_nodes)?,
                    _ => return Err(schema(WORKFLOWS_KEY, "must be a mapping of node id to node")),
                }
            } else if OPTION_KEYS.contains(&key.as_str()) {
                if options.insert(Value::String(key.clone()), v).is_some() {
                    return Err(schema(key, "option given twice"));
                }
            } else {
                raw_tasks.push((key, v));
            }
        }
    }

    let raw_opts: RawOptions = serde_yaml::from_value(Value::Mapping(options))
        .map_err(|e| schema("<options>", e.to_string()))?;
    let mut spec = BenchmarkSpec {
        options: build_options(raw_opts),
        ..Default::default()
    };

    for (name, value) in raw_tasks {
        let task = build_task(&name, value, base)?;
        if spec.tasks.insert(name.clone(), task).is_some() {
            return Err(schema(name, "task declared twice"));
        }
    }

    let mut node_ids = BTreeSet::new();
    for (id, value) in raw_nodes {
        if !node_ids.insert(id.clone()) {
            return Err(schema(id, "workflow node declared twice"));
        }
        let raw: RawNode = match value {
            Value::Mapping(_) => serde_yaml::from_value(value).map_err(|e| schema(&id, e.to_string()))?,
            _ => return Err(schema(&id, "workflow node must be a mapping")),
        };
        let uses = resolve_task_name(&spec.tasks, &raw.uses).unwrap_or(raw.uses);
        spec.workflow.push(WorkflowNodeSpec {
            node_id: id,
            uses,
            depend_on: raw.depend_on,
            background: raw.background,
        });
    }

    let refs: Vec<Violation> = validate_spec(&spec)
        .into_iter()
        .filter(|v| v.kind.is_reference())
        .collect();
    if !refs.is_empty() {
        return Err(ConfigError::Reference(refs));
    }
    Ok(spec)
}

/// A document made only of `uses`-bearing mappings is a bare workflow section.
fn is_workflow_document(map: &Mapping) -> bool {
    !map.is_empty()
        && map.iter().all(|(k, v)| {
            let reserved = k
                .as_str()
                .is_some_and(|k| k == WORKFLOWS_KEY || OPTION_KEYS.contains(&k));
            !reserved && v.as_mapping().is_some_and(|m| m.contains_key("uses"))
        })
}

fn key_string(k: &Value, path: &str) -> Result<String, ConfigError> {
    match k {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(schema(path, "keys must be strings")),
    }
}

fn collect_named(map: Mapping, path: &str, out: &mut Vec<(String, Value)>) -> Result<(), ConfigError> {
    for (k, v) in map {
        out.push((key_string(&k, path)?, v));
    }
    Ok(())
}

fn build_options(raw: RawOptions) -> RunOptions {
    let d = RunOptions::default();
    RunOptions {
        policy: raw.policy.unwrap_or(d.policy),
        mode: raw.mode.unwrap_or(d.mode),
        sample_interval: raw.sample_interval.map_or(d.sample_interval, Secs::get),
        output_dir: raw.output_dir.unwrap_or(d.output_dir),
        seed: raw.seed.unwrap_or(d.seed),
        max_concurrency: raw.max_concurrency,
        on_failure: raw.on_failure.unwrap_or(d.on_failure),
        node_timeout: raw.node_timeout.map_or(d.node_timeout, Secs::get),
        sim: raw.sim.unwrap_or_default(),
    }
}

/// Split `Creating Cover Art (ImageGen)` into its base name and kind hint.
fn split_kind_suffix(name: &str) -> (&str, Option<&str>) {
    let trimmed = name.trim_end();
    if let Some(stripped) = trimmed.strip_suffix(')') {
        if let Some(open) = stripped.rfind('(') {
            return (stripped[..open].trim_end(), Some(&stripped[open + 1..]));
        }
    }
    (trimmed, None)
}

fn resolve_task_name(tasks: &BTreeMap<String, TaskDefinition>, uses: &str) -> Option<String> {
    if tasks.contains_key(uses) {
        return Some(uses.to_string());
    }
    let mut hits = tasks.keys().filter(|k| split_kind_suffix(k).0 == uses.trim());
    match (hits.next(), hits.next()) {
        (Some(only), None) => Some(only.clone()),
        _ => None,
    }
}

fn build_task(name: &str, value: Value, base: Option<&Path>) -> Result<TaskDefinition, ConfigError> {
    let mut map = match value {
        Value::Mapping(m) => m,
        _ => return Err(schema(name, "task definition must be a mapping (unknown top-level key?)")),
    };
    let slo_value = map.remove("slo");
    let raw: RawTask = serde_yaml::from_value(Value::Mapping(map)).map_err(|e| schema(name, e.to_string()))?;

    let app_kind = match raw.kind {
        Some(k) => k,
        None => split_kind_suffix(name)
            .1
            .and_then(AppKind::from_loose)
            .ok_or_else(|| schema(name, "missing `type` and no `(Kind)` suffix in the task name"))?,
    };
    let slo = match slo_value {
        None | Some(Value::Null) => Slo::None,
        Some(v) => parse_slo(name, app_kind, v)?,
    };
    let dataset = raw.dataset.map(|p| match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    });

    Ok(TaskDefinition {
        name: name.to_string(),
        app_kind,
        model: raw.model,
        num_requests: raw.num_requests,
        device: raw.device,
        mps_share: raw.mps.unwrap_or(100),
        slo,
        dataset,
        server: raw.server,
        endpoint: raw.endpoint,
        launch: raw.launch,
        kv_cache_on_cpu: raw.kv_cache_on_cpu,
        timeout: raw.timeout.map(Secs::get),
        profile: raw.profile,
        steps: raw.steps,
        max_tokens: raw.max_tokens,
        segment_seconds: raw.segment_seconds.map(Secs::get),
        segments: raw.segments,
    })
}

fn parse_secs_value(path: &str, v: Value) -> Result<f64, ConfigError> {
    serde_yaml::from_value::<Secs>(v)
        .map(Secs::get)
        .map_err(|e| schema(path, e.to_string()))
}

/// `[ttft, tpot]` is a latency pair; a scalar is a per-step limit for image
/// generation and a per-request/segment limit otherwise; the mapping forms
/// name their variant explicitly.
fn parse_slo(task: &str, kind: AppKind, v: Value) -> Result<Slo, ConfigError> {
    let path = format!("{task}.slo");
    match v {
        Value::Sequence(items) => {
            if items.len() != 2 {
                return Err(schema(path, "a latency-pair SLO is [ttft, tpot]"));
            }
            let mut it = items.into_iter();
            let ttft = parse_secs_value(&path, it.next().unwrap_or_default())?;
            let tpot = parse_secs_value(&path, it.next().unwrap_or_default())?;
            Ok(Slo::LatencyPair { ttft, tpot })
        }
        Value::Mapping(m) => {
            let mut fields: BTreeMap<String, f64> = BTreeMap::new();
            for (k, v) in m {
                let k = key_string(&k, &path)?;
                if !["ttft", "tpot", "step_time", "segment_time"].contains(&k.as_str()) {
                    return Err(schema(&path, format!("unknown SLO field `{k}`")));
                }
                fields.insert(k, parse_secs_value(&path, v)?);
            }
            let get = |k: &str| fields.get(k).copied();
            match (get("ttft"), get("tpot"), get("step_time"), get("segment_time")) {
                (Some(ttft), Some(tpot), None, None) => Ok(Slo::LatencyPair { ttft, tpot }),
                (None, None, Some(s), None) => Ok(Slo::StepTime(s)),
                (None, None, None, Some(s)) => Ok(Slo::SegmentTime(s)),
                _ => Err(schema(
                    path,
                    "SLO mapping must be {ttft, tpot}, {step_time} or {segment_time}",
                )),
            }
        }
        Value::String(ref s) if s.eq_ignore_ascii_case("none") => Ok(Slo::None),
        scalar => {
            let secs = parse_secs_value(&path, scalar)?;
            Ok(match kind {
                AppKind::Imagegen => Slo::StepTime(secs),
                _ => Slo::SegmentTime(secs),
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization back to the canonical YAML layout
// ---------------------------------------------------------------------------

fn slo_to_value(slo: &Slo) -> Option<Value> {
    let secs = |s: f64| Value::String(format!("{s}s"));
    match *slo {
        Slo::None => None,
        Slo::LatencyPair { ttft, tpot } => Some(Value::Sequence(vec![secs(ttft), secs(tpot)])),
        Slo::StepTime(s) => {
            let mut m = Mapping::new();
            m.insert("step_time".into(), secs(s));
            Some(Value::Mapping(m))
        }
        Slo::SegmentTime(s) => {
            let mut m = Mapping::new();
            m.insert("segment_time".into(), secs(s));
            Some(Value::Mapping(m))
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_yaml::to_value(v).unwrap_or(Value::Null)
}

/// Render `spec` in the canonical config layout; `parse_config` reads it back unchanged.
pub fn to_yaml(spec: &BenchmarkSpec) -> String {
    let o = &spec.options;
    let mut root = Mapping::new();
    root.insert("policy".into(), to_value(&o.policy));
    root.insert("mode".into(), to_value(&o.mode));
    root.insert("sample_interval".into(), to_value(&Secs(o.sample_interval)));
    root.insert("output_dir".into(), to_value(&o.output_dir));
    root.insert("seed".into(), to_value(&o.seed));
    if let Some(mc) = o.max_concurrency {
        root.insert("max_concurrency".into(), to_value(&mc));
    }
    root.insert("on_failure".into(), to_value(&o.on_failure));
    root.insert("node_timeout".into(), to_value(&Secs(o.node_timeout)));
    root.insert("sim".into(), to_value(&o.sim));

    for (name, t) in &spec.tasks {
        let raw = RawTask {
            kind: Some(t.app_kind),
            model: t.model.clone(),
            num_requests: t.num_requests,
            device: t.device,
            mps: Some(t.mps_share),
            dataset: t.dataset.clone(),
            server: t.server.clone(),
            endpoint: t.endpoint.clone(),
            launch: t.launch.clone(),
            kv_cache_on_cpu: t.kv_cache_on_cpu,
            timeout: t.timeout.map(Secs),
            profile: t.profile.clone(),
            steps: t.steps,
            max_tokens: t.max_tokens,
            segment_seconds: t.segment_seconds.map(Secs),
            segments: t.segments,
        };
        let mut value = to_value(&raw);
        if let (Value::Mapping(m), Some(slo)) = (&mut value, slo_to_value(&t.slo)) {
            m.insert("slo".into(), slo);
        }
        root.insert(Value::String(name.clone()), value);
    }

    let mut nodes = Mapping::new();
    for n in &spec.workflow {
        let mut m = Mapping::new();
        m.insert("uses".into(), Value::String(n.uses.clone()));
        if !n.depend_on.is_empty() {
            m.insert("depend_on".into(), to_value(&n.depend_on));
        }
        if n.background {
            m.insert("background".into(), Value::Bool(true));
        }
        nodes.insert(Value::String(n.node_id.clone()), Value::Mapping(m));
    }
    root.insert(WORKFLOWS_KEY.into(), Value::Mapping(nodes));
    serde_yaml::to_string(&Value::Mapping(root)).unwrap_or_default()
}
