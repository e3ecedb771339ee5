//! Drives the execution graph to completion.
//!
//! The scheduling logic is shared between the live backend (threads talking
//! to real servers) and the simulated backend (a deterministic event loop
//! over [`crate::simgpu`]). Rules:
//!
//! * a node is dispatched once all its predecessors finished; if any of them
//!   failed or was cancelled, the node is cancelled instead;
//! * a cleanup runs exactly when its setup finished, after every exec node it
//!   serves is terminal;
//! * the workflow is complete once every non-background exec node is
//!   terminal; remaining exec nodes are then cancelled and cleanups run.

mod live;
mod sim;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::adapters::{AdapterError, AdapterRegistry, RequestRecord};
use crate::clock::{nanos_to_secs, secs_to_nanos, RunClock};
use crate::config::{validate_spec, BenchmarkSpec, FailurePolicy, Mode, Violation};
use crate::dag::{build_dag, validate_dag, Dag, DagError, NodeKind};
use crate::monitor::{default_collectors, start_monitor, Collector, MonitorError, MonitorOutput};
use crate::orchestrator::{apply_all, OrchestratorError, Platform, PolicyContext};
use crate::trace::{host_name, NodeEvent, NodeFailure, Phase, RunHeader, RunTrace};

pub use sim::{sim_workload, PlanKernel, RequestPlan, TokenMark};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid benchmark spec:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    InvalidSpec(Vec<Violation>),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Orchestrator(#[from] OrchestratorError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error("simulation error: {0}")]
    Sim(String),
}

/// Result of one node as reported by a backend.
#[derive(Debug)]
pub(crate) enum Outcome {
    Finished(Vec<RequestRecord>),
    Failed { reason: String, records: Vec<RequestRecord> },
}

#[derive(Debug)]
pub(crate) enum BackendEvent {
    Started { idx: usize, t: u64 },
    Done { idx: usize, t: u64, outcome: Outcome },
    /// Time advanced without a node event (deadline reached or poll timeout).
    Tick,
}

pub(crate) trait Backend {
    fn now(&self) -> u64;
    /// Begin executing node `idx`. An error fails the node immediately.
    fn start(&mut self, idx: usize) -> Result<(), String>;
    /// Stop node `idx`; returns records it had already completed.
    fn cancel(&mut self, idx: usize) -> Vec<RequestRecord>;
    /// Next event no later than `deadline`; `None` when nothing can happen any more.
    fn next(&mut self, deadline: Option<u64>) -> Option<BackendEvent>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Pending,
    Running,
    Done(Phase),
}

struct Scheduler<'a> {
    dag: &'a Dag,
    spec: &'a BenchmarkSpec,
    state: Vec<State>,
    started_at: Vec<Option<u64>>,
    timeout_ns: Vec<u64>,
    /// Setup node position for every cleanup node.
    setup_for: Vec<Option<usize>>,
    events: Vec<NodeEvent>,
    requests: Vec<RequestRecord>,
    failures: Vec<NodeFailure>,
    draining: bool,
    cancel_all: bool,
    interrupted: bool,
    abort: Arc<AtomicBool>,
}

impl<'a> Scheduler<'a> {
    fn new(dag: &'a Dag, spec: &'a BenchmarkSpec, abort: Arc<AtomicBool>) -> Self {
        let n = dag.len();
        let setup_for = dag
            .nodes()
            .iter()
            .map(|node| match node.kind {
                NodeKind::Cleanup => dag
                    .nodes()
                    .iter()
                    .position(|s| s.kind == NodeKind::Setup && s.app_instance == node.app_instance),
                _ => None,
            })
            .collect();
        let timeout_ns = dag
            .nodes()
            .iter()
            .map(|node| {
                if node.kind != NodeKind::Exec {
                    return secs_to_nanos(spec.options.node_timeout);
                }
                let task_timeout = node
                    .instances
                    .iter()
                    .filter_map(|i| spec.node(i).and_then(|w| spec.task_for(w)))
                    .filter_map(|t| t.timeout)
                    .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))));
                secs_to_nanos(task_timeout.unwrap_or(spec.options.node_timeout))
            })
            .collect();
        Self {
            dag,
            spec,
            state: vec![State::Pending; n],
            started_at: vec![None; n],
            timeout_ns,
            setup_for,
            events: Vec::new(),
            requests: Vec::new(),
            failures: Vec::new(),
            draining: false,
            cancel_all: false,
            interrupted: false,
            abort,
        }
    }

    fn emit(&mut self, idx: usize, phase: Phase, t: u64, detail: Option<String>) {
        self.events.push(NodeEvent {
            node_id: self.dag.nodes()[idx].id.clone(),
            phase,
            timestamp: t,
            detail,
        });
    }

    fn terminal(&self, idx: usize) -> bool {
        matches!(self.state[idx], State::Done(_))
    }

    fn finish(&mut self, idx: usize, phase: Phase, t: u64, detail: Option<String>) {
        self.state[idx] = State::Done(phase);
        if phase == Phase::Failed {
            self.failures.push(NodeFailure {
                node_id: self.dag.nodes()[idx].id.clone(),
                reason: detail.clone().unwrap_or_default(),
            });
            if self.spec.options.on_failure == FailurePolicy::CancelAll {
                self.cancel_all = true;
            }
        }
        self.emit(idx, phase, t, detail);
    }

    fn absorb_records(&mut self, mut records: Vec<RequestRecord>, incomplete: bool) {
        if incomplete {
            for r in &mut records {
                r.incomplete = true;
            }
        }
        self.requests.extend(records);
    }

    fn workflow_complete(&self) -> bool {
        self.dag
            .nodes()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::Exec && !n.background)
            .all(|(i, _)| self.terminal(i))
    }

    fn running_execs(&self) -> usize {
        self.dag
            .nodes()
            .iter()
            .enumerate()
            .filter(|(i, n)| n.kind == NodeKind::Exec && self.state[*i] == State::Running)
            .count()
    }

    /// Cancel running exec nodes and every pending node other than a cleanup.
    fn start_drain<B: Backend>(&mut self, backend: &mut B) {
        self.draining = true;
        let now = backend.now();
        for i in 0..self.dag.len() {
            let kind = self.dag.nodes()[i].kind;
            match self.state[i] {
                State::Running if kind == NodeKind::Exec => {
                    let partial = backend.cancel(i);
                    self.absorb_records(partial, true);
                    self.finish(i, Phase::Cancelled, now, Some("workflow ended".into()));
                }
                State::Pending if kind != NodeKind::Cleanup => {
                    self.finish(i, Phase::Cancelled, now, Some("workflow ended".into()));
                }
                _ => {}
            }
        }
    }

    /// Resolve pending nodes whose inputs are settled; returns nodes to dispatch.
    fn resolve(&mut self, now: u64) -> Vec<usize> {
        let mut ready = Vec::new();
        loop {
            let mut changed = false;
            for i in 0..self.dag.len() {
                if self.state[i] != State::Pending || ready.contains(&i) {
                    continue;
                }
                let preds = self.dag.pred_indices(i);
                if !preds.iter().all(|&p| self.terminal(p)) {
                    continue;
                }
                let node = &self.dag.nodes()[i];
                let run = if node.kind == NodeKind::Cleanup {
                    match self.setup_for[i] {
                        Some(s) if !self.terminal(s) => continue,
                        Some(s) => self.state[s] == State::Done(Phase::Finished),
                        None => true,
                    }
                } else {
                    !self.draining && preds.iter().all(|&p| self.state[p] == State::Done(Phase::Finished))
                };
                if run {
                    ready.push(i);
                } else {
                    let why = if node.kind == NodeKind::Cleanup {
                        "setup did not finish"
                    } else if self.draining {
                        "workflow ended"
                    } else {
                        "a predecessor did not finish"
                    };
                    self.finish(i, Phase::Cancelled, now, Some(why.into()));
                    changed = true;
                }
            }
            if !changed {
                return ready;
            }
        }
    }

    fn drive<B: Backend>(&mut self, backend: &mut B) {
        let max_exec = self.spec.options.max_concurrency.unwrap_or(usize::MAX).max(1);
        loop {
            if !self.draining && self.abort.load(Ordering::Relaxed) {
                self.interrupted = true;
                self.start_drain(backend);
            }
            if !self.draining && self.cancel_all {
                self.start_drain(backend);
            }
            let now = backend.now();
            let ready = self.resolve(now);
            let mut running_exec = self.running_execs();
            for i in ready {
                let kind = self.dag.nodes()[i].kind;
                if kind == NodeKind::Exec {
                    if running_exec >= max_exec {
                        continue;
                    }
                    running_exec += 1;
                }
                self.emit(i, Phase::Dispatched, now, None);
                self.state[i] = State::Running;
                if let Err(reason) = backend.start(i) {
                    self.finish(i, Phase::Failed, backend.now(), Some(reason));
                }
            }
            if !self.draining && self.workflow_complete() {
                self.start_drain(backend);
                continue;
            }
            if self.state.iter().all(|s| matches!(s, State::Done(_))) {
                return;
            }
            let deadline = (0..self.dag.len())
                .filter(|&i| self.state[i] == State::Running)
                .filter_map(|i| self.started_at[i].map(|s| s.saturating_add(self.timeout_ns[i])))
                .min();
            match backend.next(deadline) {
                Some(BackendEvent::Started { idx, t }) => {
                    if self.state[idx] == State::Running && self.started_at[idx].is_none() {
                        self.started_at[idx] = Some(t);
                        self.emit(idx, Phase::Started, t, None);
                    }
                }
                Some(BackendEvent::Done { idx, t, outcome }) => {
                    if self.state[idx] != State::Running {
                        continue; // cancelled or timed out earlier
                    }
                    if self.started_at[idx].is_none() {
                        self.started_at[idx] = Some(t);
                        self.emit(idx, Phase::Started, t, None);
                    }
                    match outcome {
                        Outcome::Finished(records) => {
                            self.absorb_records(records, false);
                            self.finish(idx, Phase::Finished, t, None);
                        }
                        Outcome::Failed { reason, records } => {
                            self.absorb_records(records, true);
                            self.finish(idx, Phase::Failed, t, Some(reason));
                        }
                    }
                }
                Some(BackendEvent::Tick) => {
                    let now = backend.now();
                    for i in 0..self.dag.len() {
                        let Some(s) = self.started_at[i] else { continue };
                        if self.state[i] == State::Running && now >= s.saturating_add(self.timeout_ns[i]) {
                            let partial = backend.cancel(i);
                            self.absorb_records(partial, true);
                            let limit = nanos_to_secs(self.timeout_ns[i]);
                            self.finish(i, Phase::Failed, now, Some(format!("timed out after {limit}s")));
                        }
                    }
                }
                None => {
                    // Nothing left that could make progress.
                    let now = backend.now();
                    for i in 0..self.dag.len() {
                        if !self.terminal(i) {
                            self.finish(i, Phase::Failed, now, Some("stalled".into()));
                        }
                    }
                    return;
                }
            }
        }
    }
}

/// Configured engine; [`run`] is the shorthand with built-in adapters.
pub struct Engine {
    registry: AdapterRegistry,
    collectors: Option<Vec<Box<dyn Collector>>>,
    platform: Option<Platform>,
    abort: Arc<AtomicBool>,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl Engine {
    pub fn new() -> Self {
        Self {
            registry: AdapterRegistry::builtin(),
            collectors: None,
            platform: None,
            abort: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_registry(mut self, registry: AdapterRegistry) -> Self {
        self.registry = registry;
        self
    }

    /// Replace the host collectors used in live mode.
    pub fn with_collectors(mut self, collectors: Vec<Box<dyn Collector>>) -> Self {
        self.collectors = Some(collectors);
        self
    }

    pub fn with_platform(mut self, platform: Platform) -> Self {
        self.platform = Some(platform);
        self
    }

    /// Flag that interrupts a run when set: nodes are cancelled, cleanups still run.
    pub fn abort_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.abort)
    }

    pub fn run(&mut self, spec: &BenchmarkSpec) -> Result<RunTrace, EngineError> {
        let violations = validate_spec(spec);
        if !violations.is_empty() {
            return Err(EngineError::InvalidSpec(violations));
        }
        let dag = build_dag(spec);
        validate_dag(&dag)?;
        let ctx = PolicyContext::for_spec(spec)?;
        let mut header = RunHeader {
            mode: spec.options.mode,
            policy: spec.options.policy,
            seed: spec.options.seed,
            started_unix: None,
            host: host_name(),
            shares: ctx.shares().clone(),
            sample_interval: spec.options.sample_interval,
        };
        let mut sched = Scheduler::new(&dag, spec, Arc::clone(&self.abort));
        let monitor_out = match spec.options.mode {
            Mode::Simulated => {
                let mut backend = sim::SimBackend::new(spec, &dag, &ctx)?;
                sched.drive(&mut backend);
                backend.utilization(spec.options.sample_interval)
            }
            Mode::Live => {
                let platform = self
                    .platform
                    .clone()
                    .unwrap_or_else(|| Platform::detect(spec.options.sim.sm_count));
                let bindings = apply_all(&ctx, Mode::Live, &platform)?;
                for t in spec.tasks.values() {
                    self.registry.get(t)?;
                }
                header.started_unix = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .ok()
                    .map(|d| d.as_secs_f64());
                let clock = RunClock::start();
                let interval = Duration::from_secs_f64(spec.options.sample_interval);
                let collectors = self.collectors.take().unwrap_or_else(|| {
                    default_collectors(interval, spec.tasks.values().any(|t| t.device.uses_gpu()))
                });
                let monitor = start_monitor(collectors, interval, clock)?;
                let mut backend = live::LiveBackend::new(spec, &dag, &ctx, bindings, self.registry.clone(), clock);
                sched.drive(&mut backend);
                backend.detach();
                monitor.stop()
            }
        };
        let mut events = std::mem::take(&mut sched.events);
        events.sort_by_key(|e| e.timestamp);
        let partial = !sched.failures.is_empty() || sched.interrupted;
        let mut notes = monitor_out.notes.clone();
        if sched.interrupted {
            notes.push("run interrupted".into());
        }
        Ok(RunTrace {
            header,
            events,
            requests: std::mem::take(&mut sched.requests),
            samples: monitor_out.samples,
            gaps: monitor_out.gaps,
            notes,
            failures: std::mem::take(&mut sched.failures),
            partial,
            interrupted: sched.interrupted,
            monitor_cpu_secs: (spec.options.mode == Mode::Live).then_some(monitor_out.cpu_time_secs),
            spec_snapshot: snapshot(spec),
        })
    }
}

/// The spec as recorded in the trace; the output directory is left out so
/// traces do not depend on where they are written.
fn snapshot(spec: &BenchmarkSpec) -> BenchmarkSpec {
    let mut s = spec.clone();
    s.options.output_dir = std::path::PathBuf::new();
    s
}

/// Run a spec with the built-in adapters and host collectors.
pub fn run(spec: &BenchmarkSpec) -> Result<RunTrace, EngineError> {
    Engine::new().run(spec)
}

pub(crate) fn monitor_output(samples: Vec<crate::monitor::MetricSample>) -> MonitorOutput {
    MonitorOutput {
        samples,
        ..Default::default()
    }
}
