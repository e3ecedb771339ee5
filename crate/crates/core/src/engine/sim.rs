//! Deterministic backend: apps issue kernel plans on a simulated GPU.

use std::collections::{BTreeSet, HashMap, VecDeque};

use rand::Rng;

use super::{Backend, BackendEvent, EngineError, Outcome};
use crate::adapters::{request_rng, segment_wav, Marks, RequestRecord, DEFAULT_SEGMENT_SECONDS, DEFAULT_STEPS};
use crate::clock::{nanos_to_secs, secs_to_nanos};
use crate::config::{AppKind, BenchmarkSpec, TaskDefinition};
use crate::dag::{placement_unit, Dag, NodeKind};
use crate::monitor::MonitorOutput;
use crate::orchestrator::PolicyContext;
use crate::simgpu::{synth_utilization, DeviceSim, KernelRecord, SimDevice, SimKernel};

const DEFAULT_MAX_TOKENS: u32 = 128;
const DEFAULT_CAPTION_SEGMENTS: u32 = 150;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenMark {
    None,
    Token,
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanKernel {
    pub duration: f64,
    /// Percent of the device's SMs the kernel asks for.
    pub sm_percent: f64,
    pub occupancy: f64,
    pub mark: TokenMark,
}

impl PlanKernel {
    fn new(duration: f64, sm_percent: f64, occupancy: f64, mark: TokenMark) -> Self {
        Self {
            duration,
            sm_percent,
            occupancy,
            mark,
        }
    }

    fn demand(&self, sm_count: u32) -> u32 {
        let d = (self.sm_percent / 100.0 * f64::from(sm_count)).ceil();
        (d as u32).clamp(1, sm_count.max(1))
    }
}

/// Kernels of one request, preceded by CPU-side time.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RequestPlan {
    pub pre_delay: f64,
    pub kernels: Vec<PlanKernel>,
}

/// Number of caption segments one pass over the task's audio produces.
fn caption_segments(task: &TaskDefinition) -> u32 {
    if let Some(n) = task.segments {
        return n;
    }
    let period = task.segment_seconds.unwrap_or(DEFAULT_SEGMENT_SECONDS);
    task.dataset
        .as_ref()
        .and_then(|p| segment_wav(p, period).ok())
        .map(|(_, segs)| segs.len() as u32)
        .unwrap_or(DEFAULT_CAPTION_SEGMENTS)
}

/// Request plans a task issues in simulation, one per request.
///
/// Synthetic tasks follow their profile; the other kinds use fixed kernel
/// shapes, with per-request variation drawn from `request_rng(seed, node_id)`.
pub fn sim_workload(task: &TaskDefinition, seed: u64, node_id: &str) -> Vec<RequestPlan> {
    let mut rng = request_rng(seed, node_id);
    let n = task.num_requests as usize;
    match task.app_kind {
        AppKind::Chatbot => {
            let max = task.max_tokens.unwrap_or(DEFAULT_MAX_TOKENS).max(1);
            (0..n)
                .map(|_| {
                    let tokens = rng.random_range((max / 2).max(1)..=max);
                    let mut kernels = vec![PlanKernel::new(0.080, 100.0, 0.9, TokenMark::Token)];
                    for _ in 1..tokens {
                        kernels.push(PlanKernel::new(0.030, 50.0, 0.9, TokenMark::Token));
                    }
                    RequestPlan { pre_delay: 0.0, kernels }
                })
                .collect()
        }
        AppKind::DeepResearch => (0..n)
            .map(|_| RequestPlan {
                pre_delay: 0.0,
                kernels: vec![PlanKernel::new(0.100, 100.0, 0.8, TokenMark::None); 300],
            })
            .collect(),
        AppKind::Imagegen => {
            let steps = task.steps.unwrap_or(DEFAULT_STEPS).max(1) as usize;
            (0..n)
                .map(|_| RequestPlan {
                    pre_delay: 0.0,
                    kernels: vec![PlanKernel::new(0.600, 100.0, 0.4, TokenMark::Step); steps],
                })
                .collect()
        }
        AppKind::LiveCaptions => {
            let total = caption_segments(task) as usize * n;
            (0..total)
                .map(|_| {
                    let decodes = rng.random_range(16..=32);
                    let mut kernels = vec![PlanKernel::new(0.050, 100.0, 0.9, TokenMark::None)];
                    kernels.extend(std::iter::repeat_n(PlanKernel::new(0.004, 4.0, 0.3, TokenMark::None), decodes));
                    RequestPlan { pre_delay: 0.0, kernels }
                })
                .collect()
        }
        AppKind::Synthetic => {
            let profile = task.profile.clone().unwrap_or_default();
            let kernels: Vec<PlanKernel> = profile
                .kernels
                .iter()
                .flatten()
                .map(|k| PlanKernel::new(k.duration.get(), k.sm_percent, k.occupancy.unwrap_or(1.0), TokenMark::None))
                .collect();
            let pre_delay = profile.sleep.map(|s| s.get()).unwrap_or(0.0);
            vec![RequestPlan { pre_delay, kernels }; n]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Timer {
    NodeDone,
    RequestStart(u32),
    RequestSubmit(u32),
    CpuDone(u32),
}

#[derive(Debug)]
struct InFlight {
    t_submit: u64,
    remaining: usize,
    ends: Vec<(TokenMark, u64)>,
}

#[derive(Debug)]
struct ExecRun {
    task: TaskDefinition,
    node_id: String,
    unit: String,
    on_gpu: bool,
    paced: bool,
    plans: Vec<RequestPlan>,
    completed: usize,
    records: Vec<RequestRecord>,
    inflight: HashMap<u32, InFlight>,
    cpu_busy_until: u64,
}

pub(crate) struct SimBackend {
    now: u64,
    seq: u64,
    dev: DeviceSim,
    device: SimDevice,
    sm_count: u32,
    setup_ns: u64,
    cleanup_ns: u64,
    cpu_slowdown: f64,
    seed: u64,
    kinds: Vec<NodeKind>,
    execs: HashMap<usize, ExecRun>,
    timers: BTreeSet<(u64, u64, usize, Timer)>,
    queue: VecDeque<BackendEvent>,
    live: Vec<bool>,
}

fn tag(idx: usize, req: u32) -> u64 {
    ((idx as u64) << 32) | u64::from(req)
}

impl SimBackend {
    pub(crate) fn new(spec: &BenchmarkSpec, dag: &Dag, ctx: &PolicyContext) -> Result<Self, EngineError> {
        let sim = &spec.options.sim;
        let device = ctx.sim_device(sim.sm_count)?;
        let dev = DeviceSim::new(&device, ctx.policy).map_err(|e| EngineError::Sim(e.to_string()))?;
        let mut execs = HashMap::new();
        for (i, node) in dag.nodes().iter().enumerate() {
            if node.kind != NodeKind::Exec {
                continue;
            }
            let wn = spec.node(&node.app_instance).expect("exec node from the workflow");
            let task = spec.task_for(wn).expect("validated task reference").clone();
            let plans = sim_workload(&task, spec.options.seed, &wn.node_id);
            execs.insert(
                i,
                ExecRun {
                    on_gpu: task.device.uses_gpu(),
                    paced: task.app_kind == AppKind::LiveCaptions,
                    unit: placement_unit(spec, &wn.node_id),
                    node_id: wn.node_id.clone(),
                    task,
                    plans,
                    completed: 0,
                    records: Vec::new(),
                    inflight: HashMap::new(),
                    cpu_busy_until: 0,
                },
            );
        }
        Ok(Self {
            now: 0,
            seq: 0,
            dev,
            device,
            sm_count: sim.sm_count,
            setup_ns: secs_to_nanos(sim.setup_time.get()),
            cleanup_ns: secs_to_nanos(sim.cleanup_time.get()),
            cpu_slowdown: sim.cpu_slowdown,
            seed: spec.options.seed,
            kinds: dag.nodes().iter().map(|n| n.kind).collect(),
            execs,
            timers: BTreeSet::new(),
            queue: VecDeque::new(),
            live: vec![false; dag.len()],
        })
    }

    /// SMACT/SMOCC series of the whole run.
    pub(crate) fn utilization(self, interval: f64) -> MonitorOutput {
        let device = self.device.clone();
        let result = self.dev.into_result();
        let mut out = super::monitor_output(synth_utilization(&result, &device, interval));
        out.notes.push(format!("simulated device: {} SMs, seed {}", self.sm_count, self.seed));
        out
    }

    fn schedule(&mut self, t: u64, idx: usize, timer: Timer) {
        self.seq += 1;
        self.timers.insert((t, self.seq, idx, timer));
    }

    fn start_request(&mut self, idx: usize, req: u32) {
        let now = self.now;
        let run = self.execs.get_mut(&idx).expect("exec run");
        let plan = &run.plans[req as usize];
        run.inflight.insert(
            req,
            InFlight {
                t_submit: now,
                remaining: plan.kernels.len(),
                ends: Vec::new(),
            },
        );
        let pre = secs_to_nanos(plan.pre_delay);
        if pre > 0 {
            self.schedule(now + pre, idx, Timer::RequestSubmit(req));
        } else {
            self.submit_request(idx, req);
        }
    }

    fn submit_request(&mut self, idx: usize, req: u32) {
        let now = self.now;
        let sm_count = self.sm_count;
        let slowdown = self.cpu_slowdown;
        let run = self.execs.get_mut(&idx).expect("exec run");
        let plan = run.plans[req as usize].clone();
        if plan.kernels.is_empty() {
            self.finish_request(idx, req);
            return;
        }
        if run.on_gpu {
            for k in &plan.kernels {
                let kernel = SimKernel {
                    app: run.unit.clone(),
                    submit_ns: now,
                    duration_ns: secs_to_nanos(k.duration).max(1),
                    sm_demand: k.demand(sm_count),
                    occupancy: k.occupancy,
                };
                if let Err(e) = self.dev.submit(&kernel, tag(idx, req)) {
                    let fl = run.inflight.remove(&req).expect("in flight");
                    let rec = RequestRecord::new(&run.task.name, &run.node_id, req, nanos_to_secs(fl.t_submit))
                        .failed(nanos_to_secs(now), e.to_string());
                    run.records.push(rec);
                    self.dev.cancel_tagged(tag(idx, req));
                    self.after_request(idx, req);
                    return;
                }
            }
        } else {
            // CPU placement: one request at a time per node, no device contention.
            let mut t = now.max(run.cpu_busy_until);
            let fl = run.inflight.get_mut(&req).expect("in flight");
            for k in &plan.kernels {
                t += secs_to_nanos(k.duration * slowdown).max(1);
                fl.ends.push((k.mark, t));
            }
            fl.remaining = 0;
            run.cpu_busy_until = t;
            self.schedule(t, idx, Timer::CpuDone(req));
        }
    }

    fn on_kernel(&mut self, k: &KernelRecord) {
        let idx = (k.tag >> 32) as usize;
        let req = (k.tag & 0xffff_ffff) as u32;
        if !self.live.get(idx).copied().unwrap_or(false) {
            return;
        }
        let Some(run) = self.execs.get_mut(&idx) else { return };
        let mark = {
            let Some(fl) = run.inflight.get(&req) else { return };
            let plan = &run.plans[req as usize];
            plan.kernels[plan.kernels.len() - fl.remaining].mark
        };
        let fl = run.inflight.get_mut(&req).expect("in flight");
        fl.ends.push((mark, k.end_ns));
        fl.remaining -= 1;
        if fl.remaining == 0 {
            self.finish_request(idx, req);
        }
    }

    fn finish_request(&mut self, idx: usize, req: u32) {
        let now = self.now;
        let run = self.execs.get_mut(&idx).expect("exec run");
        let fl = run.inflight.remove(&req).expect("in flight");
        let rec = build_record(run, req, &fl, now);
        run.records.push(rec);
        self.after_request(idx, req);
    }

    fn after_request(&mut self, idx: usize, req: u32) {
        let now = self.now;
        let run = self.execs.get_mut(&idx).expect("exec run");
        run.completed += 1;
        let total = run.plans.len();
        let (paced, completed) = (run.paced, run.completed);
        if !paced && (req as usize) + 1 < total {
            self.schedule(now, idx, Timer::RequestStart(req + 1));
        }
        if completed == total {
            self.complete_exec(idx);
        }
    }

    fn complete_exec(&mut self, idx: usize) {
        let run = self.execs.get_mut(&idx).expect("exec run");
        let mut records = std::mem::take(&mut run.records);
        records.sort_by_key(|r| r.request_id);
        self.live[idx] = false;
        let outcome = if !records.is_empty() && records.iter().all(|r| !r.ok) {
            Outcome::Failed {
                reason: "every request failed".into(),
                records,
            }
        } else {
            Outcome::Finished(records)
        };
        self.queue.push_back(BackendEvent::Done {
            idx,
            t: self.now,
            outcome,
        });
    }

    fn on_timer(&mut self, idx: usize, timer: Timer) {
        if !self.live[idx] {
            return;
        }
        match timer {
            Timer::NodeDone => {
                self.live[idx] = false;
                self.queue.push_back(BackendEvent::Done {
                    idx,
                    t: self.now,
                    outcome: Outcome::Finished(Vec::new()),
                });
            }
            Timer::RequestStart(req) => self.start_request(idx, req),
            Timer::RequestSubmit(req) => self.submit_request(idx, req),
            Timer::CpuDone(req) => {
                let now = self.now;
                let run = self.execs.get_mut(&idx).expect("exec run");
                let fl = run.inflight.remove(&req).expect("in flight");
                let rec = build_record(run, req, &fl, now);
                run.records.push(rec);
                self.after_request(idx, req);
            }
        }
    }
}

fn build_record(run: &ExecRun, req: u32, fl: &InFlight, now: u64) -> RequestRecord {
    let t_submit = nanos_to_secs(fl.t_submit);
    let mut rec = RequestRecord::new(&run.task.name, &run.node_id, req, t_submit);
    let t_complete = nanos_to_secs(fl.ends.last().map(|e| e.1).unwrap_or(now));
    rec.t_complete = t_complete;
    match run.task.app_kind {
        AppKind::Chatbot => {
            let token_times: Vec<f64> = fl
                .ends
                .iter()
                .filter(|(m, _)| *m == TokenMark::Token)
                .map(|(_, t)| nanos_to_secs(*t))
                .collect();
            rec.t_first_output = token_times.first().copied();
            rec.marks = Marks::Tokens { token_times };
        }
        AppKind::DeepResearch => {}
        AppKind::Imagegen => {
            let mut prev = fl.t_submit;
            let mut step_times = Vec::new();
            for (m, t) in &fl.ends {
                if *m == TokenMark::Step {
                    step_times.push(nanos_to_secs(t - prev));
                    prev = *t;
                }
            }
            rec.t_first_output = step_times.first().map(|d| t_submit + d);
            rec.marks = Marks::Steps {
                step_times,
                fallback: false,
            };
        }
        AppKind::LiveCaptions => {
            let per_pass = (run.plans.len() / run.task.num_requests.max(1) as usize).max(1) as u32;
            rec.t_first_output = Some(t_complete);
            rec.marks = Marks::Segment {
                segment_index: req % per_pass,
                segment_latency: t_complete - t_submit,
            };
        }
        AppKind::Synthetic => rec.t_first_output = Some(t_complete),
    }
    rec
}

impl Backend for SimBackend {
    fn now(&self) -> u64 {
        self.now
    }

    fn start(&mut self, idx: usize) -> Result<(), String> {
        let now = self.now;
        self.live[idx] = true;
        self.queue.push_back(BackendEvent::Started { idx, t: now });
        match self.kinds[idx] {
            NodeKind::Setup => self.schedule(now + self.setup_ns, idx, Timer::NodeDone),
            NodeKind::Cleanup => self.schedule(now + self.cleanup_ns, idx, Timer::NodeDone),
            NodeKind::Exec => {
                let run = self.execs.get_mut(&idx).expect("exec run");
                let total = run.plans.len() as u32;
                if total == 0 {
                    self.complete_exec(idx);
                } else if run.paced {
                    let period = secs_to_nanos(run.task.segment_seconds.unwrap_or(DEFAULT_SEGMENT_SECONDS));
                    for r in 0..total {
                        self.schedule(now + u64::from(r) * period, idx, Timer::RequestStart(r));
                    }
                } else {
                    self.schedule(now, idx, Timer::RequestStart(0));
                }
            }
        }
        Ok(())
    }

    fn cancel(&mut self, idx: usize) -> Vec<RequestRecord> {
        self.live[idx] = false;
        let stale: Vec<_> = self.timers.iter().filter(|t| t.2 == idx).cloned().collect();
        for t in stale {
            self.timers.remove(&t);
        }
        let Some(run) = self.execs.get_mut(&idx) else {
            return Vec::new();
        };
        for req in run.inflight.keys() {
            self.dev.cancel_tagged(tag(idx, *req));
        }
        run.inflight.clear();
        let mut records = std::mem::take(&mut run.records);
        records.sort_by_key(|r| r.request_id);
        records
    }

    fn next(&mut self, deadline: Option<u64>) -> Option<BackendEvent> {
        let mut stuck_at = None;
        loop {
            if let Some(e) = self.queue.pop_front() {
                return Some(e);
            }
            let t_timer = self.timers.iter().next().map(|t| t.0);
            let t_dev = self.dev.next_event().filter(|&t| stuck_at != Some(t));
            let next = match (t_timer, t_dev) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            };
            let Some(t) = next else {
                return match deadline {
                    Some(d) if d >= self.now => {
                        self.dev.advance_to(d);
                        self.now = d;
                        Some(BackendEvent::Tick)
                    }
                    _ => None,
                };
            };
            if let Some(d) = deadline.filter(|&d| d < t) {
                let d = d.max(self.now);
                for k in self.dev.advance_to(d) {
                    self.on_kernel(&k);
                }
                self.now = d;
                if self.queue.is_empty() {
                    return Some(BackendEvent::Tick);
                }
                continue;
            }
            let t = t.max(self.now);
            let done = self.dev.advance_to(t);
            let progressed = !done.is_empty();
            self.now = t;
            for k in &done {
                self.on_kernel(k);
            }
            let mut fired = false;
            while let Some(&(tt, seq, idx, timer)) = self.timers.iter().next() {
                if tt > self.now {
                    break;
                }
                self.timers.remove(&(tt, seq, idx, timer));
                fired = true;
                self.on_timer(idx, timer);
            }
            stuck_at = if progressed || fired { None } else { Some(t) };
        }
    }
}
