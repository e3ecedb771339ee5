//! Deterministic discrete-event model of one GPU shared by several apps.
//!
//! Each app is a serial kernel stream (like a single CUDA stream): a kernel
//! reaches the device only after the app's previous kernel has finished and
//! its own submit time has passed. Under [`Policy::Greedy`] the device runs a
//! strict head-of-line FCFS queue over all apps; a kernel launches only when
//! enough SMs are free and nothing that arrived earlier is still waiting.
//! Under [`Policy::StaticPartition`] each app owns a fixed SM quota that is
//! never lent out; a kernel asking for more than its quota runs stretched by
//! `demand / quota`.
//!
//! Time is kept in integer nanoseconds; kernels are non-preemptive.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{nanos_to_secs, secs_to_nanos};
use crate::config::Policy;
use crate::monitor::{MetricKind, MetricSample};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("kernel of `{app}` asks for {demand} SMs but the device has {sm_count}")]
    InfeasibleKernel { app: String, demand: u32, sm_count: u32 },
    #[error("kernel of `{0}` has zero duration or zero SM demand")]
    DegenerateKernel(String),
    #[error("app `{0}` has no partition quota")]
    NoQuota(String),
    #[error("static partitioning needs per-app quotas on the device")]
    MissingPartitions,
    #[error("partition quotas total {total} SMs, device has {sm_count}")]
    OverSubscribed { total: u32, sm_count: u32 },
    #[error("kernels of `{0}` are not sorted by submit time")]
    Unsorted(String),
    #[error("exclusive baseline needs kernels of exactly one app, got {0}")]
    NotSingleApp(usize),
    #[error("kernel trace line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimDevice {
    pub sm_count: u32,
    /// SM quota per app when partitioned.
    pub partitions: Option<BTreeMap<String, u32>>,
}

impl SimDevice {
    pub fn new(sm_count: u32) -> Self {
        Self {
            sm_count,
            partitions: None,
        }
    }

    pub fn partitioned(sm_count: u32, quotas: BTreeMap<String, u32>) -> Result<Self, SimError> {
        let total: u32 = quotas.values().sum();
        if total > sm_count {
            return Err(SimError::OverSubscribed { total, sm_count });
        }
        Ok(Self {
            sm_count,
            partitions: Some(quotas),
        })
    }

    /// Quota of `⌊share/100 · sm_count⌋` SMs for each app.
    pub fn with_shares<'a, I>(sm_count: u32, shares: I) -> Result<Self, SimError>
    where
        I: IntoIterator<Item = (&'a str, u32)>,
    {
        let quotas = shares
            .into_iter()
            .map(|(app, pct)| (app.to_string(), share_to_sms(pct, sm_count)))
            .collect();
        Self::partitioned(sm_count, quotas)
    }

    pub fn quota(&self, app: &str) -> Option<u32> {
        self.partitions.as_ref().and_then(|p| p.get(app).copied())
    }
}

/// SMs granted by a percentage share: `⌊share/100 · sm_count⌋`.
pub fn share_to_sms(share_percent: u32, sm_count: u32) -> u32 {
    (u64::from(share_percent.min(100)) * u64::from(sm_count) / 100) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimKernel {
    pub app: String,
    pub submit_ns: u64,
    pub duration_ns: u64,
    pub sm_demand: u32,
    /// Fraction of the used SMs actually computing; feeds SMOCC only.
    pub occupancy: f64,
}

impl SimKernel {
    pub fn new(app: impl Into<String>, submit_secs: f64, duration_secs: f64, sm_demand: u32) -> Self {
        Self {
            app: app.into(),
            submit_ns: secs_to_nanos(submit_secs),
            duration_ns: secs_to_nanos(duration_secs),
            sm_demand,
            occupancy: 1.0,
        }
    }

    pub fn with_occupancy(mut self, occupancy: f64) -> Self {
        self.occupancy = occupancy;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRecord {
    pub app: String,
    /// Position of the kernel within its app's stream.
    pub index: u32,
    /// Caller-supplied owner tag (the engine stores the DAG node position here).
    pub tag: u64,
    pub submit_ns: u64,
    pub start_ns: u64,
    pub end_ns: u64,
    pub sm_demand: u32,
    pub sms_used: u32,
    pub reserved_sms: u32,
    pub occupancy: f64,
}

impl KernelRecord {
    pub fn latency_secs(&self) -> f64 {
        nanos_to_secs(self.end_ns - self.submit_ns)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: Policy,
    pub sm_count: u32,
    /// Every kernel, ordered by (app, index).
    pub kernels: Vec<KernelRecord>,
    pub app_completion: BTreeMap<String, u64>,
}

impl SimResult {
    fn from_records(policy: Policy, sm_count: u32, mut kernels: Vec<KernelRecord>) -> Self {
        kernels.sort_by(|a, b| (&a.app, a.index).cmp(&(&b.app, b.index)));
        let mut app_completion = BTreeMap::new();
        for k in &kernels {
            let e = app_completion.entry(k.app.clone()).or_insert(0);
            *e = (*e).max(k.end_ns);
        }
        Self {
            policy,
            sm_count,
            kernels,
            app_completion,
        }
    }

    pub fn makespan_ns(&self) -> u64 {
        self.kernels.iter().map(|k| k.end_ns).max().unwrap_or(0)
    }

    pub fn kernels_of<'a>(&'a self, app: &'a str) -> impl Iterator<Item = &'a KernelRecord> + 'a {
        self.kernels.iter().filter(move |k| k.app == app)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StreamState {
    Idle,
    Waiting,
    Running,
}

#[derive(Debug, Clone)]
struct PendingKernel {
    index: u32,
    tag: u64,
    submit_ns: u64,
    duration_ns: u64,
    demand: u32,
    occupancy: f64,
}

#[derive(Debug)]
struct AppStream {
    pending: VecDeque<PendingKernel>,
    state: StreamState,
    next_index: u32,
    last_submit: u64,
}

impl AppStream {
    fn new() -> Self {
        Self {
            pending: VecDeque::new(),
            state: StreamState::Idle,
            next_index: 0,
            last_submit: 0,
        }
    }
}

/// Incremental form of the simulator: kernels may be submitted while time advances.
#[derive(Debug)]
pub struct DeviceSim {
    sm_count: u32,
    policy: Policy,
    quotas: BTreeMap<String, u32>,
    now: u64,
    free: u32,
    apps: BTreeMap<String, AppStream>,
    // (arrival, submit, app, index)
    waiting: BTreeSet<(u64, u64, String, u32)>,
    waiting_info: HashMap<(String, u32), PendingKernel>,
    // (end, app, index)
    running: BTreeSet<(u64, String, u32)>,
    in_flight: HashMap<(String, u32), KernelRecord>,
    done: Vec<KernelRecord>,
    fresh: Vec<KernelRecord>,
}

impl DeviceSim {
    pub fn new(device: &SimDevice, policy: Policy) -> Result<Self, SimError> {
        let quotas = match policy {
            Policy::Greedy => BTreeMap::new(),
            Policy::StaticPartition => {
                let q = device.partitions.clone().ok_or(SimError::MissingPartitions)?;
                let total: u32 = q.values().sum();
                if total > device.sm_count {
                    return Err(SimError::OverSubscribed {
                        total,
                        sm_count: device.sm_count,
                    });
                }
                q
            }
        };
        Ok(Self {
            sm_count: device.sm_count,
            policy,
            quotas,
            now: 0,
            free: device.sm_count,
            apps: BTreeMap::new(),
            waiting: BTreeSet::new(),
            waiting_info: HashMap::new(),
            running: BTreeSet::new(),
            in_flight: HashMap::new(),
            done: Vec::new(),
            fresh: Vec::new(),
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    /// Queue a kernel on its app's stream; returns its index within the stream.
    pub fn submit(&mut self, kernel: &SimKernel, tag: u64) -> Result<u32, SimError> {
        if kernel.duration_ns == 0 || kernel.sm_demand == 0 {
            return Err(SimError::DegenerateKernel(kernel.app.clone()));
        }
        match self.policy {
            Policy::Greedy if kernel.sm_demand > self.sm_count => {
                return Err(SimError::InfeasibleKernel {
                    app: kernel.app.clone(),
                    demand: kernel.sm_demand,
                    sm_count: self.sm_count,
                });
            }
            Policy::StaticPartition => match self.quotas.get(&kernel.app) {
                Some(&q) if q > 0 => {}
                _ => return Err(SimError::NoQuota(kernel.app.clone())),
            },
            _ => {}
        }
        let stream = self.apps.entry(kernel.app.clone()).or_insert_with(AppStream::new);
        if kernel.submit_ns < stream.last_submit {
            return Err(SimError::Unsorted(kernel.app.clone()));
        }
        stream.last_submit = kernel.submit_ns;
        let index = stream.next_index;
        stream.next_index += 1;
        stream.pending.push_back(PendingKernel {
            index,
            tag,
            submit_ns: kernel.submit_ns,
            duration_ns: kernel.duration_ns,
            demand: kernel.sm_demand,
            occupancy: kernel.occupancy.clamp(0.0, 1.0),
        });
        Ok(index)
    }

    /// Drop every not-yet-running kernel carrying `tag`. Running kernels finish.
    pub fn cancel_tagged(&mut self, tag: u64) {
        for (app, stream) in self.apps.iter_mut() {
            stream.pending.retain(|k| k.tag != tag);
            if stream.state == StreamState::Waiting {
                let hit = self
                    .waiting
                    .iter()
                    .find(|(_, _, a, i)| a == app && self.waiting_info[&(a.clone(), *i)].tag == tag)
                    .cloned();
                if let Some(key) = hit {
                    self.waiting.remove(&key);
                    self.waiting_info.remove(&(key.2.clone(), key.3));
                    stream.state = StreamState::Idle;
                }
            }
        }
    }

    /// Time of the next internal event strictly after `now`.
    pub fn next_event(&self) -> Option<u64> {
        let next_end = self.running.iter().next().map(|(t, _, _)| *t);
        let next_arrival = self
            .apps
            .values()
            .filter(|s| s.state == StreamState::Idle)
            .filter_map(|s| s.pending.front().map(|k| k.submit_ns))
            .min();
        match (next_end, next_arrival) {
            (Some(a), Some(b)) => Some(a.min(b).max(self.now)),
            (a, b) => a.or(b).map(|t| t.max(self.now)),
        }
    }

    /// Advance to `t`, processing every event on the way; returns kernels that
    /// completed during the call in completion order.
    pub fn advance_to(&mut self, t: u64) -> Vec<KernelRecord> {
        self.settle();
        while let Some(e) = self.next_event() {
            if e > t || (e == self.now && !self.has_work_at_now()) {
                break;
            }
            self.now = e;
            self.settle();
        }
        if t > self.now {
            self.now = t;
            self.settle();
        }
        std::mem::take(&mut self.fresh)
    }

    fn has_work_at_now(&self) -> bool {
        self.running.iter().next().is_some_and(|(e, _, _)| *e <= self.now)
            || self.apps.values().any(|s| {
                s.state == StreamState::Idle && s.pending.front().is_some_and(|k| k.submit_ns <= self.now)
            })
    }

    /// Run until nothing is left; returns kernels completed during the call.
    pub fn run_to_completion(&mut self) -> Vec<KernelRecord> {
        let mut out = Vec::new();
        loop {
            out.extend(self.advance_to(self.now));
            match self.next_event() {
                Some(t) => out.extend(self.advance_to(t)),
                None => break,
            }
        }
        out
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_empty() && self.waiting.is_empty() && self.apps.values().all(|s| s.pending.is_empty())
    }

    /// Every kernel completed so far, in completion order.
    pub fn completed(&self) -> &[KernelRecord] {
        &self.done
    }

    pub fn into_result(self) -> SimResult {
        SimResult::from_records(self.policy, self.sm_count, self.done)
    }

    fn settle(&mut self) {
        // completions
        while let Some((end, app, index)) = self.running.iter().next().cloned() {
            if end > self.now {
                break;
            }
            self.running.remove(&(end, app.clone(), index));
            if let Some(rec) = self.in_flight.remove(&(app.clone(), index)) {
                if self.policy == Policy::Greedy {
                    self.free += rec.sms_used;
                }
                self.done.push(rec.clone());
                self.fresh.push(rec);
            }
            if let Some(s) = self.apps.get_mut(&app) {
                s.state = StreamState::Idle;
            }
        }
        // arrivals at the device
        for (app, stream) in self.apps.iter_mut() {
            if stream.state != StreamState::Idle {
                continue;
            }
            if let Some(k) = stream.pending.pop_front_if(|k| k.submit_ns <= self.now) {
                self.waiting.insert((self.now, k.submit_ns, app.clone(), k.index));
                self.waiting_info.insert((app.clone(), k.index), k);
                stream.state = StreamState::Waiting;
            }
        }
        // launches
        while let Some(key) = self.waiting.iter().next().cloned() {
            let info = &self.waiting_info[&(key.2.clone(), key.3)];
            let (sms_used, reserved, duration) = match self.policy {
                Policy::Greedy => {
                    if info.demand > self.free {
                        break; // head-of-line blocks everything behind it
                    }
                    (info.demand, info.demand, info.duration_ns)
                }
                Policy::StaticPartition => {
                    let quota = self.quotas[&key.2];
                    let used = info.demand.min(quota);
                    (used, quota, stretch(info.duration_ns, info.demand, quota))
                }
            };
            self.waiting.remove(&key);
            let info = self.waiting_info.remove(&(key.2.clone(), key.3)).expect("waiting kernel");
            if self.policy == Policy::Greedy {
                self.free -= sms_used;
            }
            let end = self.now + duration;
            let rec = KernelRecord {
                app: key.2.clone(),
                index: info.index,
                tag: info.tag,
                submit_ns: info.submit_ns,
                start_ns: self.now,
                end_ns: end,
                sm_demand: info.demand,
                sms_used,
                reserved_sms: reserved,
                occupancy: info.occupancy,
            };
            self.running.insert((end, key.2.clone(), info.index));
            self.in_flight.insert((key.2.clone(), info.index), rec);
            if let Some(s) = self.apps.get_mut(&key.2) {
                s.state = StreamState::Running;
            }
        }
    }
}

/// Duration of a kernel squeezed into `available` SMs: `d · max(1, demand/available)`, rounded to the nearest ns.
pub fn stretch(duration_ns: u64, demand: u32, available: u32) -> u64 {
    if demand <= available || available == 0 {
        return duration_ns;
    }
    let num = u128::from(duration_ns) * u128::from(demand) + u128::from(available) / 2;
    (num / u128::from(available)) as u64
}

/// Simulate a complete kernel set under `policy`.
pub fn simulate(device: &SimDevice, kernels: &[SimKernel], policy: Policy) -> Result<SimResult, SimError> {
    let mut sim = DeviceSim::new(device, policy)?;
    for (i, k) in kernels.iter().enumerate() {
        sim.submit(k, i as u64)?;
    }
    sim.run_to_completion();
    Ok(sim.into_result())
}

/// The app's kernels alone on an unpartitioned device under greedy scheduling.
pub fn exclusive_baseline(device: &SimDevice, kernels: &[SimKernel]) -> Result<SimResult, SimError> {
    let apps: BTreeSet<&str> = kernels.iter().map(|k| k.app.as_str()).collect();
    if apps.len() > 1 {
        return Err(SimError::NotSingleApp(apps.len()));
    }
    simulate(&SimDevice::new(device.sm_count), kernels, Policy::Greedy)
}

/// SMACT/SMOCC series averaged over consecutive windows of `interval_secs`.
///
/// SMACT counts reserved SMs (the full quota of a partitioned app while one of
/// its kernels runs, the kernel's demand otherwise); SMOCC counts used SMs
/// scaled by kernel occupancy. Windows cover `[0, makespan]`.
pub fn synth_utilization(result: &SimResult, device: &SimDevice, interval_secs: f64) -> Vec<MetricSample> {
    let interval = secs_to_nanos(interval_secs).max(1);
    let sm_count = device.sm_count.max(1);
    let windows = (result.makespan_ns() / interval + 1) as usize;
    let mut reserved = vec![0u128; windows];
    let mut active = vec![0f64; windows];
    for k in &result.kernels {
        if k.end_ns <= k.start_ns {
            continue;
        }
        let first = (k.start_ns / interval) as usize;
        let last = ((k.end_ns - 1) / interval) as usize;
        for w in first..=last.min(windows - 1) {
            let lo = k.start_ns.max(w as u64 * interval);
            let hi = k.end_ns.min((w as u64 + 1) * interval);
            if hi <= lo {
                continue;
            }
            let span = hi - lo;
            reserved[w] += u128::from(k.reserved_sms) * u128::from(span);
            active[w] += f64::from(k.sms_used) * k.occupancy * span as f64;
        }
    }
    let denom = f64::from(sm_count) * interval as f64;
    let mut out = Vec::with_capacity(windows * 2);
    for w in 0..windows {
        let t = nanos_to_secs(w as u64 * interval);
        let smact = ((100 * reserved[w]) as f64 / denom).clamp(0.0, 100.0);
        let smocc = (100.0 * active[w] / denom).clamp(0.0, smact);
        out.push(MetricSample::new(t, MetricKind::Smact, smact, "simgpu"));
        out.push(MetricSample::new(t, MetricKind::Smocc, smocc, "simgpu"));
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelLine {
    app: String,
    submit: f64,
    duration: f64,
    sm_demand: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    occupancy: Option<f64>,
}

/// Read a JSONL kernel trace of `{app, submit, duration, sm_demand[, occupancy]}` lines.
pub fn read_kernel_trace(text: &str) -> Result<Vec<SimKernel>, SimError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let k: KernelLine = serde_json::from_str(line).map_err(|e| SimError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !crate::config::positive(k.duration) || k.submit < 0.0 {
            return Err(SimError::Parse {
                line: i + 1,
                message: "duration must be positive and submit non-negative".into(),
            });
        }
        let mut kernel = SimKernel::new(k.app, k.submit, k.duration, k.sm_demand);
        if let Some(o) = k.occupancy {
            kernel.occupancy = o;
        }
        out.push(kernel);
    }
    Ok(out)
}

pub fn write_kernel_trace(kernels: &[SimKernel]) -> String {
    let mut out = String::new();
    for k in kernels {
        let line = KernelLine {
            app: k.app.clone(),
            submit: nanos_to_secs(k.submit_ns),
            duration: nanos_to_secs(k.duration_ns),
            sm_demand: k.sm_demand,
            occupancy: (k.occupancy != 1.0).then_some(k.occupancy),
        };
        out.push_str(&serde_json::to_string(&line).unwrap_or_default());
        out.push('\n');
    }
    out
}
