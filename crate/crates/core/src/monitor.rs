//! System metric sampling.
//!
//! Every collector gets its own polling thread ticking at `k · interval`
//! from monitor start. A poll that overruns its interval is discarded and
//! recorded as a gap, as is every tick skipped while it ran. Gaps are never
//! filled in.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::RunClock;
use crate::stats::Summary;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Smact,
    Smocc,
    GpuMemBw,
    GpuMemUsed,
    CpuUtil,
    CpuMemBw,
    CpuMemUsed,
    PowerGpu,
    PowerCpu,
}

impl MetricKind {
    pub const ALL: [MetricKind; 9] = [
        MetricKind::Smact,
        MetricKind::Smocc,
        MetricKind::GpuMemBw,
        MetricKind::GpuMemUsed,
        MetricKind::CpuUtil,
        MetricKind::CpuMemBw,
        MetricKind::CpuMemUsed,
        MetricKind::PowerGpu,
        MetricKind::PowerCpu,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Smact => "smact",
            MetricKind::Smocc => "smocc",
            MetricKind::GpuMemBw => "gpu_mem_bw",
            MetricKind::GpuMemUsed => "gpu_mem_used",
            MetricKind::CpuUtil => "cpu_util",
            MetricKind::CpuMemBw => "cpu_mem_bw",
            MetricKind::CpuMemUsed => "cpu_mem_used",
            MetricKind::PowerGpu => "power_gpu",
            MetricKind::PowerCpu => "power_cpu",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            MetricKind::Smact | MetricKind::Smocc | MetricKind::CpuUtil => "percent",
            MetricKind::GpuMemBw | MetricKind::CpuMemBw => "GB/s",
            MetricKind::GpuMemUsed | MetricKind::CpuMemUsed => "GB",
            MetricKind::PowerGpu | MetricKind::PowerCpu => "W",
        }
    }

    pub fn is_percent(self) -> bool {
        self.unit() == "percent"
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = MonitorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| MonitorError::Parse(format!("unknown metric kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub t: f64,
    pub kind: MetricKind,
    pub value: f64,
    pub source: String,
}

impl MetricSample {
    pub fn new(t: f64, kind: MetricKind, value: f64, source: impl Into<String>) -> Self {
        Self {
            t,
            kind,
            value,
            source: source.into(),
        }
    }
}

/// A tick at which a collector produced nothing usable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricGap {
    pub t: f64,
    pub source: String,
    pub kinds: Vec<MetricKind>,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("collector `{id}` unavailable: {reason}")]
    CollectorInit { id: String, reason: String },
    #[error("sample interval must be positive")]
    InvalidInterval,
    #[error("collector `{id}` failed: {reason}")]
    Poll { id: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub trait Collector: Send {
    fn id(&self) -> &str;
    fn kinds(&self) -> Vec<MetricKind>;

    /// Probe the host; an error disables the collector for the run.
    fn init(&mut self) -> Result<(), MonitorError> {
        Ok(())
    }

    /// Read current values. The monitor stamps samples with the tick time.
    fn poll(&mut self, now: f64) -> Result<Vec<MetricSample>, MonitorError>;

    fn stop(&mut self) {}
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorOutput {
    pub samples: Vec<MetricSample>,
    pub gaps: Vec<MetricGap>,
    pub notes: Vec<String>,
    /// CPU time spent in polling threads.
    pub cpu_time_secs: f64,
}

enum SinkMsg {
    Samples(Vec<MetricSample>),
    Gap(MetricGap),
    CpuTime(f64),
}

pub struct MonitorHandle {
    stop: Arc<AtomicBool>,
    stoppers: Vec<Sender<()>>,
    threads: Vec<JoinHandle<()>>,
    rx: Receiver<SinkMsg>,
    acc: MonitorOutput,
}

/// Start polling every collector that initializes successfully.
pub fn start_monitor(
    collectors: Vec<Box<dyn Collector>>,
    interval: Duration,
    clock: RunClock,
) -> Result<MonitorHandle, MonitorError> {
    if interval.is_zero() {
        return Err(MonitorError::InvalidInterval);
    }
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let mut notes = Vec::new();
    let mut stoppers = Vec::new();
    let mut threads = Vec::new();
    for mut c in collectors {
        if let Err(e) = c.init() {
            log::info!("{e}");
            notes.push(format!("collector `{}` disabled: {e}", c.id()));
            continue;
        }
        let (stop_tx, stop_rx) = mpsc::channel();
        stoppers.push(stop_tx);
        let tx = tx.clone();
        let stop = Arc::clone(&stop);
        let name = format!("monitor-{}", c.id());
        let handle = std::thread::Builder::new()
            .name(name)
            .spawn(move || poll_loop(c, interval, clock, stop, stop_rx, tx))
            .map_err(|e| MonitorError::Io {
                path: PathBuf::from("<thread>"),
                source: e,
            })?;
        threads.push(handle);
    }
    Ok(MonitorHandle {
        stop,
        stoppers,
        threads,
        rx,
        acc: MonitorOutput {
            notes,
            ..Default::default()
        },
    })
}

fn poll_loop(
    mut c: Box<dyn Collector>,
    interval: Duration,
    clock: RunClock,
    stop: Arc<AtomicBool>,
    stop_rx: Receiver<()>,
    tx: Sender<SinkMsg>,
) {
    let id = c.id().to_string();
    let kinds = c.kinds();
    let step = interval.as_secs_f64();
    let start = clock.now_secs();
    let mut k: u64 = (start / step).ceil() as u64;
    let gap = |t: f64, reason: &str| {
        SinkMsg::Gap(MetricGap {
            t,
            source: id.clone(),
            kinds: kinds.clone(),
            reason: reason.to_string(),
        })
    };
    loop {
        let tick = k as f64 * step;
        let wait = tick - clock.now_secs();
        if wait > 0.0 {
            match stop_rx.recv_timeout(Duration::from_secs_f64(wait)) {
                Err(RecvTimeoutError::Timeout) => {}
                _ => break,
            }
        }
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let began = Instant::now();
        let result = c.poll(tick);
        let took = began.elapsed();
        match result {
            Ok(_) if took > interval => {
                let _ = tx.send(gap(tick, "poll overran the sample interval"));
            }
            Ok(mut samples) => {
                for s in &mut samples {
                    s.t = tick;
                    if s.source.is_empty() {
                        s.source = id.clone();
                    }
                }
                if !samples.is_empty() {
                    let _ = tx.send(SinkMsg::Samples(samples));
                }
            }
            Err(e) => {
                let _ = tx.send(gap(tick, &e.to_string()));
            }
        }
        let now = clock.now_secs();
        let next = ((now / step).floor() as u64 + 1).max(k + 1);
        for skipped in (k + 1)..next {
            if (skipped as f64) * step <= now {
                let _ = tx.send(gap(skipped as f64 * step, "tick skipped while a poll was running"));
            }
        }
        k = next;
    }
    c.stop();
    let _ = tx.send(SinkMsg::CpuTime(thread_cpu_time()));
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_time() -> f64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid out-pointer for the duration of the call.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0.0;
    }
    ts.tv_sec as f64 + ts.tv_nsec as f64 / 1e9
}

impl MonitorHandle {
    fn drain(&mut self) {
        while let Ok(msg) = self.rx.try_recv() {
            match msg {
                SinkMsg::Samples(s) => self.acc.samples.extend(s),
                SinkMsg::Gap(g) => self.acc.gaps.push(g),
                SinkMsg::CpuTime(c) => self.acc.cpu_time_secs += c,
            }
        }
    }

    /// Samples received so far, in arrival order.
    pub fn snapshot(&mut self) -> &[MetricSample] {
        self.drain();
        &self.acc.samples
    }

    pub fn stop(mut self) -> MonitorOutput {
        self.stop.store(true, Ordering::Relaxed);
        for s in self.stoppers.drain(..) {
            let _ = s.send(());
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.drain();
        let mut out = std::mem::take(&mut self.acc);
        let warnings = quality_warnings(&out.samples);
        out.notes.extend(warnings);
        out
    }
}

/// Data-quality notes for SMOCC readings above SMACT at the same tick and source.
pub fn quality_warnings(samples: &[MetricSample]) -> Vec<String> {
    let mut smact: BTreeMap<(&str, u64), f64> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.kind == MetricKind::Smact) {
        smact.insert((&s.source, s.t.to_bits()), s.value);
    }
    let bad = samples
        .iter()
        .filter(|s| s.kind == MetricKind::Smocc)
        .filter(|s| smact.get(&(s.source.as_str(), s.t.to_bits())).is_some_and(|a| s.value > *a))
        .count();
    if bad == 0 {
        Vec::new()
    } else {
        vec![format!("data-quality warning: {bad} smocc samples exceed smact at the same tick")]
    }
}

/// Statistics over samples of `kind` with `t` inside `window` (inclusive); all samples when `None`.
pub fn summarize(samples: &[MetricSample], kind: MetricKind, window: Option<(f64, f64)>) -> Summary {
    let values: Vec<f64> = samples
        .iter()
        .filter(|s| s.kind == kind)
        .filter(|s| window.is_none_or(|(lo, hi)| s.t >= lo && s.t <= hi))
        .map(|s| s.value)
        .collect();
    Summary::of(&values)
}

// ---------------------------------------------------------------- parsers

/// CPU utilization in percent between two `/proc/stat` aggregate lines.
///
/// Idle time is `idle + iowait`; the total sums the first eight jiffy fields
/// (guest time is already folded into user time by the kernel).
pub fn parse_proc_stat(before: &str, after: &str) -> Result<f64, MonitorError> {
    let a = cpu_jiffies(before)?;
    let b = cpu_jiffies(after)?;
    let d_total = b.0.checked_sub(a.0).ok_or_else(|| MonitorError::Parse("jiffy counters went backwards".into()))?;
    let d_idle = b.1.checked_sub(a.1).ok_or_else(|| MonitorError::Parse("idle counter went backwards".into()))?;
    if d_total == 0 {
        return Err(MonitorError::Parse("no jiffies elapsed between snapshots".into()));
    }
    if d_idle > d_total {
        return Err(MonitorError::Parse("idle delta exceeds total delta".into()));
    }
    Ok(100.0 * (1.0 - d_idle as f64 / d_total as f64))
}

fn cpu_jiffies(text: &str) -> Result<(u64, u64), MonitorError> {
    let line = text
        .lines()
        .find(|l| l.split_whitespace().next() == Some("cpu"))
        .ok_or_else(|| MonitorError::Parse("no aggregate `cpu` line".into()))?;
    let fields: Vec<u64> = line
        .split_whitespace()
        .skip(1)
        .take(8)
        .map(|f| f.parse::<u64>().map_err(|_| MonitorError::Parse(format!("bad jiffy field `{f}`"))))
        .collect::<Result<_, _>>()?;
    if fields.len() < 4 {
        return Err(MonitorError::Parse("aggregate cpu line has fewer than 4 fields".into()));
    }
    let total = fields.iter().sum();
    let idle = fields[3] + fields.get(4).copied().unwrap_or(0);
    Ok((total, idle))
}

/// Used memory in GB from `/proc/meminfo` (`MemTotal − MemAvailable`).
pub fn parse_meminfo(text: &str) -> Result<f64, MonitorError> {
    let field = |name: &str| -> Result<u64, MonitorError> {
        text.lines()
            .find_map(|l| l.strip_prefix(name))
            .and_then(|rest| rest.trim_start_matches(':').split_whitespace().next())
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| MonitorError::Parse(format!("meminfo lacks {name}")))
    };
    let total = field("MemTotal")?;
    let avail = field("MemAvailable")?;
    Ok(total.saturating_sub(avail) as f64 * 1024.0 / 1e9)
}

/// Move the decimal point of a plain decimal literal `places` to the right.
fn shift_decimal(text: &str, places: usize) -> Option<f64> {
    let (neg, body) = match text.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, text),
    };
    if body.is_empty() || !body.chars().all(|c| c.is_ascii_digit() || c == '.') || body.matches('.').count() > 1 {
        return None;
    }
    let (int, frac) = body.split_once('.').unwrap_or((body, ""));
    let mut frac = frac.to_string();
    while frac.len() < places {
        frac.push('0');
    }
    let shifted = format!("{}{}{}.{}", if neg { "-" } else { "" }, int, &frac[..places], &frac[places..]);
    shifted.trim_end_matches('.').parse().ok()
}

/// Stateful parser for `dcgmi dmon` output. Header lines (`#Entity ...`)
/// define the column order; data lines start with the entity (`GPU 0`).
#[derive(Debug, Clone)]
pub struct DcgmParser {
    columns: Vec<String>,
    /// Peak DRAM bandwidth in GB/s; DRAMA is only converted when known.
    pub peak_dram_gbps: Option<f64>,
    pub source: String,
    pub skipped: usize,
}

impl Default for DcgmParser {
    fn default() -> Self {
        Self {
            columns: vec!["SMACT".into(), "SMOCC".into(), "DRAMA".into()],
            peak_dram_gbps: None,
            source: "dcgm".into(),
            skipped: 0,
        }
    }
}

impl DcgmParser {
    pub fn parse_line(&mut self, line: &str, t: f64) -> Result<Vec<MetricSample>, MonitorError> {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(rest) = trimmed.strip_prefix('#') {
            let mut tokens = rest.split_whitespace();
            if tokens.next().is_some_and(|t| t.eq_ignore_ascii_case("entity")) {
                self.columns = tokens.map(str::to_string).collect();
            }
            return Ok(Vec::new());
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens[0] == "ID" || tokens[0].starts_with("Entity") {
            return Ok(Vec::new());
        }
        let values = match tokens[0] {
            "GPU" | "GPU-I" | "GPU-CI" if tokens.len() >= 2 => &tokens[2..],
            _ => {
                self.skipped += 1;
                return Err(MonitorError::Parse(format!("unrecognized dcgm line `{trimmed}`")));
            }
        };
        let mut out = Vec::new();
        for (col, raw) in self.columns.iter().zip(values) {
            if raw.eq_ignore_ascii_case("N/A") {
                continue;
            }
            let bad = || MonitorError::Parse(format!("bad numeric `{raw}` in column {col}"));
            let plain = || raw.parse::<f64>().ok().filter(|v| v.is_finite());
            let (kind, value) = match col.as_str() {
                "SMACT" => (MetricKind::Smact, shift_decimal(raw, 2).or_else(|| plain().map(|v| v * 100.0))),
                "SMOCC" => (MetricKind::Smocc, shift_decimal(raw, 2).or_else(|| plain().map(|v| v * 100.0))),
                "DRAMA" => match self.peak_dram_gbps {
                    Some(peak) => (MetricKind::GpuMemBw, plain().map(|v| v * peak)),
                    None => {
                        plain().ok_or_else(bad)?;
                        continue;
                    }
                },
                "FBUSD" => (MetricKind::GpuMemUsed, plain().map(|mib| mib * 1_048_576.0 / 1e9)),
                "POWER" => (MetricKind::PowerGpu, plain()),
                _ => continue,
            };
            let value = match value {
                Some(v) => v,
                None => {
                    self.skipped += 1;
                    return Err(bad());
                }
            };
            out.push(MetricSample::new(t, kind, value, self.source.clone()));
        }
        Ok(out)
    }
}

/// Parse one `dcgmi dmon` line with the default SMACT/SMOCC/DRAMA columns.
pub fn parse_dcgm_line(text: &str) -> Result<Vec<MetricSample>, MonitorError> {
    DcgmParser::default().parse_line(text, 0.0)
}

/// Parse `nvidia-smi --query-gpu=power.draw,memory.used --format=csv,noheader,nounits`.
pub fn parse_nvidia_smi_line(line: &str, t: f64) -> Result<Vec<MetricSample>, MonitorError> {
    let parts: Vec<&str> = line.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(MonitorError::Parse(format!("expected 2 fields in `{line}`")));
    }
    let mut out = Vec::new();
    if let Ok(w) = parts[0].parse::<f64>() {
        out.push(MetricSample::new(t, MetricKind::PowerGpu, w, "nvidia-smi"));
    }
    if let Ok(mib) = parts[1].parse::<f64>() {
        out.push(MetricSample::new(t, MetricKind::GpuMemUsed, mib * 1_048_576.0 / 1e9, "nvidia-smi"));
    }
    Ok(out)
}

/// System memory throughput in GB/s from a `pcm-memory` line such as
/// `|--  System Memory Throughput(MB/s):  12345.67  --|`.
pub fn parse_pcm_memory_line(line: &str) -> Option<f64> {
    let idx = line.find("System Memory Throughput(MB/s):")?;
    let rest = &line[idx + "System Memory Throughput(MB/s):".len()..];
    rest.split_whitespace()
        .next()
        .and_then(|v| v.trim_end_matches("--|").parse::<f64>().ok())
        .map(|mbps| mbps / 1000.0)
}

// ---------------------------------------------------------------- collectors

/// Emits a fixed value on every poll, optionally after a delay.
#[derive(Debug, Clone)]
pub struct ConstantCollector {
    pub id: String,
    pub kind: MetricKind,
    pub value: f64,
    pub delay: Duration,
}

impl ConstantCollector {
    pub fn new(id: impl Into<String>, kind: MetricKind, value: f64) -> Self {
        Self {
            id: id.into(),
            kind,
            value,
            delay: Duration::ZERO,
        }
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

impl Collector for ConstantCollector {
    fn id(&self) -> &str {
        &self.id
    }

    fn kinds(&self) -> Vec<MetricKind> {
        vec![self.kind]
    }

    fn poll(&mut self, now: f64) -> Result<Vec<MetricSample>, MonitorError> {
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        Ok(vec![MetricSample::new(now, self.kind, self.value, self.id.clone())])
    }
}

fn read_file(path: &Path) -> Result<String, MonitorError> {
    std::fs::read_to_string(path).map_err(|source| MonitorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// CPU utilization and used memory from procfs.
#[derive(Debug)]
pub struct ProcStatCollector {
    root: PathBuf,
    last: Option<String>,
}

impl ProcStatCollector {
    pub fn new() -> Self {
        Self::with_root("/proc")
    }

    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            last: None,
        }
    }
}

impl Default for ProcStatCollector {
    fn default() -> Self {
        Self::new()
    }
}

impl Collector for ProcStatCollector {
    fn id(&self) -> &str {
        "procstat"
    }

    fn kinds(&self) -> Vec<MetricKind> {
        vec![MetricKind::CpuUtil, MetricKind::CpuMemUsed]
    }

    fn init(&mut self) -> Result<(), MonitorError> {
        let stat = read_file(&self.root.join("stat")).map_err(|e| MonitorError::CollectorInit {
            id: self.id().into(),
            reason: e.to_string(),
        })?;
        cpu_jiffies(&stat)?;
        self.last = Some(stat);
        Ok(())
    }

    fn poll(&mut self, now: f64) -> Result<Vec<MetricSample>, MonitorError> {
        let stat = read_file(&self.root.join("stat"))?;
        let mut out = Vec::new();
        if let Some(prev) = self.last.replace(stat.clone()) {
            match parse_proc_stat(&prev, &stat) {
                Ok(u) => out.push(MetricSample::new(now, MetricKind::CpuUtil, u, "procstat")),
                Err(e) => log::debug!("procstat: {e}"),
            }
        }
        if let Ok(mem) = read_file(&self.root.join("meminfo")).and_then(|m| parse_meminfo(&m)) {
            out.push(MetricSample::new(now, MetricKind::CpuMemUsed, mem, "procstat"));
        }
        Ok(out)
    }
}

/// Package power from RAPL energy counters under the powercap sysfs tree.
#[derive(Debug)]
pub struct RaplCollector {
    root: PathBuf,
    zones: Vec<PathBuf>,
    last: Option<(Instant, Vec<(u64, u64)>)>,
}

impl RaplCollector {
    pub fn new() -> Self {
        Self::with_root("/sys/class/powercap")
    }

    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            zones: Vec::new(),
            last: None,
        }
    }

    fn read_counters(&self) -> Result<Vec<(u64, u64)>, MonitorError> {
        self.zones
            .iter()
            .map(|z| {
                let energy = read_file(&z.join("energy_uj"))?.trim().parse::<u64>().map_err(|e| MonitorError::Parse(e.to_string()))?;
                let range = read_file(&z.join("max_energy_range_uj"))
                    .ok()
                    .and_then(|r| r.trim().parse::<u64>().ok())
                    .unwrap_or(u64::MAX);
                Ok((energy, range))
            })
            .collect()
    }
}

impl Default for RaplCollector {
    fn default() -> Self {
        Self::new()
    }
}

impl Collector for RaplCollector {
    fn id(&self) -> &str {
        "rapl"
    }

    fn kinds(&self) -> Vec<MetricKind> {
        vec![MetricKind::PowerCpu]
    }

    fn init(&mut self) -> Result<(), MonitorError> {
        let unavailable = |reason: String| MonitorError::CollectorInit {
            id: "rapl".into(),
            reason,
        };
        let entries = std::fs::read_dir(&self.root).map_err(|e| unavailable(e.to_string()))?;
        let mut zones: Vec<PathBuf> = entries
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("intel-rapl:") && n.matches(':').count() == 1)
            })
            .filter(|p| p.join("energy_uj").exists())
            .collect();
        zones.sort();
        if zones.is_empty() {
            return Err(unavailable("no RAPL package zones".into()));
        }
        self.zones = zones;
        let counters = self.read_counters().map_err(|e| unavailable(e.to_string()))?;
        self.last = Some((Instant::now(), counters));
        Ok(())
    }

    fn poll(&mut self, now: f64) -> Result<Vec<MetricSample>, MonitorError> {
        let counters = self.read_counters()?;
        let at = Instant::now();
        let mut out = Vec::new();
        if let Some((prev_at, prev)) = self.last.replace((at, counters.clone())) {
            let dt = at.duration_since(prev_at).as_secs_f64();
            if dt > 0.0 {
                let joules: f64 = prev
                    .iter()
                    .zip(&counters)
                    .map(|(&(e0, _), &(e1, range))| {
                        let d = if e1 >= e0 { e1 - e0 } else { range - e0 + e1 };
                        d as f64 / 1e6
                    })
                    .sum();
                out.push(MetricSample::new(now, MetricKind::PowerCpu, joules / dt, "rapl"));
            }
        }
        Ok(out)
    }
}

/// GPU power and memory use through `nvidia-smi` queries.
#[derive(Debug, Default)]
pub struct NvidiaSmiCollector;

impl Collector for NvidiaSmiCollector {
    fn id(&self) -> &str {
        "nvidia-smi"
    }

    fn kinds(&self) -> Vec<MetricKind> {
        vec![MetricKind::PowerGpu, MetricKind::GpuMemUsed]
    }

    fn init(&mut self) -> Result<(), MonitorError> {
        self.query().map(|_| ()).map_err(|e| MonitorError::CollectorInit {
            id: "nvidia-smi".into(),
            reason: e.to_string(),
        })
    }

    fn poll(&mut self, now: f64) -> Result<Vec<MetricSample>, MonitorError> {
        let text = self.query()?;
        let line = text.lines().next().unwrap_or_default();
        parse_nvidia_smi_line(line, now)
    }
}

impl NvidiaSmiCollector {
    fn query(&self) -> Result<String, MonitorError> {
        let out = Command::new("nvidia-smi")
            .args(["--query-gpu=power.draw,memory.used", "--format=csv,noheader,nounits", "-i", "0"])
            .stderr(Stdio::null())
            .output()
            .map_err(|e| MonitorError::Poll {
                id: "nvidia-smi".into(),
                reason: e.to_string(),
            })?;
        if !out.status.success() {
            return Err(MonitorError::Poll {
                id: "nvidia-smi".into(),
                reason: format!("exited with {}", out.status),
            });
        }
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    }
}

/// Runs a line-oriented tool in the background and keeps its latest parsed output.
struct StreamingTool {
    child: Child,
    latest: Arc<Mutex<Vec<MetricSample>>>,
    reader: Option<JoinHandle<()>>,
}

impl StreamingTool {
    fn spawn<F>(program: &str, args: &[String], mut parse: F) -> Result<Self, std::io::Error>
    where
        F: FnMut(&str) -> Vec<MetricSample> + Send + 'static,
    {
        let mut child = Command::new(program)
            .args(args)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let stdout = child.stdout.take().ok_or_else(|| std::io::Error::other("no stdout"))?;
        let latest = Arc::new(Mutex::new(Vec::new()));
        let sink = Arc::clone(&latest);
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                let samples = parse(&line);
                if !samples.is_empty() {
                    *sink.lock().unwrap_or_else(|e| e.into_inner()) = samples;
                }
            }
        });
        Ok(Self {
            child,
            latest,
            reader: Some(reader),
        })
    }

    fn take(&self) -> Vec<MetricSample> {
        std::mem::take(&mut *self.latest.lock().unwrap_or_else(|e| e.into_inner()))
    }

    fn exited(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(Some(_)))
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

/// SM activity and occupancy from a `dcgmi dmon` subprocess.
pub struct DcgmCollector {
    interval_ms: u64,
    peak_dram_gbps: Option<f64>,
    tool: Option<StreamingTool>,
}

impl DcgmCollector {
    pub fn new(interval: Duration, peak_dram_gbps: Option<f64>) -> Self {
        Self {
            interval_ms: interval.as_millis().max(1) as u64,
            peak_dram_gbps,
            tool: None,
        }
    }
}

impl Collector for DcgmCollector {
    fn id(&self) -> &str {
        "dcgm"
    }

    fn kinds(&self) -> Vec<MetricKind> {
        vec![MetricKind::Smact, MetricKind::Smocc, MetricKind::GpuMemBw]
    }

    fn init(&mut self) -> Result<(), MonitorError> {
        let mut parser = DcgmParser {
            peak_dram_gbps: self.peak_dram_gbps,
            ..Default::default()
        };
        // 1002 SMACT, 1003 SMOCC, 1005 DRAMA
        let args = vec![
            "dmon".to_string(),
            "-e".into(),
            "1002,1003,1005".into(),
            "-d".into(),
            self.interval_ms.to_string(),
        ];
        let mut tool = StreamingTool::spawn("dcgmi", &args, move |line| parser.parse_line(line, 0.0).unwrap_or_default())
            .map_err(|e| MonitorError::CollectorInit {
                id: "dcgm".into(),
                reason: e.to_string(),
            })?;
        std::thread::sleep(Duration::from_millis(200));
        if tool.exited() {
            tool.kill();
            return Err(MonitorError::CollectorInit {
                id: "dcgm".into(),
                reason: "dcgmi exited immediately".into(),
            });
        }
        self.tool = Some(tool);
        Ok(())
    }

    fn poll(&mut self, _now: f64) -> Result<Vec<MetricSample>, MonitorError> {
        Ok(self.tool.as_ref().map(StreamingTool::take).unwrap_or_default())
    }

    fn stop(&mut self) {
        if let Some(mut t) = self.tool.take() {
            t.kill();
        }
    }
}

/// Host memory bandwidth from a `pcm-memory` subprocess.
pub struct PcmMemoryCollector {
    interval_secs: f64,
    tool: Option<StreamingTool>,
}

impl PcmMemoryCollector {
    pub fn new(interval: Duration) -> Self {
        Self {
            interval_secs: interval.as_secs_f64().max(0.1),
            tool: None,
        }
    }
}

impl Collector for PcmMemoryCollector {
    fn id(&self) -> &str {
        "pcm-memory"
    }

    fn kinds(&self) -> Vec<MetricKind> {
        vec![MetricKind::CpuMemBw]
    }

    fn init(&mut self) -> Result<(), MonitorError> {
        let args = vec![self.interval_secs.to_string()];
        let mut tool = StreamingTool::spawn("pcm-memory", &args, |line| {
            parse_pcm_memory_line(line)
                .map(|gbps| vec![MetricSample::new(0.0, MetricKind::CpuMemBw, gbps, "pcm-memory")])
                .unwrap_or_default()
        })
        .map_err(|e| MonitorError::CollectorInit {
            id: "pcm-memory".into(),
            reason: e.to_string(),
        })?;
        std::thread::sleep(Duration::from_millis(200));
        if tool.exited() {
            tool.kill();
            return Err(MonitorError::CollectorInit {
                id: "pcm-memory".into(),
                reason: "pcm-memory exited immediately".into(),
            });
        }
        self.tool = Some(tool);
        Ok(())
    }

    fn poll(&mut self, _now: f64) -> Result<Vec<MetricSample>, MonitorError> {
        Ok(self.tool.as_ref().map(StreamingTool::take).unwrap_or_default())
    }

    fn stop(&mut self) {
        if let Some(mut t) = self.tool.take() {
            t.kill();
        }
    }
}

/// Every host collector; unavailable ones disable themselves at start.
pub fn default_collectors(interval: Duration, gpu: bool) -> Vec<Box<dyn Collector>> {
    let mut v: Vec<Box<dyn Collector>> = vec![Box::new(ProcStatCollector::new()), Box::new(RaplCollector::new())];
    if gpu {
        v.push(Box::new(DcgmCollector::new(interval, None)));
        v.push(Box::new(NvidiaSmiCollector));
    }
    v.push(Box::new(PcmMemoryCollector::new(interval)));
    v
}

// ---------------------------------------------------------------- samples.csv

pub const SAMPLES_HEADER: [&str; 4] = ["t", "kind", "value", "source"];

/// Write samples, then one row with an empty value per gap and kind.
pub fn write_samples_csv<W: Write>(w: W, samples: &[MetricSample], gaps: &[MetricGap]) -> Result<(), MonitorError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(SAMPLES_HEADER)?;
    for s in samples {
        wr.write_record([s.t.to_string(), s.kind.to_string(), s.value.to_string(), s.source.clone()])?;
    }
    for g in gaps {
        for k in &g.kinds {
            wr.write_record([g.t.to_string(), k.to_string(), String::new(), g.source.clone()])?;
        }
    }
    wr.flush().map_err(|source| MonitorError::Io {
        path: PathBuf::from("samples.csv"),
        source,
    })?;
    Ok(())
}

/// Inverse of [`write_samples_csv`]; gap rows come back one per kind.
pub fn read_samples_csv<R: Read>(r: R) -> Result<(Vec<MetricSample>, Vec<MetricGap>), MonitorError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut samples = Vec::new();
    let mut gaps = Vec::new();
    for row in rd.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(MonitorError::Parse(format!("samples row has {} fields", row.len())));
        }
        let t: f64 = row[0].parse().map_err(|_| MonitorError::Parse(format!("bad time `{}`", &row[0])))?;
        let kind: MetricKind = row[1].parse()?;
        let source = row[3].to_string();
        if row[2].is_empty() {
            gaps.push(MetricGap {
                t,
                source,
                kinds: vec![kind],
                reason: String::new(),
            });
        } else {
            let value = row[2].parse().map_err(|_| MonitorError::Parse(format!("bad value `{}`", &row[2])))?;
            samples.push(MetricSample::new(t, kind, value, source));
        }
    }
    Ok((samples, gaps))
}
