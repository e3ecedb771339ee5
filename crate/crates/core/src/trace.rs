//! Run trace and its on-disk form: `trace.json`, `requests.json`, `samples.csv`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::RequestRecord;
use crate::config::{BenchmarkSpec, Mode, Policy};
use crate::monitor::{read_samples_csv, write_samples_csv, MetricGap, MetricSample, MonitorError};

pub const FORMAT_VERSION: u32 = 1;
pub const TRACE_FILE: &str = "trace.json";
pub const REQUESTS_FILE: &str = "requests.json";
pub const SAMPLES_FILE: &str = "samples.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Dispatched,
    Started,
    Finished,
    Failed,
    Cancelled,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Finished | Phase::Failed | Phase::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeEvent {
    pub node_id: String,
    pub phase: Phase,
    /// Nanoseconds since run start.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeFailure {
    pub node_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHeader {
    pub mode: Mode,
    pub policy: Policy,
    pub seed: u64,
    /// Wall-clock start in Unix seconds; absent for simulated runs.
    pub started_unix: Option<f64>,
    pub host: String,
    /// GPU share per placement unit, in percent.
    pub shares: BTreeMap<String, u32>,
    pub sample_interval: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub header: RunHeader,
    pub events: Vec<NodeEvent>,
    pub requests: Vec<RequestRecord>,
    pub samples: Vec<MetricSample>,
    pub gaps: Vec<MetricGap>,
    pub notes: Vec<String>,
    pub failures: Vec<NodeFailure>,
    /// Some node failed, timed out or the run was interrupted.
    pub partial: bool,
    pub interrupted: bool,
    /// CPU seconds spent by monitor threads (live runs only).
    pub monitor_cpu_secs: Option<f64>,
    pub spec_snapshot: BenchmarkSpec,
}

impl RunTrace {
    pub fn events_of<'a>(&'a self, node_id: &'a str) -> impl Iterator<Item = &'a NodeEvent> + 'a {
        self.events.iter().filter(move |e| e.node_id == node_id)
    }

    /// Timestamp of the first `phase` event of `node_id`.
    pub fn time_of(&self, node_id: &str, phase: Phase) -> Option<u64> {
        self.events_of(node_id).find(|e| e.phase == phase).map(|e| e.timestamp)
    }

    /// Terminal phase reached by `node_id`, if any.
    pub fn outcome(&self, node_id: &str) -> Option<Phase> {
        self.events_of(node_id).map(|e| e.phase).find(|p| p.is_terminal())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: unsupported format_version {found} (expected {FORMAT_VERSION})")]
    Version { path: PathBuf, found: u32 },
    #[error(transparent)]
    Samples(#[from] MonitorError),
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    format_version: u32,
    header: RunHeader,
    events: Vec<NodeEvent>,
    failures: Vec<NodeFailure>,
    partial: bool,
    interrupted: bool,
    monitor_cpu_secs: Option<f64>,
    notes: Vec<String>,
    gaps: Vec<MetricGap>,
    spec_snapshot: BenchmarkSpec,
}

#[derive(Serialize, Deserialize)]
struct RequestsFile {
    format_version: u32,
    requests: Vec<RequestRecord>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), TraceError> {
    let io = |source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| TraceError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, TraceError> {
    let f = File::open(path).map_err(|source| TraceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| TraceError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn check_version(path: &Path, found: u32) -> Result<(), TraceError> {
    if found != FORMAT_VERSION {
        return Err(TraceError::Version {
            path: path.to_path_buf(),
            found,
        });
    }
    Ok(())
}

/// Write the three raw trace files into `dir` (created if missing).
pub fn write_trace(dir: &Path, trace: &RunTrace) -> Result<(), TraceError> {
    std::fs::create_dir_all(dir).map_err(|source| TraceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let file = TraceFile {
        format_version: FORMAT_VERSION,
        header: trace.header.clone(),
        events: trace.events.clone(),
        failures: trace.failures.clone(),
        partial: trace.partial,
        interrupted: trace.interrupted,
        monitor_cpu_secs: trace.monitor_cpu_secs,
        notes: trace.notes.clone(),
        gaps: trace.gaps.clone(),
        spec_snapshot: trace.spec_snapshot.clone(),
    };
    write_json(&dir.join(TRACE_FILE), &file)?;
    write_json(
        &dir.join(REQUESTS_FILE),
        &RequestsFile {
            format_version: FORMAT_VERSION,
            requests: trace.requests.clone(),
        },
    )?;
    let path = dir.join(SAMPLES_FILE);
    let f = File::create(&path).map_err(|source| TraceError::Io { path, source })?;
    write_samples_csv(BufWriter::new(f), &trace.samples, &trace.gaps)?;
    Ok(())
}

/// Inverse of [`write_trace`].
pub fn read_trace(dir: &Path) -> Result<RunTrace, TraceError> {
    let tpath = dir.join(TRACE_FILE);
    let t: TraceFile = read_json(&tpath)?;
    check_version(&tpath, t.format_version)?;
    let rpath = dir.join(REQUESTS_FILE);
    let r: RequestsFile = read_json(&rpath)?;
    check_version(&rpath, r.format_version)?;
    let spath = dir.join(SAMPLES_FILE);
    let f = File::open(&spath).map_err(|source| TraceError::Io { path: spath, source })?;
    let (samples, _) = read_samples_csv(BufReader::new(f))?;
    Ok(RunTrace {
        header: t.header,
        events: t.events,
        requests: r.requests,
        samples,
        gaps: t.gaps,
        notes: t.notes,
        failures: t.failures,
        partial: t.partial,
        interrupted: t.interrupted,
        monitor_cpu_secs: t.monitor_cpu_secs,
        spec_snapshot: t.spec_snapshot,
    })
}

/// Host name for run metadata.
pub fn host_name() -> String {
    let mut buf = [0u8; 256];
    // SAFETY: the buffer is writable for its full length.
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return "unknown".into();
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}
