//! SLO evaluation, latency statistics and the benchmark report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{Marks, RequestRecord};
use crate::clock::nanos_to_secs;
use crate::config::{Mode, Policy, Slo};
use crate::dag::{exec_id, NodeKind};
use crate::monitor::{summarize, MetricKind};
use crate::stats::{nearest_rank, Summary};
use crate::trace::{read_json, write_json, NodeFailure, Phase, RunTrace, TraceError, FORMAT_VERSION};

pub const REPORT_FILE: &str = "report.json";
pub const PERCENTILE_METHOD: &str = "nearest-rank";
pub const NORMALIZATION: &str =
    "latency_pair: max(ttft/ttft_slo, tpot/tpot_slo); step_time: mean step / slo; segment_time: latency / slo";
pub const MET_RULE: &str = "observed <= threshold";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("request {request_id} of `{task}` has no token timestamps")]
    NoTokens { task: String, request_id: u32 },
    #[error("task `{task}`: SLO `{slo}` does not apply to `{marks}` records")]
    VariantMismatch { task: String, slo: &'static str, marks: &'static str },
    #[error("no SLO threshold to normalize against")]
    NoSlo,
}

fn marks_name(m: &Marks) -> &'static str {
    match m {
        Marks::None => "none",
        Marks::Tokens { .. } => "tokens",
        Marks::Steps { .. } => "steps",
        Marks::Segment { .. } => "segment",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtftTpot {
    pub ttft: f64,
    /// `None` for a single-token response, where TPOT is undefined.
    pub tpot: Option<f64>,
}

/// TTFT and TPOT of a streamed response.
///
/// TPOT is `(t_complete - t_first) / (n_tokens - 1)`, the mean inter-token gap.
pub fn derive_ttft_tpot(rec: &RequestRecord) -> Result<TtftTpot, MetricsError> {
    let no_tokens = || MetricsError::NoTokens {
        task: rec.task_name.clone(),
        request_id: rec.request_id,
    };
    let tokens = match &rec.marks {
        Marks::Tokens { token_times } if !token_times.is_empty() => token_times,
        _ => return Err(no_tokens()),
    };
    let first = rec.t_first_output.unwrap_or(tokens[0]);
    let tpot = (tokens.len() >= 2).then(|| (rec.t_complete - first) / (tokens.len() - 1) as f64);
    Ok(TtftTpot {
        ttft: first - rec.t_submit,
        tpot,
    })
}

fn check_variant(rec: &RequestRecord, slo: &Slo) -> Result<(), MetricsError> {
    let ok = matches!(
        (slo, &rec.marks),
        (Slo::LatencyPair { .. }, Marks::Tokens { .. })
            | (Slo::StepTime(_), Marks::Steps { .. })
            | (Slo::SegmentTime(_), Marks::Segment { .. } | Marks::None)
            | (Slo::None, _)
    );
    // A failed request may not have produced any marks.
    if ok || (!rec.ok && rec.marks == Marks::None) {
        Ok(())
    } else {
        Err(MetricsError::VariantMismatch {
            task: rec.task_name.clone(),
            slo: slo.variant_name(),
            marks: marks_name(&rec.marks),
        })
    }
}

fn segment_latency(rec: &RequestRecord) -> f64 {
    match rec.marks {
        Marks::Segment { segment_latency, .. } => segment_latency,
        _ => rec.t_complete - rec.t_submit,
    }
}

/// Observed latency over the SLO threshold; above 1 is a violation.
pub fn normalized_latency(rec: &RequestRecord, slo: &Slo) -> Result<f64, MetricsError> {
    check_variant(rec, slo)?;
    match *slo {
        Slo::None => Err(MetricsError::NoSlo),
        Slo::LatencyPair { ttft, tpot } => {
            let d = derive_ttft_tpot(rec)?;
            let a = d.ttft / ttft;
            Ok(d.tpot.map_or(a, |t| a.max(t / tpot)))
        }
        Slo::StepTime(limit) => match &rec.marks {
            Marks::Steps { step_times, .. } if !step_times.is_empty() => {
                Ok(step_times.iter().sum::<f64>() / step_times.len() as f64 / limit)
            }
            _ => Err(MetricsError::NoSlo),
        },
        Slo::SegmentTime(limit) => Ok(segment_latency(rec) / limit),
    }
}

/// Verdict for one evaluation unit: a request, or one step of a request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitVerdict {
    pub request_id: u32,
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u32>,
    pub met: bool,
    /// Absent when the request failed before producing a measurable latency.
    pub normalized_latency: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBreakdown {
    pub ttft_met: usize,
    pub tpot_met: usize,
    /// Single-token responses, whose TPOT is met by vacuity.
    pub tpot_vacuous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloResult {
    pub task_name: String,
    pub slo: Slo,
    /// `None` when the task has no SLO or nothing was evaluated.
    pub attainment: Option<f64>,
    pub evaluated: usize,
    pub met: usize,
    pub per_request: Vec<UnitVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<PairBreakdown>,
}

/// Attainment of `slo` over `records`.
///
/// A unit is met iff its latency is at most the threshold. Failed requests
/// count as one unmet unit each.
pub fn evaluate_slo(records: &[RequestRecord], slo: &Slo) -> Result<SloResult, MetricsError> {
    let task_name = records.first().map(|r| r.task_name.clone()).unwrap_or_default();
    let mut per_request = Vec::new();
    let mut breakdown = matches!(slo, Slo::LatencyPair { .. }).then(PairBreakdown::default);
    if !slo.is_none() {
        for rec in records {
            check_variant(rec, slo)?;
            let unit = |step: Option<u32>, met: bool, normalized_latency: Option<f64>| UnitVerdict {
                request_id: rec.request_id,
                node_id: rec.node_id.clone(),
                step,
                met,
                normalized_latency,
            };
            if !rec.ok {
                per_request.push(unit(None, false, None));
                continue;
            }
            match *slo {
                Slo::LatencyPair { ttft, tpot } => {
                    let Ok(d) = derive_ttft_tpot(rec) else {
                        per_request.push(unit(None, false, None));
                        continue;
                    };
                    let ttft_met = d.ttft <= ttft;
                    let tpot_met = d.tpot.is_none_or(|t| t <= tpot);
                    if let Some(b) = breakdown.as_mut() {
                        b.ttft_met += usize::from(ttft_met);
                        b.tpot_met += usize::from(tpot_met);
                        b.tpot_vacuous += usize::from(d.tpot.is_none());
                    }
                    let norm = normalized_latency(rec, slo).ok();
                    per_request.push(unit(None, ttft_met && tpot_met, norm));
                }
                Slo::StepTime(limit) => {
                    let Marks::Steps { step_times, .. } = &rec.marks else {
                        per_request.push(unit(None, false, None));
                        continue;
                    };
                    if step_times.is_empty() {
                        per_request.push(unit(None, false, None));
                    }
                    for (i, s) in step_times.iter().enumerate() {
                        per_request.push(unit(Some(i as u32), *s <= limit, Some(s / limit)));
                    }
                }
                Slo::SegmentTime(limit) => {
                    let l = segment_latency(rec);
                    per_request.push(unit(None, l <= limit, Some(l / limit)));
                }
                Slo::None => unreachable!("handled above"),
            }
        }
    }
    let evaluated = per_request.len();
    let met = per_request.iter().filter(|u| u.met).count();
    Ok(SloResult {
        task_name,
        slo: *slo,
        attainment: (evaluated > 0).then(|| met as f64 / evaluated as f64),
        evaluated,
        met,
        per_request,
        breakdown,
    })
}

/// Nearest-rank latency statistics in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn of(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let p = |q| nearest_rank(&v, q).expect("non-empty");
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            p50: p(50.0),
            p95: p(95.0),
            p99: p(99.0),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_name: String,
    pub nodes: Vec<String>,
    pub requests: usize,
    pub failed: usize,
    pub incomplete: usize,
    /// Request latency `t_complete - t_submit` over successful requests.
    pub latency: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ttft: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tpot: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<LatencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub policy: Policy,
    pub mode: Mode,
    pub seed: u64,
    pub host: String,
    pub started_unix: Option<f64>,
    pub shares: BTreeMap<String, u32>,
    pub sample_interval: f64,
    pub percentile_method: String,
    pub normalization: String,
    pub met_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub metadata: ReportMeta,
    pub partial: bool,
    pub interrupted: bool,
    /// Last finished non-background exec minus first started setup, in seconds.
    pub e2e_seconds: Option<f64>,
    pub tasks: Vec<TaskReport>,
    pub slo: Vec<SloResult>,
    pub resources: BTreeMap<String, Summary>,
    pub failures: Vec<NodeFailure>,
    pub notes: Vec<String>,
    pub monitor_cpu_secs: Option<f64>,
}

impl Report {
    pub fn slo_of(&self, task: &str) -> Option<&SloResult> {
        self.slo.iter().find(|s| s.task_name == task)
    }

    pub fn task(&self, task: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task_name == task)
    }
}

/// Workflow duration from the event log.
pub fn e2e_seconds(trace: &RunTrace) -> Option<f64> {
    let spec = &trace.spec_snapshot;
    let start = trace
        .events
        .iter()
        .filter(|e| e.phase == Phase::Started && e.node_id.starts_with(&format!("{}:", NodeKind::Setup.as_str())))
        .map(|e| e.timestamp)
        .min()?;
    let end = spec
        .workflow
        .iter()
        .filter(|n| !n.background)
        .filter_map(|n| {
            let id = exec_id(&n.node_id);
            trace
                .events
                .iter()
                .filter(|e| e.node_id == id && e.phase == Phase::Finished)
                .map(|e| e.timestamp)
                .max()
        })
        .max()?;
    Some(nanos_to_secs(end.saturating_sub(start)))
}

/// Build the report of a trace. Tasks whose records do not fit their SLO
/// variant are listed in `notes` instead of `slo`.
pub fn build_report(trace: &RunTrace) -> Report {
    let spec = &trace.spec_snapshot;
    let mut tasks = Vec::new();
    let mut slo = Vec::new();
    let mut notes = trace.notes.clone();
    for (name, task) in &spec.tasks {
        let nodes: Vec<String> = spec
            .workflow
            .iter()
            .filter(|n| &n.uses == name)
            .map(|n| n.node_id.clone())
            .collect();
        if nodes.is_empty() {
            continue;
        }
        let records: Vec<RequestRecord> = trace.requests.iter().filter(|r| &r.task_name == name).cloned().collect();
        let ok: Vec<&RequestRecord> = records.iter().filter(|r| r.ok).collect();
        let latencies: Vec<f64> = ok.iter().map(|r| r.t_complete - r.t_submit).collect();
        let pairs: Vec<TtftTpot> = ok.iter().filter_map(|r| derive_ttft_tpot(r).ok()).collect();
        let steps: Vec<f64> = ok
            .iter()
            .flat_map(|r| match &r.marks {
                Marks::Steps { step_times, .. } => step_times.clone(),
                _ => Vec::new(),
            })
            .collect();
        let mut normalized = None;
        if !task.slo.is_none() {
            match evaluate_slo(&records, &task.slo) {
                Ok(mut res) => {
                    res.task_name = name.clone();
                    let norms: Vec<f64> = ok.iter().filter_map(|r| normalized_latency(r, &task.slo).ok()).collect();
                    normalized = LatencyStats::of(&norms);
                    slo.push(res);
                }
                Err(e) => notes.push(e.to_string()),
            }
        }
        tasks.push(TaskReport {
            task_name: name.clone(),
            nodes,
            requests: records.len(),
            failed: records.iter().filter(|r| !r.ok).count(),
            incomplete: records.iter().filter(|r| r.incomplete).count(),
            latency: LatencyStats::of(&latencies),
            ttft: LatencyStats::of(&pairs.iter().map(|p| p.ttft).collect::<Vec<_>>()),
            tpot: LatencyStats::of(&pairs.iter().filter_map(|p| p.tpot).collect::<Vec<_>>()),
            step: LatencyStats::of(&steps),
            normalized,
        });
    }
    let resources = MetricKind::ALL
        .iter()
        .map(|k| (k.as_str().to_string(), summarize(&trace.samples, *k, None)))
        .filter(|(_, s)| !s.is_empty())
        .collect();
    let h = &trace.header;
    Report {
        format_version: FORMAT_VERSION,
        metadata: ReportMeta {
            policy: h.policy,
            mode: h.mode,
            seed: h.seed,
            host: h.host.clone(),
            started_unix: h.started_unix,
            shares: h.shares.clone(),
            sample_interval: h.sample_interval,
            percentile_method: PERCENTILE_METHOD.into(),
            normalization: NORMALIZATION.into(),
            met_rule: MET_RULE.into(),
        },
        partial: trace.partial,
        interrupted: trace.interrupted,
        e2e_seconds: e2e_seconds(trace),
        tasks,
        slo,
        resources,
        failures: trace.failures.clone(),
        notes,
        monitor_cpu_secs: trace.monitor_cpu_secs,
    }
}

/// File-name-safe form of a task name.
pub fn file_stem(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    let s = s.trim_matches('_').to_string();
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if !(c == '_' && out.ends_with('_')) {
            out.push(c);
        }
    }
    if out.is_empty() {
        "task".into()
    } else {
        out
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TraceError {
    TraceError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write `report.json`, `latency_<task>.csv` and `util_<kind>.csv` into `dir`.
pub fn write_report(dir: &Path, report: &Report, trace: &RunTrace) -> Result<(), TraceError> {
    std::fs::create_dir_all(dir).map_err(|source| TraceError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write_json(&dir.join(REPORT_FILE), report)?;
    let slo_of: BTreeMap<&str, &Slo> = trace.spec_snapshot.tasks.iter().map(|(n, t)| (n.as_str(), &t.slo)).collect();
    for task in &report.tasks {
        let path = dir.join(format!("latency_{}.csv", file_stem(&task.task_name)));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(["request_id", "node_id", "t_submit", "t_first_output", "t_complete", "latency", "ok", "normalized_latency"])
            .map_err(|e| csv_err(&path, e))?;
        for r in trace.requests.iter().filter(|r| r.task_name == task.task_name) {
            let norm = slo_of
                .get(r.task_name.as_str())
                .filter(|_| r.ok)
                .and_then(|s| normalized_latency(r, s).ok());
            w.write_record([
                r.request_id.to_string(),
                r.node_id.clone(),
                r.t_submit.to_string(),
                opt(r.t_first_output),
                r.t_complete.to_string(),
                (r.t_complete - r.t_submit).to_string(),
                r.ok.to_string(),
                opt(norm),
            ])
            .map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|source| TraceError::Io { path, source })?;
    }
    for kind in MetricKind::ALL {
        let samples: Vec<_> = trace.samples.iter().filter(|s| s.kind == kind).collect();
        if samples.is_empty() {
            continue;
        }
        let path = dir.join(format!("util_{}.csv", kind.as_str()));
        let f = File::create(&path).map_err(|source| TraceError::Io {
            path: path.clone(),
            source,
        })?;
        let mut w = BufWriter::new(f);
        let io = |source| TraceError::Io {
            path: path.clone(),
            source,
        };
        writeln!(w, "t,{},source", kind.as_str()).map_err(io)?;
        for s in samples {
            writeln!(w, "{},{},{}", s.t, s.value, s.source).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<Report, TraceError> {
    let path = dir.join(REPORT_FILE);
    let r: Report = read_json(&path)?;
    if r.format_version != FORMAT_VERSION {
        return Err(TraceError::Version {
            path,
            found: r.format_version,
        });
    }
    Ok(r)
}

fn fmt_secs(s: f64) -> String {
    if s < 1.0 {
        format!("{:.1}ms", s * 1000.0)
    } else {
        format!("{s:.3}s")
    }
}

/// Human-readable summary.
pub fn summary_text(report: &Report) -> String {
    let m = &report.metadata;
    let mut out = String::new();
    let _ = writeln!(out, "mode {}  policy {}  seed {}", m.mode.as_str(), m.policy.as_str(), m.seed);
    match report.e2e_seconds {
        Some(e) => {
            let _ = writeln!(out, "end-to-end: {}", fmt_secs(e));
        }
        None => {
            let _ = writeln!(out, "end-to-end: n/a");
        }
    }
    if report.partial {
        let _ = writeln!(out, "PARTIAL RUN ({} node failures)", report.failures.len());
    }
    for t in &report.tasks {
        let lat = t
            .latency
            .as_ref()
            .map(|l| format!("mean {} p50 {} p95 {} p99 {}", fmt_secs(l.mean), fmt_secs(l.p50), fmt_secs(l.p95), fmt_secs(l.p99)))
            .unwrap_or_else(|| "no completed requests".into());
        let att = report
            .slo_of(&t.task_name)
            .and_then(|s| s.attainment.map(|a| format!("  SLO {:.1}% ({}/{})", a * 100.0, s.met, s.evaluated)))
            .unwrap_or_default();
        let _ = writeln!(out, "  {:<36} {:>4} req  {lat}{att}", t.task_name, t.requests);
    }
    for (kind, s) in &report.resources {
        if let Summary::Stats { mean, max, .. } = s {
            let _ = writeln!(out, "  {kind:<12} mean {mean:.1} max {max:.1}");
        }
    }
    for f in &report.failures {
        let _ = writeln!(out, "  failed {}: {}", f.node_id, f.reason);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(submit: f64, times: &[f64]) -> RequestRecord {
        let mut r = RequestRecord::new("chat", "c", 0, submit);
        r.t_first_output = times.first().copied();
        r.t_complete = *times.last().unwrap_or(&submit);
        r.marks = Marks::Tokens {
            token_times: times.to_vec(),
        };
        r
    }

    #[test]
    fn ttft_tpot_from_three_tokens() {
        let d = derive_ttft_tpot(&tokens(0.0, &[0.5, 0.7, 0.9])).unwrap();
        assert!((d.ttft - 0.5).abs() < 1e-12);
        assert!((d.tpot.unwrap() - 0.2).abs() < 1e-12);
        let one = derive_ttft_tpot(&tokens(0.0, &[0.4])).unwrap();
        assert_eq!(one.tpot, None);
        assert!(matches!(derive_ttft_tpot(&tokens(0.0, &[])), Err(MetricsError::NoTokens { .. })));
    }

    #[test]
    fn pair_needs_both_thresholds() {
        let slo = Slo::LatencyPair { ttft: 1.0, tpot: 0.25 };
        let r = evaluate_slo(&[tokens(0.0, &[0.5, 0.8, 1.1])], &slo).unwrap();
        assert_eq!(r.met, 0);
        let b = r.breakdown.unwrap();
        assert_eq!((b.ttft_met, b.tpot_met), (1, 0));
    }

    #[test]
    fn normalization_rules() {
        let pair = Slo::LatencyPair { ttft: 1.0, tpot: 0.25 };
        assert_eq!(normalized_latency(&tokens(0.0, &[0.5, 1.0]), &pair).unwrap(), 2.0);
        let mut seg = RequestRecord::new("cap", "c", 0, 0.0);
        seg.marks = Marks::Segment {
            segment_index: 0,
            segment_latency: 4.0,
        };
        assert_eq!(normalized_latency(&seg, &Slo::SegmentTime(2.0)).unwrap(), 2.0);
        assert_eq!(normalized_latency(&seg, &Slo::None), Err(MetricsError::NoSlo));
        assert!(matches!(
            normalized_latency(&seg, &pair),
            Err(MetricsError::VariantMismatch { .. })
        ));
    }

    #[test]
    fn threshold_is_inclusive() {
        let mut seg = RequestRecord::new("cap", "c", 0, 0.0);
        seg.marks = Marks::Segment {
            segment_index: 0,
            segment_latency: 2.0,
        };
        let r = evaluate_slo(&[seg], &Slo::SegmentTime(2.0)).unwrap();
        assert_eq!(r.attainment, Some(1.0));
    }

    #[test]
    fn steps_are_units() {
        let mut r = RequestRecord::new("img", "i", 0, 0.0);
        r.marks = Marks::Steps {
            step_times: vec![0.5, 1.5, 1.0],
            fallback: false,
        };
        let res = evaluate_slo(&[r], &Slo::StepTime(1.0)).unwrap();
        assert_eq!((res.met, res.evaluated), (2, 3));
    }

    #[test]
    fn no_slo_is_not_applicable() {
        let r = evaluate_slo(&[RequestRecord::new("dr", "d", 0, 0.0)], &Slo::None).unwrap();
        assert_eq!(r.attainment, None);
        assert_eq!(r.evaluated, 0);
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("Brainstorm (chatbot)"), "brainstorm_chatbot");
        assert_eq!(file_stem("!!"), "task");
    }
}
