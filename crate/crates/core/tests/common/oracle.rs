//! Independent reference implementations used to check the library.

use std::collections::{BTreeMap, BTreeSet};

use genaibench::adapters::{Marks, RequestRecord};
use genaibench::config::Slo;
use proptest::prelude::*;

/// (fixture, busy jiffies, total jiffies), counted by hand from the first
/// eight fields of the aggregate line.
pub const PROC_STAT_CASES: [(&str, u64, u64); 3] = [
    // user 100, system 50, idle 150, iowait 50, softirq 10
    ("mixed", 160, 360),
    // user 600, system 100, idle 400, softirq 20, steal 60; guest excluded
    ("guest", 780, 1180),
    // user 250, system 250, idle 500
    ("half", 500, 1000),
];

/// Brute-force SLO attainment: `(met, evaluated)`.
pub fn slo_attainment(records: &[RequestRecord], slo: &Slo) -> (usize, usize) {
    let mut met = 0;
    let mut total = 0;
    for r in records {
        if !r.ok {
            total += 1;
            continue;
        }
        match (slo, &r.marks) {
            (Slo::LatencyPair { ttft, tpot }, Marks::Tokens { token_times }) => {
                total += 1;
                if token_times.is_empty() {
                    continue;
                }
                let n = token_times.len();
                let first = token_times[0];
                let last = token_times[n - 1];
                let ttft_ok = first - r.t_submit <= *ttft;
                let tpot_ok = n == 1 || (last - first) / (n - 1) as f64 <= *tpot;
                if ttft_ok && tpot_ok {
                    met += 1;
                }
            }
            (Slo::StepTime(limit), Marks::Steps { step_times, .. }) => {
                if step_times.is_empty() {
                    total += 1;
                }
                for s in step_times {
                    total += 1;
                    if s <= limit {
                        met += 1;
                    }
                }
            }
            (Slo::SegmentTime(limit), Marks::Segment { segment_latency, .. }) => {
                total += 1;
                if segment_latency <= limit {
                    met += 1;
                }
            }
            _ => panic!("oracle given mismatched records"),
        }
    }
    (met, total)
}

/// Percentile by sorting and indexing at rank `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let mut rank = (p * n as f64 / 100.0).ceil() as usize;
    if rank < 1 {
        rank = 1;
    }
    if rank > n {
        rank = n;
    }
    v[rank - 1]
}

/// Whether the directed graph has a cycle, by three-colour DFS.
pub fn has_cycle(nodes: &[String], edges: &BTreeMap<String, Vec<String>>) -> bool {
    fn visit(
        n: &str,
        edges: &BTreeMap<String, Vec<String>>,
        grey: &mut BTreeSet<String>,
        black: &mut BTreeSet<String>,
    ) -> bool {
        if black.contains(n) {
            return false;
        }
        if !grey.insert(n.to_string()) {
            return true;
        }
        for m in edges.get(n).into_iter().flatten() {
            if visit(m, edges, grey, black) {
                return true;
            }
        }
        grey.remove(n);
        black.insert(n.to_string());
        false
    }
    let mut grey = BTreeSet::new();
    let mut black = BTreeSet::new();
    nodes.iter().any(|n| visit(n, edges, &mut grey, &mut black))
}

/// Times on a 1/64 s grid so that threshold ties are exact.
fn grid(max: u32) -> impl Strategy<Value = f64> {
    (0..=max).prop_map(|k| f64::from(k) / 64.0)
}

pub fn arb_pair_slo() -> impl Strategy<Value = Slo> {
    (grid(128), grid(32)).prop_map(|(ttft, tpot)| Slo::LatencyPair { ttft, tpot })
}

/// A record of the variant matching `slo`; about one in ten failed.
pub fn arb_record(slo: Slo, request_id: u32) -> BoxedStrategy<RequestRecord> {
    let failed = prop::bool::weighted(0.1);
    match slo {
        Slo::LatencyPair { .. } => (grid(640), grid(128), prop::collection::vec(grid(32), 0..12), failed)
            .prop_map(move |(submit, ttft, gaps, failed)| {
                let mut r = RequestRecord::new("t", "n", request_id, submit);
                let mut t = submit + ttft;
                let mut tokens = vec![t];
                for g in gaps {
                    t += g;
                    tokens.push(t);
                }
                r.t_first_output = Some(tokens[0]);
                r.t_complete = t;
                r.marks = Marks::Tokens { token_times: tokens };
                if failed {
                    r.failed(t, "x")
                } else {
                    r
                }
            })
            .boxed(),
        Slo::StepTime(_) => (grid(640), prop::collection::vec(grid(128), 1..10), failed)
            .prop_map(move |(submit, steps, failed)| {
                let mut r = RequestRecord::new("t", "n", request_id, submit);
                r.t_complete = submit + steps.iter().sum::<f64>();
                r.t_first_output = Some(submit + steps[0]);
                r.marks = Marks::Steps {
                    step_times: steps,
                    fallback: false,
                };
                if failed {
                    let t = r.t_complete;
                    r.failed(t, "x")
                } else {
                    r
                }
            })
            .boxed(),
        Slo::SegmentTime(_) => (grid(640), grid(256), 0u32..100, failed)
            .prop_map(move |(submit, lat, idx, failed)| {
                let mut r = RequestRecord::new("t", "n", request_id, submit);
                r.t_complete = submit + lat;
                r.t_first_output = Some(r.t_complete);
                r.marks = Marks::Segment {
                    segment_index: idx,
                    segment_latency: lat,
                };
                if failed {
                    let t = r.t_complete;
                    r.failed(t, "x")
                } else {
                    r
                }
            })
            .boxed(),
        Slo::None => Just(RequestRecord::new("t", "n", request_id, 0.0)).boxed(),
    }
}

pub fn arb_records(slo: Slo, max: usize) -> impl Strategy<Value = Vec<RequestRecord>> {
    prop::collection::vec(any::<prop::sample::Index>(), 0..max).prop_flat_map(move |ix| {
        ix.into_iter()
            .enumerate()
            .map(|(i, _)| arb_record(slo, i as u32))
            .collect::<Vec<_>>()
    })
}

/// A task SLO of a random variant with grid thresholds.
pub fn arb_slo() -> impl Strategy<Value = Slo> {
    prop_oneof![
        arb_pair_slo(),
        grid(128).prop_map(Slo::StepTime),
        grid(256).prop_map(Slo::SegmentTime),
    ]
}

/// Segment records: 147 at or under 2 s, 3 over.
pub fn segments_147_of_150() -> Vec<RequestRecord> {
    (0..150u32)
        .map(|i| {
            let lat = if i % 50 == 49 { 2.5 } else if i % 7 == 0 { 2.0 } else { 1.25 };
            let mut r = RequestRecord::new("captions", "live_captions", i, f64::from(i) * 2.0);
            r.t_complete = r.t_submit + lat;
            r.t_first_output = Some(r.t_complete);
            r.marks = Marks::Segment {
                segment_index: i,
                segment_latency: lat,
            };
            r
        })
        .collect()
}
