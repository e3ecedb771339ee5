mod common;

use common::oracle::{self, arb_records, arb_slo, segments_147_of_150};
use genaibench::adapters::{Marks, RequestRecord};
use genaibench::config::Slo;
use genaibench::metrics::{derive_ttft_tpot, evaluate_slo, normalized_latency, LatencyStats, MetricsError};
use genaibench::stats::{nearest_rank, Summary};
use proptest::prelude::*;

fn slo_and_records() -> impl Strategy<Value = (Slo, Vec<RequestRecord>)> {
    arb_slo().prop_flat_map(|slo| (Just(slo), arb_records(slo, 40)))
}

fn scale_record(r: &RequestRecord, k: f64) -> RequestRecord {
    let mut s = r.clone();
    s.t_submit *= k;
    s.t_complete *= k;
    s.t_first_output = s.t_first_output.map(|t| t * k);
    s.marks = match &r.marks {
        Marks::Tokens { token_times } => Marks::Tokens {
            token_times: token_times.iter().map(|t| t * k).collect(),
        },
        Marks::Steps { step_times, fallback } => Marks::Steps {
            step_times: step_times.iter().map(|t| t * k).collect(),
            fallback: *fallback,
        },
        Marks::Segment {
            segment_index,
            segment_latency,
        } => Marks::Segment {
            segment_index: *segment_index,
            segment_latency: segment_latency * k,
        },
        Marks::None => Marks::None,
    };
    s
}

fn scale_slo(slo: &Slo, k: f64) -> Slo {
    match *slo {
        Slo::LatencyPair { ttft, tpot } => Slo::LatencyPair {
            ttft: ttft * k,
            tpot: tpot * k,
        },
        Slo::StepTime(l) => Slo::StepTime(l * k),
        Slo::SegmentTime(l) => Slo::SegmentTime(l * k),
        Slo::None => Slo::None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn attainment_matches_brute_force((slo, records) in slo_and_records()) {
        let res = evaluate_slo(&records, &slo).unwrap();
        let (met, total) = oracle::slo_attainment(&records, &slo);
        prop_assert_eq!(res.met, met);
        prop_assert_eq!(res.evaluated, total);
        let want = (total > 0).then(|| met as f64 / total as f64);
        prop_assert_eq!(res.attainment, want);
        if let Some(a) = res.attainment {
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn attainment_ignores_record_order((slo, records) in slo_and_records(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = evaluate_slo(&records, &slo).unwrap();
        let b = evaluate_slo(&shuffled, &slo).unwrap();
        prop_assert_eq!(a.met, b.met);
        prop_assert_eq!(a.evaluated, b.evaluated);
    }

    #[test]
    fn scaling_times_and_thresholds_keeps_verdicts((slo, records) in slo_and_records(), e in -3i32..4) {
        // powers of two scale every grid value exactly
        let k = 2f64.powi(e);
        let scaled: Vec<RequestRecord> = records.iter().map(|r| scale_record(r, k)).collect();
        let a = evaluate_slo(&records, &slo).unwrap();
        let b = evaluate_slo(&scaled, &scale_slo(&slo, k)).unwrap();
        prop_assert_eq!(a.met, b.met);
        let va: Vec<bool> = a.per_request.iter().map(|u| u.met).collect();
        let vb: Vec<bool> = b.per_request.iter().map(|u| u.met).collect();
        prop_assert_eq!(va, vb);
    }

    #[test]
    fn normalized_latency_agrees_with_verdict((slo, records) in slo_and_records()) {
        prop_assume!(!matches!(slo, Slo::StepTime(_)));
        let res = evaluate_slo(&records, &slo).unwrap();
        for (r, u) in records.iter().zip(&res.per_request) {
            if !r.ok {
                prop_assert!(!u.met);
                prop_assert_eq!(u.normalized_latency, None);
                continue;
            }
            let n = normalized_latency(r, &slo).unwrap();
            prop_assert_eq!(u.normalized_latency, Some(n));
            // a zero threshold gives NaN or infinity for nonzero latency
            if n.is_finite() {
                prop_assert_eq!(u.met, n <= 1.0);
            }
        }
    }

    #[test]
    fn percentiles_are_ordered(values in prop::collection::vec(-1e6f64..1e6, 1..300)) {
        let s = LatencyStats::of(&values).unwrap();
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert!(min <= s.p50 && s.p50 <= s.p95 && s.p95 <= s.p99 && s.p99 <= s.max);
        prop_assert!(s.mean >= min - 1e-6 && s.mean <= s.max + 1e-6);
        prop_assert_eq!(s.count, values.len());
        for p in [50.0, 95.0, 99.0] {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assert_eq!(nearest_rank(&sorted, p), Some(oracle::percentile(&values, p)));
        }
    }

    #[test]
    fn summary_matches_sort_oracle(values in prop::collection::vec(-1e6f64..1e6, 0..300)) {
        match Summary::of(&values) {
            Summary::Empty => prop_assert!(values.is_empty()),
            Summary::Stats { count, mean, p50, p95, max } => {
                prop_assert_eq!(count, values.len());
                prop_assert_eq!(p50, oracle::percentile(&values, 50.0));
                prop_assert_eq!(p95, oracle::percentile(&values, 95.0));
                prop_assert_eq!(max, oracle::percentile(&values, 100.0));
                let m = values.iter().sum::<f64>() / values.len() as f64;
                prop_assert!((mean - m).abs() <= 1e-9 * m.abs().max(1.0));
            }
        }
    }
}

#[test]
fn three_violations_in_150_segments() {
    let res = evaluate_slo(&segments_147_of_150(), &Slo::SegmentTime(2.0)).unwrap();
    assert_eq!(res.evaluated, 150);
    assert_eq!(res.met, 147);
    assert_eq!(res.attainment, Some(0.98));
}

#[test]
fn latency_equal_to_threshold_is_met() {
    let mut r = RequestRecord::new("t", "n", 0, 1.0);
    r.t_first_output = Some(2.0);
    r.t_complete = 2.5;
    r.marks = Marks::Tokens {
        token_times: vec![2.0, 2.25, 2.5],
    };
    let res = evaluate_slo(&[r.clone()], &Slo::LatencyPair { ttft: 1.0, tpot: 0.25 }).unwrap();
    assert_eq!(res.met, 1);
    assert_eq!(normalized_latency(&r, &Slo::LatencyPair { ttft: 1.0, tpot: 0.25 }).unwrap(), 1.0);
    let d = derive_ttft_tpot(&r).unwrap();
    assert_eq!((d.ttft, d.tpot), (1.0, Some(0.25)));
}

#[test]
fn single_token_meets_tpot_vacuously() {
    let mut r = RequestRecord::new("t", "n", 0, 0.0);
    r.t_first_output = Some(0.5);
    r.t_complete = 0.5;
    r.marks = Marks::Tokens { token_times: vec![0.5] };
    let res = evaluate_slo(&[r], &Slo::LatencyPair { ttft: 1.0, tpot: 0.001 }).unwrap();
    assert_eq!(res.met, 1);
    assert_eq!(res.breakdown.unwrap().tpot_vacuous, 1);
}

#[test]
fn steps_are_separate_units() {
    let mut r = RequestRecord::new("img", "n", 0, 0.0);
    r.marks = Marks::Steps {
        step_times: vec![0.5, 1.5, 1.0, 0.9],
        fallback: false,
    };
    r.t_complete = 3.9;
    let res = evaluate_slo(&[r], &Slo::StepTime(1.0)).unwrap();
    assert_eq!((res.met, res.evaluated), (3, 4));
    assert_eq!(res.per_request[1].step, Some(1));
}

#[test]
fn mismatched_marks_are_rejected() {
    let mut r = RequestRecord::new("img", "n", 0, 0.0);
    r.marks = Marks::Tokens { token_times: vec![1.0] };
    let err = evaluate_slo(&[r], &Slo::StepTime(1.0)).unwrap_err();
    assert!(matches!(err, MetricsError::VariantMismatch { .. }));
}

#[test]
fn no_slo_means_no_attainment() {
    let r = RequestRecord::new("t", "n", 0, 0.0);
    let res = evaluate_slo(&[r], &Slo::None).unwrap();
    assert_eq!(res.attainment, None);
    assert_eq!(res.evaluated, 0);
}
