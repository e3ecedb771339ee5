mod common;

use common::workloads::*;
use genaibench::config::Policy;
use genaibench::monitor::MetricKind;
use genaibench::simgpu::{exclusive_baseline, simulate, synth_utilization, SimDevice, SimKernel};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn conservation_order_and_capacity((device, kernels, policy) in arb_kernel_set()) {
        let r = simulate(&device, &kernels, policy).unwrap();
        if let Err(e) = check_invariants(&device, &kernels, &r) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn starts_match_reference_walk((device, kernels, policy) in arb_kernel_set()) {
        let r = simulate(&device, &kernels, policy).unwrap();
        let want = reference_starts(&device, &kernels, policy);
        for k in &r.kernels {
            prop_assert_eq!(Some(&k.start_ns), want.get(&(k.app.clone(), k.index)), "{}[{}]", k.app, k.index);
        }
    }

    #[test]
    fn same_input_same_bytes((device, kernels, policy) in arb_kernel_set()) {
        let a = serde_json::to_string(&simulate(&device, &kernels, policy).unwrap()).unwrap();
        let b = serde_json::to_string(&simulate(&device, &kernels, policy).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn exclusive_is_never_slower((device, kernels, policy) in arb_kernel_set()) {
        let r = simulate(&device, &kernels, policy).unwrap();
        for (app, done) in &r.app_completion {
            let own: Vec<SimKernel> = kernels.iter().filter(|k| &k.app == app).cloned().collect();
            let alone = exclusive_baseline(&device, &own).unwrap();
            prop_assert!(alone.app_completion[app] <= *done);
        }
    }

    #[test]
    fn smocc_never_exceeds_smact((device, kernels, policy) in arb_kernel_set(), ms in 1u64..50) {
        let r = simulate(&device, &kernels, policy).unwrap();
        let samples = synth_utilization(&r, &device, ms as f64 / 1000.0);
        for pair in samples.chunks(2) {
            prop_assert_eq!(pair[0].kind, MetricKind::Smact);
            prop_assert!(pair[1].value <= pair[0].value);
            prop_assert!((0.0..=100.0).contains(&pair[0].value));
        }
    }
}

#[test]
fn greedy_starves_the_small_app() {
    let ks = canonical_mixed();
    let small: Vec<SimKernel> = ks.iter().filter(|k| k.app == "small").cloned().collect();
    let device = SimDevice::new(SM_COUNT);
    let alone = exclusive_baseline(&device, &small).unwrap();
    let greedy = simulate(&device, &ks, Policy::Greedy).unwrap();
    let partitioned = simulate(&equal_partition(&["big", "small"]), &ks, Policy::StaticPartition).unwrap();
    let g = p95_normalized(&greedy, &alone, "small");
    let p = p95_normalized(&partitioned, &alone, "small");
    assert!(g >= 10.0, "greedy p95 {g}");
    assert!(p <= 3.0, "partition p95 {p}");
}

#[test]
fn idle_partitions_drop_smact_in_steps() {
    let (device, ks, q) = staggered_three();
    let r = simulate(&device, &ks, Policy::StaticPartition).unwrap();
    let samples = synth_utilization(&r, &device, 0.5);
    let smact: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.kind == MetricKind::Smact)
        .map(|s| (s.t, s.value))
        .collect();
    let level = |n: u32| f64::from(100 * n * q) / f64::from(SM_COUNT);
    let want = [
        (0.0, level(3)),
        (0.5, level(3)),
        (1.0, level(2)),
        (1.5, level(2)),
        (2.0, level(1)),
        (2.5, level(1)),
        (3.0, 0.0),
    ];
    assert_eq!(smact, want);
}

#[test]
fn demand_over_quota_is_stretched() {
    let device = equal_partition(&["a", "b"]);
    let r = simulate(&device, &[SimKernel::new("a", 0.0, 1.0, SM_COUNT)], Policy::StaticPartition).unwrap();
    assert_eq!(r.kernels[0].end_ns, 2_000_000_000);
    assert_eq!(r.kernels[0].sms_used, 36);
}
