//! Simulator workloads and invariant checks shared by several test targets.

use std::collections::BTreeMap;

use genaibench::config::Policy;
use genaibench::simgpu::{KernelRecord, SimDevice, SimKernel, SimResult};
use proptest::prelude::*;

use super::oracle;

pub const SM_COUNT: u32 = 72;
const MS: u64 = 1_000_000;

/// One app with back-to-back full-device kernels of 1 s, one app with 10 ms
/// single-SM kernels submitted every 100 ms.
pub fn canonical_mixed() -> Vec<SimKernel> {
    let mut ks = Vec::new();
    for _ in 0..10 {
        ks.push(SimKernel {
            app: "big".into(),
            submit_ns: 0,
            duration_ns: 1000 * MS,
            sm_demand: SM_COUNT,
            occupancy: 1.0,
        });
    }
    for i in 0..100 {
        ks.push(SimKernel {
            app: "small".into(),
            submit_ns: i * 100 * MS,
            duration_ns: 10 * MS,
            sm_demand: 1,
            occupancy: 1.0,
        });
    }
    ks
}

pub fn equal_partition(apps: &[&str]) -> SimDevice {
    let share = 100 / apps.len() as u32;
    SimDevice::with_shares(SM_COUNT, apps.iter().map(|a| (*a, share))).unwrap()
}

/// p95 over kernels of (co-run latency / exclusive latency) for `app`.
pub fn p95_normalized(result: &SimResult, exclusive: &SimResult, app: &str) -> f64 {
    let alone: BTreeMap<u32, &KernelRecord> = exclusive.kernels_of(app).map(|k| (k.index, k)).collect();
    let ratios: Vec<f64> = result
        .kernels_of(app)
        .map(|k| k.latency_secs() / alone[&k.index].latency_secs())
        .collect();
    oracle::percentile(&ratios, 95.0)
}

/// Three apps, one kernel each sized to the app's quota, finishing at 1, 2 and 3 s.
pub fn staggered_three() -> (SimDevice, Vec<SimKernel>, u32) {
    let device = equal_partition(&["a", "b", "c"]);
    let q = device.quota("a").unwrap();
    let ks = ["a", "b", "c"]
        .iter()
        .zip(1u64..)
        .map(|(app, secs)| SimKernel {
            app: (*app).into(),
            submit_ns: 0,
            duration_ns: secs * 1000 * MS,
            sm_demand: q,
            occupancy: 0.5,
        })
        .collect();
    (device, ks, q)
}

/// Random kernel sets: up to four apps with time-sorted kernels, and a policy.
pub fn arb_kernel_set() -> impl Strategy<Value = (SimDevice, Vec<SimKernel>, Policy)> {
    let kernel = (0u64..2_000, 1u64..1_000, 1u32..=SM_COUNT, 0.0f64..=1.0);
    let app = prop::collection::vec(kernel, 1..8);
    (prop::collection::vec(app, 1..5), prop::bool::ANY).prop_map(|(apps, partition)| {
        let names: Vec<String> = (0..apps.len()).map(|i| format!("app{i}")).collect();
        let mut ks = Vec::new();
        for (name, kernels) in names.iter().zip(apps) {
            let mut submits: Vec<u64> = kernels.iter().map(|k| k.0).collect();
            submits.sort_unstable();
            for (submit, (_, dur, demand, occ)) in submits.into_iter().zip(kernels) {
                ks.push(SimKernel {
                    app: name.clone(),
                    submit_ns: submit * 1000,
                    duration_ns: dur * 1000,
                    sm_demand: demand,
                    occupancy: occ,
                });
            }
        }
        let (device, policy) = if partition {
            let refs: Vec<&str> = names.iter().map(String::as_str).collect();
            (equal_partition(&refs), Policy::StaticPartition)
        } else {
            (SimDevice::new(SM_COUNT), Policy::Greedy)
        };
        (device, ks, policy)
    })
}

/// `d · max(1, demand/available)`, rounded half up to whole nanoseconds.
fn stretched(d: u64, demand: u32, available: u32) -> u64 {
    if demand <= available {
        return d;
    }
    let (d, n, a) = (u128::from(d), u128::from(demand), u128::from(available));
    ((2 * d * n + a) / (2 * a)) as u64
}

/// Conservation, ordering and capacity of a finished simulation.
pub fn check_invariants(device: &SimDevice, input: &[SimKernel], result: &SimResult) -> Result<(), String> {
    if result.kernels.len() != input.len() {
        return Err(format!("{} kernels in, {} out", input.len(), result.kernels.len()));
    }
    let mut by_app: BTreeMap<&str, Vec<&SimKernel>> = BTreeMap::new();
    for k in input {
        by_app.entry(&k.app).or_default().push(k);
    }
    for (app, kernels) in &by_app {
        let out: Vec<&KernelRecord> = result.kernels_of(app).collect();
        if out.len() != kernels.len() {
            return Err(format!("{app}: {} kernels in, {} out", kernels.len(), out.len()));
        }
        let available = device.quota(app).unwrap_or(device.sm_count);
        for (i, (k, r)) in kernels.iter().zip(&out).enumerate() {
            if r.index as usize != i || r.submit_ns != k.submit_ns || r.sm_demand != k.sm_demand {
                return Err(format!("{app}[{i}]: record does not match its kernel"));
            }
            if r.start_ns < k.submit_ns {
                return Err(format!("{app}[{i}]: starts before submit"));
            }
            let want = stretched(k.duration_ns, k.sm_demand, available);
            if r.end_ns - r.start_ns != want {
                return Err(format!("{app}[{i}]: ran {} ns, expected {want}", r.end_ns - r.start_ns));
            }
            if i > 0 && out[i - 1].end_ns > r.start_ns {
                return Err(format!("{app}[{i}]: overlaps its predecessor"));
            }
        }
    }
    // capacity at every start instant
    for probe in &result.kernels {
        let t = probe.start_ns;
        let active = result.kernels.iter().filter(|k| k.start_ns <= t && t < k.end_ns);
        match &device.partitions {
            None => {
                let used: u32 = active.map(|k| k.sms_used).sum();
                if used > device.sm_count {
                    return Err(format!("{used} SMs in use at {t} ns"));
                }
            }
            Some(quotas) => {
                let mut per_app: BTreeMap<&str, u32> = BTreeMap::new();
                for k in active {
                    *per_app.entry(&k.app).or_default() += k.sms_used;
                }
                for (app, used) in per_app {
                    if used > quotas[app] {
                        return Err(format!("{app} uses {used} SMs over quota {} at {t} ns", quotas[app]));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Start times by a naive event walk, keyed by (app, index).
///
/// Greedy: FCFS over arrivals at the device, where an app's next kernel
/// arrives once its predecessor ended and its own submit time has passed.
/// Partition: every app runs alone inside its quota, so a kernel starts at
/// `max(submit, previous end)`.
pub fn reference_starts(device: &SimDevice, input: &[SimKernel], policy: Policy) -> BTreeMap<(String, u32), u64> {
    let mut queues: BTreeMap<&str, Vec<&SimKernel>> = BTreeMap::new();
    for k in input {
        queues.entry(&k.app).or_default().push(k);
    }
    let mut starts = BTreeMap::new();
    if policy == Policy::StaticPartition {
        for (app, ks) in &queues {
            let quota = device.quota(app).unwrap();
            let mut prev_end = 0;
            for (i, k) in ks.iter().enumerate() {
                let s = k.submit_ns.max(prev_end);
                prev_end = s + stretched(k.duration_ns, k.sm_demand, quota);
                starts.insert((app.to_string(), i as u32), s);
            }
        }
        return starts;
    }
    let mut next: BTreeMap<&str, usize> = queues.keys().map(|a| (*a, 0)).collect();
    let mut busy: BTreeMap<&str, bool> = queues.keys().map(|a| (*a, false)).collect();
    let mut waiting: Vec<(u64, u64, String, u32, u32, u64)> = Vec::new();
    let mut running: Vec<(u64, String, u32)> = Vec::new();
    let mut free = device.sm_count;
    let mut t = 0u64;
    loop {
        running.retain(|(end, app, demand)| {
            if *end <= t {
                free += demand;
                busy.insert(queues.get_key_value(app.as_str()).unwrap().0, false);
                false
            } else {
                true
            }
        });
        for (app, ks) in &queues {
            let i = next[app];
            if !busy[app] && i < ks.len() && ks[i].submit_ns <= t {
                let k = ks[i];
                waiting.push((t, k.submit_ns, app.to_string(), i as u32, k.sm_demand, k.duration_ns));
                busy.insert(app, true);
                next.insert(app, i + 1);
            }
        }
        waiting.sort();
        while let Some(head) = waiting.first() {
            if head.4 > free {
                break;
            }
            let (_, _, app, idx, demand, dur) = waiting.remove(0);
            free -= demand;
            starts.insert((app.clone(), idx), t);
            running.push((t + dur, app, demand));
        }
        let mut candidates: Vec<u64> = running.iter().map(|r| r.0).collect();
        for (app, ks) in &queues {
            let i = next[app];
            if !busy[app] && i < ks.len() {
                candidates.push(ks[i].submit_ns.max(t + 1));
            }
        }
        match candidates.into_iter().min() {
            Some(n) => t = n,
            None => break,
        }
    }
    starts
}
