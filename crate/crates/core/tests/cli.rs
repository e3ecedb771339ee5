mod common;

use std::path::Path;
use std::process::Command;
use std::time::Duration;

use common::{fixture, sim_spec, synthetic, workflow};
use genaibench::cli::{main_with_args, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};
use genaibench::config::{to_yaml, Mode, Policy, Secs, WorkloadProfile};
use genaibench::metrics::{read_report, REPORT_FILE};
use genaibench::trace::{read_trace, SAMPLES_FILE, TRACE_FILE};

fn cli(args: &[&str]) -> i32 {
    let mut v = vec!["genaibench"];
    v.extend_from_slice(args);
    main_with_args(v)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validate_exit_codes() {
    let good = fixture("content_creation.yaml");
    assert_eq!(cli(&["validate", s(&good)]), EXIT_OK);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.yaml");
    std::fs::write(&bad, "Chat (chatbot):\n  num_requests: 1\n  device: gpu\n  slo: 1s\n").unwrap();
    assert_eq!(cli(&["validate", s(&bad)]), EXIT_INVALID);
    assert_eq!(cli(&["validate", "/nonexistent.yaml"]), EXIT_RUNTIME);
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["run", s(&good), "--mode", "warp"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn graph_prints() {
    assert_eq!(cli(&["graph", s(&fixture("two_documents.yaml"))]), EXIT_OK);
    assert_eq!(cli(&["graph", "--dot", s(&fixture("two_documents.yaml"))]), EXIT_OK);
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn seeded_sim_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let cfg = fixture("content_creation.yaml");
    for out in [&a, &b] {
        assert_eq!(cli(&["run", s(&cfg), "--mode", "sim", "--seed", "11", "--out", s(out)]), EXIT_OK);
    }
    assert_eq!(read(&a.join(TRACE_FILE)), read(&b.join(TRACE_FILE)));
    assert_eq!(read(&a.join(REPORT_FILE)), read(&b.join(REPORT_FILE)));
    assert!(a.join(SAMPLES_FILE).exists());
    assert!(std::fs::read_dir(&a)
        .unwrap()
        .any(|e| e.unwrap().file_name().to_string_lossy().starts_with("latency_")));

    let before = read(&a.join(REPORT_FILE));
    std::fs::remove_file(a.join(REPORT_FILE)).unwrap();
    assert_eq!(cli(&["report", s(&a)]), EXIT_OK);
    assert_eq!(read(&a.join(REPORT_FILE)), before);

    let c = dir.path().join("c");
    assert_eq!(cli(&["run", s(&cfg), "--mode", "sim", "--seed", "12", "--out", s(&c)]), EXIT_OK);
    assert_ne!(read(&a.join(TRACE_FILE)), read(&c.join(TRACE_FILE)));
}

#[test]
fn overrides_reach_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = fixture("two_documents.yaml");
    let args = [
        "run", s(&cfg), "--mode", "sim", "--policy", "partition", "--seed", "3", "--out", s(&out),
        "--max-concurrency", "1", "--sample-interval", "0.5",
    ];
    assert_eq!(cli(&args), EXIT_OK);
    let trace = read_trace(&out).unwrap();
    assert_eq!(trace.spec_snapshot.options.policy, Policy::StaticPartition);
    assert_eq!(trace.spec_snapshot.options.mode, Mode::Simulated);
    assert_eq!(trace.spec_snapshot.options.max_concurrency, Some(1));
    assert_eq!(trace.spec_snapshot.options.sample_interval, 0.5);
    let report = read_report(&out).unwrap();
    assert_eq!(report.metadata.seed, 3);
}

#[test]
fn failed_node_exits_2_with_outputs() {
    let mut spec = sim_spec(Policy::Greedy);
    let mut t = synthetic("slow", 1, &[]);
    t.profile = Some(WorkloadProfile {
        sleep: Some(Secs(10.0)),
        kernels: None,
    });
    t.timeout = Some(1.0);
    spec.add_task(t);
    workflow(&mut spec, &[("a", "slow", &[], false)]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.yaml");
    std::fs::write(&cfg, to_yaml(&spec)).unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["run", s(&cfg), "--out", s(&out)]), EXIT_RUNTIME);
    let trace = read_trace(&out).unwrap();
    assert!(trace.partial);
    assert!(out.join(REPORT_FILE).exists());
}

#[test]
fn sim_subcommand_replays_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let ks = dir.path().join("k.jsonl");
    std::fs::write(
        &ks,
        "{\"app\":\"big\",\"submit\":0.0,\"duration\":1.0,\"sm_demand\":72}\n\
         {\"app\":\"small\",\"submit\":0.001,\"duration\":0.01,\"sm_demand\":1}\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    assert_eq!(cli(&["sim", s(&ks), "--policy", "partition", "--out", s(&out)]), EXIT_OK);
    let v: serde_json::Value = serde_json::from_slice(&read(&out.join("sim_result.json"))).unwrap();
    assert_eq!(v["result"]["kernels"].as_array().unwrap().len(), 2);
    assert!(out.join(SAMPLES_FILE).exists());
    std::fs::write(&ks, "{\"app\":\"a\"}\n").unwrap();
    assert_eq!(cli(&["sim", s(&ks)]), EXIT_INVALID);
}

#[test]
fn binary_interrupt_writes_partial_trace() {
    let mut spec = sim_spec(Policy::Greedy);
    spec.options.mode = Mode::Live;
    let mut t = synthetic("slow", 1, &[]);
    t.profile = Some(WorkloadProfile {
        sleep: Some(Secs(30.0)),
        kernels: None,
    });
    spec.add_task(t);
    workflow(&mut spec, &[("a", "slow", &[], false)]);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.yaml");
    std::fs::write(&cfg, to_yaml(&spec)).unwrap();
    let out = dir.path().join("o");
    let mut child = Command::new(env!("CARGO_BIN_EXE_genaibench"))
        .args(["run", s(&cfg), "--out", s(&out)])
        .env("NO_COLOR", "1")
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    std::thread::sleep(Duration::from_millis(800));
    // SAFETY: signalling our own child process.
    unsafe {
        libc::kill(child.id() as libc::pid_t, libc::SIGINT);
    }
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(EXIT_RUNTIME));
    let trace = read_trace(&out).unwrap();
    assert!(trace.interrupted);
}

#[test]
fn binary_usage_error() {
    let status = Command::new(env!("CARGO_BIN_EXE_genaibench"))
        .arg("nope")
        .stderr(std::process::Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
}
