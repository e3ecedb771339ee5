#![allow(dead_code)]

pub mod oracle;
pub mod workloads;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use genaibench::config::{
    AppKind, BenchmarkSpec, Device, Mode, Policy, ProfileKernel, Secs, Slo, TaskDefinition, WorkflowNodeSpec,
    WorkloadProfile,
};
use proptest::prelude::*;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

pub fn synthetic(name: &str, requests: u32, kernels: &[(f64, f64)]) -> TaskDefinition {
    let mut t = TaskDefinition::new(name, AppKind::Synthetic, Device::Gpu, requests);
    t.profile = Some(WorkloadProfile {
        sleep: None,
        kernels: Some(
            kernels
                .iter()
                .map(|&(d, pct)| ProfileKernel {
                    duration: Secs(d),
                    sm_percent: pct,
                    occupancy: None,
                })
                .collect(),
        ),
    });
    t
}

pub fn sim_spec(policy: Policy) -> BenchmarkSpec {
    let mut spec = BenchmarkSpec::default();
    spec.options.mode = Mode::Simulated;
    spec.options.policy = policy;
    spec
}

/// A node per entry: (task name, dependencies, background).
pub fn workflow(spec: &mut BenchmarkSpec, nodes: &[(&str, &str, &[&str], bool)]) {
    for &(id, uses, deps, bg) in nodes {
        let mut n = WorkflowNodeSpec::new(id, uses).depends_on(deps.iter().copied());
        if bg {
            n = n.in_background();
        }
        spec.workflow.push(n);
    }
}

/// Random acyclic synthetic workflows: dependencies only point to earlier nodes.
#[derive(Debug, Clone)]
pub struct RandomSpec {
    pub spec: BenchmarkSpec,
    pub units: usize,
}

pub fn arb_spec() -> impl Strategy<Value = RandomSpec> {
    (1usize..9, any::<u64>(), prop::bool::ANY).prop_flat_map(|(n, seed, partition)| {
        let nodes = prop::collection::vec(
            (
                prop::collection::vec(any::<prop::sample::Index>(), 0..3),
                prop::bool::weighted(0.15),
                0usize..4,
                1u32..4,
                prop::collection::vec((1u32..200, 1u32..101), 1..4),
                prop::bool::weighted(0.2),
            ),
            n,
        );
        (Just(seed), Just(partition), nodes)
    })
    .prop_map(|(seed, partition, nodes)| {
        let mut spec = sim_spec(if partition { Policy::StaticPartition } else { Policy::Greedy });
        spec.options.seed = seed;
        spec.options.sim.setup_time = Secs(0.01);
        spec.options.sim.cleanup_time = Secs(0.01);
        let mut servers = std::collections::BTreeSet::new();
        let mut unshared = 0;
        for (i, (deps, bg, server, reqs, kernels, cpu)) in nodes.into_iter().enumerate() {
            let name = format!("t{i}");
            let k: Vec<(f64, f64)> = kernels.iter().map(|&(ms, pct)| (f64::from(ms) / 1000.0, f64::from(pct))).collect();
            let mut task = synthetic(&name, reqs, &k);
            if cpu {
                task.device = Device::Cpu;
            }
            // server index 0 means a private server
            if server > 0 {
                task.server = Some(format!("s{server}"));
                servers.insert(server);
            } else {
                unshared += 1;
            }
            spec.add_task(task);
            let mut d: Vec<String> = if i == 0 {
                Vec::new()
            } else {
                deps.iter().map(|ix| format!("n{}", ix.index(i))).collect()
            };
            d.sort();
            d.dedup();
            let mut node = WorkflowNodeSpec::new(format!("n{i}"), name).depends_on(d);
            if bg {
                node = node.in_background();
            }
            spec.workflow.push(node);
        }
        RandomSpec {
            spec,
            units: unshared + servers.len(),
        }
    })
}

// ------------------------------------------------------------------ mock HTTP

#[derive(Debug, Clone)]
pub struct MockRequest {
    pub method: String,
    pub path: String,
    pub body: Vec<u8>,
}

pub enum MockResponse {
    /// One `data:` event per element, each flushed after `gap`.
    Sse { events: Vec<String>, gap: Duration },
    Json(String),
    Status(u16),
}

type Handler = dyn Fn(&MockRequest) -> MockResponse + Send + Sync;

pub struct MockServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

fn read_request(stream: &mut TcpStream) -> Option<MockRequest> {
    let mut reader = BufReader::new(stream.try_clone().ok()?);
    let mut line = String::new();
    reader.read_line(&mut line).ok()?;
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).ok()? == 0 {
            break;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).ok()?;
    Some(MockRequest { method, path, body })
}

fn respond(stream: &mut TcpStream, resp: MockResponse) -> std::io::Result<()> {
    match resp {
        MockResponse::Sse { events, gap } => {
            stream.write_all(b"HTTP/1.1 200 OK\r\nContent-Type: text/event-stream\r\nConnection: close\r\n\r\n")?;
            stream.flush()?;
            for e in events {
                thread::sleep(gap);
                stream.write_all(format!("data: {e}\n\n").as_bytes())?;
                stream.flush()?;
            }
            Ok(())
        }
        MockResponse::Json(body) => write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        ),
        MockResponse::Status(code) => write!(stream, "HTTP/1.1 {code} Error\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"),
    }
}

impl MockServer {
    /// Serve on an ephemeral local port until the process exits.
    pub fn start(handler: impl Fn(&MockRequest) -> MockResponse + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = Arc::clone(&hits);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let handler = Arc::clone(&handler);
                let counter = Arc::clone(&counter);
                thread::spawn(move || {
                    // readiness probes connect and close without a request
                    if let Some(req) = read_request(&mut stream) {
                        counter.fetch_add(1, Ordering::SeqCst);
                        let _ = respond(&mut stream, handler(&req));
                    }
                });
            }
        });
        Self { url, hits }
    }
}

pub fn chat_event(text: &str) -> String {
    serde_json::json!({"choices": [{"delta": {"content": text}}]}).to_string()
}

/// OpenAI-style chat server streaming `n` tokens `gap` apart.
pub fn chat_server(n: usize, gap: Duration) -> MockServer {
    MockServer::start(move |req| {
        if req.path.starts_with("/v1/chat/completions") {
            let mut events: Vec<String> = (0..n).map(|i| chat_event(&format!("t{i}"))).collect();
            events.push("[DONE]".into());
            MockResponse::Sse { events, gap }
        } else {
            MockResponse::Status(404)
        }
    })
}

pub fn chatbot_task(name: &str, endpoint: &str, requests: u32) -> TaskDefinition {
    let mut t = TaskDefinition::new(name, AppKind::Chatbot, Device::Gpu, requests);
    t.endpoint = Some(endpoint.to_string());
    t.slo = Slo::LatencyPair { ttft: 1.0, tpot: 0.25 };
    t
}
