//! The three-function app contract (setup, execute, cleanup) and the
//! built-in adapters.
//!
//! Live adapters talk to local HTTP servers:
//!
//! | app | endpoint |
//! |---|---|
//! | chatbot | `POST /v1/chat/completions` with `stream: true`, server-sent events |
//! | deep_research | `POST /v1/chat/completions`, not streamed |
//! | imagegen | `POST /sdapi/v1/txt2img`, progress from `GET /sdapi/v1/progress` |
//! | live_captions | `POST /transcribe` with one 16-bit PCM WAV segment per request |
//!
//! A server is either already running at the task's `endpoint` or launched
//! from its `launch` command during setup.

mod captions;
mod chatbot;
mod dataset;
mod imagegen;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::RunClock;
use crate::config::{AppKind, Device, TaskDefinition};
use crate::orchestrator::EnvSpec;

pub use captions::{livecaptions_execute, segment_wav, LiveCaptionsAdapter, DEFAULT_SEGMENT_SECONDS};
pub use chatbot::{chatbot_execute, deep_research_execute, tokens_from_sse, ChatbotAdapter, DeepResearchAdapter};
pub use dataset::{builtin_prompts, load_prompts, request_rng, sample_prompts};
pub use imagegen::{imagegen_execute, steps_from_progress, uniform_steps, ImageGenAdapter, DEFAULT_STEPS};
pub use synthetic::{profile_seconds, synthetic_execute, SyntheticAdapter};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("no adapter registered for task `{0}`")]
    AdapterNotFound(String),
    #[error("failed to launch server: {0}")]
    Launch(String),
    #[error("connection error: {0}")]
    Connection(String),
    #[error("stream aborted: {0}")]
    StreamAborted(String),
    #[error("sharers disagree on placement: {0}")]
    ConfigConflict(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("server handle already released")]
    Released,
}

/// Variant-specific timing marks of a request.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marks {
    #[default]
    None,
    /// Arrival time of every streamed token on the run axis.
    Tokens { token_times: Vec<f64> },
    /// Duration of each denoising step; `fallback` when split uniformly.
    Steps { step_times: Vec<f64>, fallback: bool },
    Segment { segment_index: u32, segment_latency: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub task_name: String,
    pub node_id: String,
    pub request_id: u32,
    pub t_submit: f64,
    pub t_first_output: Option<f64>,
    pub t_complete: f64,
    pub marks: Marks,
    pub ok: bool,
    /// Set on records left behind by a failed, timed-out or cancelled node.
    #[serde(default)]
    pub incomplete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl RequestRecord {
    pub fn new(task_name: &str, node_id: &str, request_id: u32, t_submit: f64) -> Self {
        Self {
            task_name: task_name.to_string(),
            node_id: node_id.to_string(),
            request_id,
            t_submit,
            t_first_output: None,
            t_complete: t_submit,
            marks: Marks::None,
            ok: true,
            incomplete: false,
            detail: None,
        }
    }

    pub fn failed(mut self, t: f64, detail: impl Into<String>) -> Self {
        self.ok = false;
        self.t_complete = t.max(self.t_submit);
        self.detail = Some(detail.into());
        self
    }

    /// `t_submit ≤ t_first_output ≤ t_complete` (first output optional).
    pub fn is_ordered(&self) -> bool {
        match self.t_first_output {
            Some(f) => self.t_submit <= f && f <= self.t_complete,
            None => self.t_submit <= self.t_complete,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub device: Device,
    /// Percent of the GPU granted to the app, in (0, 100].
    pub partition_share: u32,
    pub kv_cache_on_cpu: bool,
    #[serde(default)]
    pub env: EnvSpec,
}

impl Placement {
    pub fn new(device: Device, partition_share: u32) -> Self {
        Self {
            device,
            partition_share,
            kv_cache_on_cpu: false,
            env: EnvSpec::default(),
        }
    }
}

struct ServerInner {
    endpoint: Option<String>,
    model: Option<String>,
    sharers: AtomicUsize,
    process: Mutex<Option<Child>>,
    teardowns: AtomicUsize,
    hook: Mutex<Option<Box<dyn FnMut() + Send>>>,
}

/// Reference-counted handle to a (possibly shared) model server.
///
/// Each sharer calls [`ServerHandle::release`] once; the server is torn
/// down when the last sharer releases it.
#[derive(Clone)]
pub struct ServerHandle(Arc<ServerInner>);

impl fmt::Debug for ServerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerHandle")
            .field("endpoint", &self.0.endpoint)
            .field("model", &self.0.model)
            .field("sharers", &self.sharers())
            .finish()
    }
}

impl ServerHandle {
    pub fn new(endpoint: Option<String>, model: Option<String>, sharers: usize) -> Self {
        Self(Arc::new(ServerInner {
            endpoint,
            model,
            sharers: AtomicUsize::new(sharers.max(1)),
            process: Mutex::new(None),
            teardowns: AtomicUsize::new(0),
            hook: Mutex::new(None),
        }))
    }

    fn with_process(self, child: Child) -> Self {
        *self.0.process.lock().unwrap_or_else(|e| e.into_inner()) = Some(child);
        self
    }

    /// Run `hook` when the server is torn down.
    pub fn on_teardown(self, hook: impl FnMut() + Send + 'static) -> Self {
        *self.0.hook.lock().unwrap_or_else(|e| e.into_inner()) = Some(Box::new(hook));
        self
    }

    pub fn endpoint(&self) -> Option<&str> {
        self.0.endpoint.as_deref()
    }

    pub fn model(&self) -> Option<&str> {
        self.0.model.as_deref()
    }

    pub fn sharers(&self) -> usize {
        self.0.sharers.load(Ordering::SeqCst)
    }

    pub fn teardown_count(&self) -> usize {
        self.0.teardowns.load(Ordering::SeqCst)
    }

    pub fn is_released(&self) -> bool {
        self.sharers() == 0
    }

    /// Drop one sharer; returns true when this call tore the server down.
    pub fn release(&self) -> Result<bool, AdapterError> {
        let prev = self
            .0
            .sharers
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .map_err(|_| AdapterError::Released)?;
        if prev != 1 {
            return Ok(false);
        }
        if let Some(mut child) = self.0.process.lock().unwrap_or_else(|e| e.into_inner()).take() {
            let _ = child.kill();
            let _ = child.wait();
        }
        if let Some(hook) = self.0.hook.lock().unwrap_or_else(|e| e.into_inner()).as_mut() {
            hook();
        }
        self.0.teardowns.fetch_add(1, Ordering::SeqCst);
        Ok(true)
    }
}

/// Everything an exec node needs to issue its requests.
#[derive(Debug, Clone)]
pub struct ExecContext {
    pub task: TaskDefinition,
    pub node_id: String,
    pub clock: RunClock,
    pub seed: u64,
    pub cancel: Arc<AtomicBool>,
}

impl ExecContext {
    pub fn new(task: TaskDefinition, node_id: impl Into<String>, clock: RunClock, seed: u64) -> Self {
        Self {
            task,
            node_id: node_id.into(),
            clock,
            seed,
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }

    pub fn record(&self, request_id: u32, t_submit: f64) -> RequestRecord {
        RequestRecord::new(&self.task.name, &self.node_id, request_id, t_submit)
    }

    fn agent(&self) -> ureq::Agent {
        http_agent(self.task.timeout.map(Duration::from_secs_f64))
    }
}

pub(crate) fn http_agent(timeout: Option<Duration>) -> ureq::Agent {
    let config = ureq::Agent::config_builder().timeout_global(timeout).build();
    ureq::Agent::new_with_config(config)
}

pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}{}", endpoint.trim_end_matches('/'), path)
}

pub trait Adapter: Send + Sync {
    /// Bring up the server for one task, or for several tasks sharing it.
    fn setup(&self, tasks: &[TaskDefinition], placement: &Placement) -> Result<ServerHandle, AdapterError> {
        shared_setup(tasks, placement)
    }

    /// Issue every request of one exec node.
    fn execute(&self, handle: &ServerHandle, ctx: &ExecContext) -> Result<Vec<RequestRecord>, AdapterError>;

    /// Release one sharer of the server.
    fn cleanup(&self, handle: &ServerHandle) -> Result<(), AdapterError> {
        handle.release().map(|_| ())
    }
}

pub fn default_endpoint(kind: AppKind) -> Option<&'static str> {
    match kind {
        AppKind::Chatbot | AppKind::DeepResearch => Some("http://127.0.0.1:8080"),
        AppKind::Imagegen => Some("http://127.0.0.1:7860"),
        AppKind::LiveCaptions => Some("http://127.0.0.1:9000"),
        AppKind::Synthetic => None,
    }
}

pub fn endpoint_of(task: &TaskDefinition) -> Option<String> {
    task.endpoint.clone().or_else(|| default_endpoint(task.app_kind).map(str::to_string))
}

/// One server for every task in `tasks`, counted once per task.
pub fn shared_setup(tasks: &[TaskDefinition], placement: &Placement) -> Result<ServerHandle, AdapterError> {
    let first = tasks
        .first()
        .ok_or_else(|| AdapterError::ConfigConflict("no tasks to set up".into()))?;
    let mut kv: Option<(bool, &str)> = None;
    for t in tasks {
        if t.model != first.model {
            return Err(AdapterError::ConfigConflict(format!(
                "`{}` and `{}` name different models",
                first.name, t.name
            )));
        }
        if let Some(want) = t.kv_cache_on_cpu {
            match kv {
                Some((other, who)) if other != want => {
                    return Err(AdapterError::ConfigConflict(format!(
                        "`{who}` and `{}` disagree on KV cache placement",
                        t.name
                    )));
                }
                _ => kv = Some((want, &t.name)),
            }
        }
    }
    let kv_on_cpu = kv.map(|(v, _)| v).unwrap_or(placement.kv_cache_on_cpu);
    let endpoint = tasks.iter().find_map(endpoint_of);
    let handle = ServerHandle::new(endpoint.clone(), first.model.clone(), tasks.len());
    if first.app_kind == AppKind::Synthetic {
        return Ok(handle);
    }
    match tasks.iter().find_map(|t| t.launch.as_ref()) {
        Some(launch) => {
            let args = render_args(&launch.args, first.model.as_deref(), placement.device, kv_on_cpu);
            let mut child = Command::new(&launch.command)
                .args(&args)
                .envs(&placement.env.vars)
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(Stdio::null())
                .spawn()
                .map_err(|e| AdapterError::Launch(format!("{}: {e}", launch.command)))?;
            let wait = launch.ready_timeout.map(|s| s.get()).unwrap_or(120.0);
            if let Some(ep) = &endpoint {
                if let Err(e) = wait_ready(ep, Duration::from_secs_f64(wait), Some(&mut child)) {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(e);
                }
            }
            Ok(handle.with_process(child))
        }
        None => {
            if let Some(ep) = &endpoint {
                wait_ready(ep, Duration::from_millis(500), None)?;
            }
            Ok(handle)
        }
    }
}

/// Fill `{model}`, `{device}` and `{kv_offload_flag}`; empty arguments are dropped.
pub fn render_args(args: &[String], model: Option<&str>, device: Device, kv_on_cpu: bool) -> Vec<String> {
    let flag = if kv_on_cpu { "--no-kv-offload" } else { "" };
    args.iter()
        .map(|a| {
            a.replace("{model}", model.unwrap_or(""))
                .replace("{device}", device.as_str())
                .replace("{kv_offload_flag}", flag)
        })
        .filter(|a| !a.is_empty())
        .collect()
}

/// Poll until the endpoint accepts TCP connections.
pub fn wait_ready(endpoint: &str, limit: Duration, mut child: Option<&mut Child>) -> Result<(), AdapterError> {
    let url = url::Url::parse(endpoint).map_err(|e| AdapterError::Connection(format!("{endpoint}: {e}")))?;
    let host = url.host_str().unwrap_or("127.0.0.1").to_string();
    let port = url.port_or_known_default().unwrap_or(80);
    let addrs: Vec<_> = (host.as_str(), port)
        .to_socket_addrs()
        .map_err(|e| AdapterError::Connection(format!("{endpoint}: {e}")))?
        .collect();
    let deadline = Instant::now() + limit;
    loop {
        if addrs
            .iter()
            .any(|a| TcpStream::connect_timeout(a, Duration::from_millis(200)).is_ok())
        {
            return Ok(());
        }
        if let Some(c) = child.as_deref_mut() {
            if let Ok(Some(status)) = c.try_wait() {
                return Err(AdapterError::Launch(format!("server exited with {status} before becoming ready")));
            }
        }
        if Instant::now() >= deadline {
            return Err(AdapterError::Connection(format!("{endpoint} is not reachable")));
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

/// Adapters by task name, falling back to app kind.
#[derive(Clone, Default)]
pub struct AdapterRegistry {
    by_task: HashMap<String, Arc<dyn Adapter>>,
    by_kind: HashMap<AppKind, Arc<dyn Adapter>>,
}

impl AdapterRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register_kind(AppKind::Chatbot, Arc::new(ChatbotAdapter));
        r.register_kind(AppKind::DeepResearch, Arc::new(DeepResearchAdapter));
        r.register_kind(AppKind::Imagegen, Arc::new(ImageGenAdapter));
        r.register_kind(AppKind::LiveCaptions, Arc::new(LiveCaptionsAdapter));
        r.register_kind(AppKind::Synthetic, Arc::new(SyntheticAdapter));
        r
    }

    pub fn register_kind(&mut self, kind: AppKind, adapter: Arc<dyn Adapter>) {
        self.by_kind.insert(kind, adapter);
    }

    pub fn register_task(&mut self, task: impl Into<String>, adapter: Arc<dyn Adapter>) {
        self.by_task.insert(task.into(), adapter);
    }

    pub fn get(&self, task: &TaskDefinition) -> Result<Arc<dyn Adapter>, AdapterError> {
        self.by_task
            .get(&task.name)
            .or_else(|| self.by_kind.get(&task.app_kind))
            .cloned()
            .ok_or_else(|| AdapterError::AdapterNotFound(task.name.clone()))
    }
}
