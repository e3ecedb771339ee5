//! Backend that runs every node on its own thread against real servers.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Backend, BackendEvent, Outcome};
use crate::adapters::{AdapterRegistry, ExecContext, Placement, RequestRecord, ServerHandle};
use crate::clock::RunClock;
use crate::config::{BenchmarkSpec, TaskDefinition};
use crate::dag::{placement_unit, Dag, NodeKind};
use crate::orchestrator::{Binding, PolicyContext};

const POLL: Duration = Duration::from_millis(50);

struct NodeInfo {
    kind: NodeKind,
    unit: String,
    node_id: String,
    tasks: Vec<TaskDefinition>,
}

pub(crate) struct LiveBackend {
    clock: RunClock,
    seed: u64,
    nodes: Vec<NodeInfo>,
    placements: BTreeMap<String, Placement>,
    registry: AdapterRegistry,
    handles: Arc<Mutex<HashMap<String, ServerHandle>>>,
    cancel: HashMap<usize, Arc<AtomicBool>>,
    tx: Sender<BackendEvent>,
    rx: Receiver<BackendEvent>,
    running: usize,
}

impl LiveBackend {
    pub(crate) fn new(
        spec: &BenchmarkSpec,
        dag: &Dag,
        ctx: &PolicyContext,
        bindings: BTreeMap<String, Binding>,
        registry: AdapterRegistry,
        clock: RunClock,
    ) -> Self {
        let mut placements = BTreeMap::new();
        let nodes = dag
            .nodes()
            .iter()
            .map(|n| {
                let tasks: Vec<TaskDefinition> = n
                    .instances
                    .iter()
                    .filter_map(|i| spec.node(i).and_then(|w| spec.task_for(w)).cloned())
                    .collect();
                let unit = match n.kind {
                    NodeKind::Exec => placement_unit(spec, &n.app_instance),
                    _ => n.app_instance.clone(),
                };
                if let Some(t) = tasks.first() {
                    placements.entry(unit.clone()).or_insert_with(|| {
                        let mut p = Placement::new(t.device, ctx.share_of(&unit).unwrap_or(100));
                        p.kv_cache_on_cpu = t.kv_cache_on_cpu.unwrap_or(false);
                        if let Some(Binding::Env(env)) = bindings.get(&unit) {
                            p.env = env.clone();
                        }
                        p
                    });
                }
                NodeInfo {
                    kind: n.kind,
                    unit,
                    node_id: n.app_instance.clone(),
                    tasks,
                }
            })
            .collect();
        let (tx, rx) = mpsc::channel();
        Self {
            clock,
            seed: spec.options.seed,
            nodes,
            placements,
            registry,
            handles: Arc::new(Mutex::new(HashMap::new())),
            cancel: HashMap::new(),
            tx,
            rx,
            running: 0,
        }
    }

    /// Let threads of cancelled nodes finish on their own.
    pub(crate) fn detach(self) {
        drop(self);
    }
}

fn all_failed(records: &[RequestRecord]) -> bool {
    !records.is_empty() && records.iter().all(|r| !r.ok)
}

impl Backend for LiveBackend {
    fn now(&self) -> u64 {
        self.clock.now_nanos()
    }

    fn start(&mut self, idx: usize) -> Result<(), String> {
        let info = &self.nodes[idx];
        let task = info.tasks.first().cloned().ok_or("node has no task")?;
        let adapter = self.registry.get(&task).map_err(|e| e.to_string())?;
        let handles = Arc::clone(&self.handles);
        let tx = self.tx.clone();
        let clock = self.clock;
        let unit = info.unit.clone();
        let job: Box<dyn FnOnce() -> Outcome + Send> = match info.kind {
            NodeKind::Setup => {
                let tasks = info.tasks.clone();
                let placement = self.placements.get(&unit).cloned().ok_or("no placement for app")?;
                Box::new(move || match adapter.setup(&tasks, &placement) {
                    Ok(h) => {
                        handles.lock().expect("handle map").insert(unit, h);
                        Outcome::Finished(Vec::new())
                    }
                    Err(e) => Outcome::Failed {
                        reason: e.to_string(),
                        records: Vec::new(),
                    },
                })
            }
            NodeKind::Exec => {
                let handle = handles.lock().expect("handle map").get(&unit).cloned().ok_or("server not set up")?;
                let ctx = ExecContext::new(task, info.node_id.clone(), clock, self.seed);
                self.cancel.insert(idx, Arc::clone(&ctx.cancel));
                Box::new(move || match adapter.execute(&handle, &ctx) {
                    Ok(records) if all_failed(&records) => Outcome::Failed {
                        reason: "every request failed".into(),
                        records,
                    },
                    Ok(records) => Outcome::Finished(records),
                    Err(e) => Outcome::Failed {
                        reason: e.to_string(),
                        records: Vec::new(),
                    },
                })
            }
            NodeKind::Cleanup => {
                let handle = handles.lock().expect("handle map").get(&unit).cloned();
                let sharers = info.tasks.len().max(1);
                Box::new(move || {
                    let Some(handle) = handle else {
                        return Outcome::Finished(Vec::new());
                    };
                    // one release per workflow node sharing the server
                    for _ in 0..sharers {
                        if let Err(e) = adapter.cleanup(&handle) {
                            return Outcome::Failed {
                                reason: e.to_string(),
                                records: Vec::new(),
                            };
                        }
                    }
                    Outcome::Finished(Vec::new())
                })
            }
        };
        self.running += 1;
        std::thread::Builder::new()
            .name(format!("node-{idx}"))
            .spawn(move || {
                let _ = tx.send(BackendEvent::Started {
                    idx,
                    t: clock.now_nanos(),
                });
                let outcome = job();
                let _ = tx.send(BackendEvent::Done {
                    idx,
                    t: clock.now_nanos(),
                    outcome,
                });
            })
            .map_err(|e| {
                self.running -= 1;
                format!("cannot spawn node thread: {e}")
            })?;
        Ok(())
    }

    fn cancel(&mut self, idx: usize) -> Vec<RequestRecord> {
        if let Some(flag) = self.cancel.get(&idx) {
            flag.store(true, Ordering::Relaxed);
        }
        Vec::new()
    }

    fn next(&mut self, deadline: Option<u64>) -> Option<BackendEvent> {
        if self.running == 0 {
            return self.rx.try_recv().ok();
        }
        let mut wait = POLL;
        if let Some(d) = deadline {
            let now = self.now();
            wait = wait.min(Duration::from_nanos(d.saturating_sub(now)));
        }
        match self.rx.recv_timeout(wait) {
            Ok(e) => {
                if matches!(e, BackendEvent::Done { .. }) {
                    self.running -= 1;
                }
                Some(e)
            }
            Err(RecvTimeoutError::Timeout) => Some(BackendEvent::Tick),
            Err(RecvTimeoutError::Disconnected) => None,
        }
    }
}
