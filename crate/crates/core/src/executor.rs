//! DAG executor.
//!
//! Each run owns a scheduler thread. Up to `max_parallel` ready nodes are
//! invoked at once; a node is ready once every predecessor has succeeded.
//! All record mutations go through the run's mutex, so snapshots taken by
//! `run_status` always satisfy the record invariants. Every output is
//! published to the store before its node is marked succeeded.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{Artifact, Digest};
use crate::backends::{Backend, BackendError, Params, PortMap};
use crate::flow::{split_port_path, validate_pipeline, InputSource, PipelineSpec, Violation};
use crate::registry::{Registry, ServiceDescriptor};
use crate::store::{write_atomic, ArtifactRef, ArtifactStore, StoreError};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("pipeline failed validation ({} violations)", .0.len())]
    ValidationFailed(Vec<Violation>),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` already finished with status {status:?}")]
    AlreadyTerminal { run_id: String, status: RunStatus },
    #[error("no artifact for {node}.{port} in run `{run_id}`")]
    UnknownArtifact { run_id: String, node: String, port: String },
    #[error("invalid options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Succeeded,
    Failed,
    Cancelled,
}

impl RunStatus {
    pub fn is_terminal(self) -> bool {
        self != RunStatus::Running
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeError {
    pub code: String,
    pub message: String,
}

impl From<&BackendError> for NodeError {
    fn from(e: &BackendError) -> Self {
        NodeError {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum NodeState {
    Pending,
    Running {
        started_at: u64,
    },
    Succeeded {
        outputs: BTreeMap<String, ArtifactRef>,
        duration_ms: u64,
    },
    Failed {
        error: NodeError,
        duration_ms: u64,
    },
    Skipped {
        reason: String,
    },
}

impl NodeState {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, NodeState::Pending | NodeState::Running { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            NodeState::Pending => "pending",
            NodeState::Running { .. } => "running",
            NodeState::Succeeded { .. } => "succeeded",
            NodeState::Failed { .. } => "failed",
            NodeState::Skipped { .. } => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub spec_hash: Digest,
    pub node_states: BTreeMap<String, NodeState>,
    /// Wall-clock milliseconds since the Unix epoch.
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: RunStatus,
}

impl RunRecord {
    /// Outputs of a succeeded node.
    pub fn outputs(&self, node: &str) -> Option<&BTreeMap<String, ArtifactRef>> {
        match self.node_states.get(node) {
            Some(NodeState::Succeeded { outputs, .. }) => Some(outputs),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    RunStarted {
        run_id: String,
        spec_hash: Digest,
    },
    NodeStarted {
        node: String,
    },
    NodeFinished {
        node: String,
        status: String,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        outputs: BTreeMap<String, ArtifactRef>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<NodeError>,
        duration_ms: u64,
    },
    NodeSkipped {
        node: String,
        reason: String,
    },
    RunFinished {
        status: RunStatus,
    },
}

/// An event with its position in the run's causal sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub max_parallel: usize,
    /// Stop launching new nodes after the first failure.
    pub fail_fast: bool,
    /// Reuse outputs keyed by (service, version, input hashes, params).
    pub memoize: bool,
    /// Per-node generation parameters, passed to backends untouched.
    pub params: BTreeMap<String, Params>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            max_parallel: 1,
            fail_fast: false,
            memoize: false,
            params: BTreeMap::new(),
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct RunState {
    record: RunRecord,
    events: Vec<RunEvent>,
}

struct RunHandle {
    state: Mutex<RunState>,
    changed: Condvar,
    cancel: AtomicBool,
    dir: PathBuf,
}

impl RunHandle {
    fn lock(&self) -> std::sync::MutexGuard<'_, RunState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn persist(&self, state: &RunState) {
        // Best effort: the in-memory record stays authoritative.
        let json = serde_json::to_vec_pretty(&state.record).expect("record serializes");
        let _ = write_atomic(&self.dir.join("record.json"), &json);
    }

    /// Applies `f`, appends the events it returns, persists and wakes waiters.
    fn update(&self, f: impl FnOnce(&mut RunRecord) -> Vec<EventKind>) {
        let mut state = self.lock();
        for kind in f(&mut state.record) {
            let seq = state.events.len() as u64;
            state.events.push(RunEvent { seq, kind });
        }
        self.persist(&state);
        drop(state);
        self.changed.notify_all();
    }
}

/// Runs pipelines against a backend, persisting into a store.
pub struct Executor {
    store: ArtifactStore,
    runs_root: PathBuf,
    backend: Arc<dyn Backend>,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    threads: Mutex<Vec<std::thread::JoinHandle<()>>>,
    exclusive: Arc<Mutex<BTreeMap<String, Arc<Mutex<()>>>>>,
}

/// Everything the scheduler thread needs, captured at start.
struct Plan {
    spec: PipelineSpec,
    services: BTreeMap<String, ServiceDescriptor>,
    sources: BTreeMap<(String, String), Artifact>,
    options: ExecOptions,
}

impl Executor {
    pub fn new(store: ArtifactStore, runs_root: impl Into<PathBuf>, backend: Arc<dyn Backend>) -> Self {
        Executor {
            store,
            runs_root: runs_root.into(),
            backend,
            runs: Mutex::new(BTreeMap::new()),
            threads: Mutex::new(Vec::new()),
            exclusive: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn runs_root(&self) -> &Path {
        &self.runs_root
    }

    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>, ExecError> {
        self.runs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(run_id)
            .cloned()
            .ok_or_else(|| ExecError::UnknownRun(run_id.to_string()))
    }

    /// Validates, loads the external inputs and launches the run in the
    /// background. Returns the run id.
    pub fn start_run(
        &self,
        spec: &PipelineSpec,
        registry: &Registry,
        options: ExecOptions,
    ) -> Result<String, ExecError> {
        if options.max_parallel == 0 {
            return Err(ExecError::InvalidOptions("max_parallel must be at least 1".into()));
        }
        validate_pipeline(spec, registry).map_err(ExecError::ValidationFailed)?;
        let services: BTreeMap<String, ServiceDescriptor> = spec
            .nodes
            .iter()
            .map(|n| (n.id.clone(), registry.get(&n.service).expect("validated").clone()))
            .collect();
        let mut sources = BTreeMap::new();
        for (key, r) in spec.source_refs() {
            let (node, port) = split_port_path(key).expect("validated");
            let a = self
                .store
                .load(r, r.artifact_type)
                .map_err(|e| ExecError::StoreUnavailable(e.to_string()))?;
            sources.insert((node.to_string(), port.to_string()), a);
        }

        let run_id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.runs_root.join(&run_id);
        std::fs::create_dir_all(dir.join("nodes"))
            .map_err(|e| ExecError::StoreUnavailable(format!("{}: {e}", dir.display())))?;
        let spec_hash = spec.spec_hash();
        let record = RunRecord {
            run_id: run_id.clone(),
            spec_hash,
            node_states: spec.nodes.iter().map(|n| (n.id.clone(), NodeState::Pending)).collect(),
            started_at: now_ms(),
            finished_at: None,
            status: RunStatus::Running,
        };
        let handle = Arc::new(RunHandle {
            state: Mutex::new(RunState { record, events: Vec::new() }),
            changed: Condvar::new(),
            cancel: AtomicBool::new(false),
            dir,
        });
        handle.update(|_| vec![EventKind::RunStarted { run_id: run_id.clone(), spec_hash }]);
        self.runs
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(run_id.clone(), handle.clone());

        let plan = Plan { spec: spec.clone(), services, sources, options };
        let ctx = RunContext {
            store: self.store.clone(),
            backend: self.backend.clone(),
            exclusive: self.exclusive.clone(),
            handle,
        };
        let thread = std::thread::Builder::new()
            .name(format!("run-{}", &run_id[..8]))
            .spawn(move || ctx.schedule(plan))
            .map_err(|e| ExecError::StoreUnavailable(format!("cannot spawn run thread: {e}")))?;
        let mut threads = self.threads.lock().unwrap_or_else(|e| e.into_inner());
        threads.retain(|t| !t.is_finished());
        threads.push(thread);
        Ok(run_id)
    }

    /// Runs to completion and returns the terminal record.
    pub fn execute_run(
        &self,
        spec: &PipelineSpec,
        registry: &Registry,
        options: ExecOptions,
    ) -> Result<RunRecord, ExecError> {
        let run_id = self.start_run(spec, registry, options)?;
        self.wait(&run_id)
    }

    /// Blocks until the run is terminal.
    pub fn wait(&self, run_id: &str) -> Result<RunRecord, ExecError> {
        let handle = self.handle(run_id)?;
        let mut state = handle.lock();
        while !state.record.status.is_terminal() {
            state = handle.changed.wait(state).unwrap_or_else(|e| e.into_inner());
        }
        Ok(state.record.clone())
    }

    pub fn run_status(&self, run_id: &str) -> Result<RunRecord, ExecError> {
        Ok(self.handle(run_id)?.lock().record.clone())
    }

    pub fn run_ids(&self) -> Vec<String> {
        self.runs.lock().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    /// Stops new nodes from starting and waits for in-flight ones.
    ///
    /// If every node had already succeeded by then, the run keeps status
    /// `Succeeded`; otherwise it ends `Cancelled`.
    pub fn cancel_run(&self, run_id: &str) -> Result<RunRecord, ExecError> {
        let handle = self.handle(run_id)?;
        {
            let state = handle.lock();
            if state.record.status.is_terminal() || handle.cancel.load(Ordering::SeqCst) {
                return Err(ExecError::AlreadyTerminal {
                    run_id: run_id.to_string(),
                    status: state.record.status,
                });
            }
            handle.cancel.store(true, Ordering::SeqCst);
        }
        handle.changed.notify_all();
        self.wait(run_id)
    }

    /// Events from index `from` onwards.
    pub fn events(&self, run_id: &str, from: usize) -> Result<Vec<RunEvent>, ExecError> {
        let handle = self.handle(run_id)?;
        let state = handle.lock();
        Ok(state.events.get(from..).unwrap_or_default().to_vec())
    }

    /// Like [`events`](Self::events) but waits up to `timeout` for at least
    /// one new event. The flag reports whether the run is terminal.
    pub fn wait_events(
        &self,
        run_id: &str,
        from: usize,
        timeout: Duration,
    ) -> Result<(Vec<RunEvent>, bool), ExecError> {
        let handle = self.handle(run_id)?;
        let deadline = Instant::now() + timeout;
        let mut state = handle.lock();
        while state.events.len() <= from && !state.record.status.is_terminal() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            state = handle
                .changed
                .wait_timeout(state, left)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
        let events = state.events.get(from..).unwrap_or_default().to_vec();
        Ok((events, state.record.status.is_terminal()))
    }

    /// Reference to an output of a succeeded node.
    pub fn artifact_ref(&self, run_id: &str, node: &str, port: &str) -> Result<ArtifactRef, ExecError> {
        let record = self.run_status(run_id)?;
        record
            .outputs(node)
            .and_then(|o| o.get(port))
            .copied()
            .ok_or_else(|| ExecError::UnknownArtifact {
                run_id: run_id.to_string(),
                node: node.to_string(),
                port: port.to_string(),
            })
    }

    /// Cancels every live run and waits for all scheduler threads.
    pub fn shutdown(&self) {
        for id in self.run_ids() {
            let _ = self.cancel_run(&id);
        }
        let threads = std::mem::take(&mut *self.threads.lock().unwrap_or_else(|e| e.into_inner()));
        for t in threads {
            let _ = t.join();
        }
    }
}

/// Directory of a run's persisted node outputs.
pub fn node_output_path(runs_root: &Path, run_id: &str, node: &str, port: &str, artifact: &Artifact) -> PathBuf {
    runs_root
        .join(run_id)
        .join("nodes")
        .join(node)
        .join(format!("{port}.{}", artifact.artifact_type().extension()))
}

struct RunContext {
    store: ArtifactStore,
    backend: Arc<dyn Backend>,
    exclusive: Arc<Mutex<BTreeMap<String, Arc<Mutex<()>>>>>,
    handle: Arc<RunHandle>,
}

type Completion = (String, Result<PortMap, BackendError>, u64);

impl RunContext {
    fn schedule(self, plan: Plan) {
        let spec = &plan.spec;
        let preds: BTreeMap<&str, BTreeSet<&str>> =
            spec.nodes.iter().map(|n| (n.id.as_str(), spec.predecessors(&n.id))).collect();
        let mut produced: BTreeMap<(String, String), Artifact> = BTreeMap::new();
        let mut failed_any = false;
        let mut running = 0usize;
        let (tx, rx) = mpsc::channel::<Completion>();

        std::thread::scope(|scope| {
            loop {
                let stop = self.handle.cancel.load(Ordering::SeqCst) || (plan.options.fail_fast && failed_any);
                if !stop {
                    let ready: Vec<String> = {
                        let state = self.handle.lock();
                        let st = &state.record.node_states;
                        spec.nodes
                            .iter()
                            .filter(|n| st[&n.id] == NodeState::Pending)
                            .filter(|n| {
                                preds[n.id.as_str()]
                                    .iter()
                                    .all(|p| matches!(st[*p], NodeState::Succeeded { .. }))
                            })
                            .map(|n| n.id.clone())
                            .take(plan.options.max_parallel - running)
                            .collect()
                    };
                    for node in ready {
                        let inputs = self.gather_inputs(&plan, &node, &produced);
                        let started_at = now_ms();
                        self.handle.update(|r| {
                            r.node_states.insert(node.clone(), NodeState::Running { started_at });
                            vec![EventKind::NodeStarted { node: node.clone() }]
                        });
                        running += 1;
                        let tx = tx.clone();
                        let plan = &plan;
                        let this = &self;
                        scope.spawn(move || {
                            let t0 = Instant::now();
                            let result = this.invoke(plan, &node, &inputs);
                            let _ = tx.send((node, result, t0.elapsed().as_millis() as u64));
                        });
                    }
                }
                if running == 0 {
                    break;
                }
                let (node, result, duration_ms) = rx.recv().expect("a node is in flight");
                running -= 1;
                let result = result.and_then(|outputs| self.publish(&node, outputs));
                match result {
                    Ok((outputs, refs)) => {
                        for (port, a) in outputs {
                            produced.insert((node.clone(), port), a);
                        }
                        self.handle.update(|r| {
                            r.node_states.insert(
                                node.clone(),
                                NodeState::Succeeded { outputs: refs.clone(), duration_ms },
                            );
                            vec![EventKind::NodeFinished {
                                node: node.clone(),
                                status: "succeeded".into(),
                                outputs: refs,
                                error: None,
                                duration_ms,
                            }]
                        });
                    }
                    Err(e) => {
                        failed_any = true;
                        let error = NodeError::from(&e);
                        let downstream = descendants(spec, &node);
                        self.handle.update(|r| {
                            r.node_states.insert(
                                node.clone(),
                                NodeState::Failed { error: error.clone(), duration_ms },
                            );
                            let mut events = vec![EventKind::NodeFinished {
                                node: node.clone(),
                                status: "failed".into(),
                                outputs: BTreeMap::new(),
                                error: Some(error),
                                duration_ms,
                            }];
                            for d in spec.nodes.iter().filter(|n| downstream.contains(&n.id)) {
                                if r.node_states[&d.id] == NodeState::Pending {
                                    let reason = format!("upstream node `{node}` failed");
                                    r.node_states.insert(d.id.clone(), NodeState::Skipped { reason: reason.clone() });
                                    events.push(EventKind::NodeSkipped { node: d.id.clone(), reason });
                                }
                            }
                            events
                        });
                    }
                }
            }
        });

        let cancelled = self.handle.cancel.load(Ordering::SeqCst);
        self.handle.update(|r| {
            let reason = if cancelled { "run cancelled" } else { "run stopped after a failure" };
            let mut events = Vec::new();
            for n in &spec.nodes {
                if r.node_states[&n.id] == NodeState::Pending {
                    r.node_states.insert(n.id.clone(), NodeState::Skipped { reason: reason.into() });
                    events.push(EventKind::NodeSkipped { node: n.id.clone(), reason: reason.into() });
                }
            }
            let all_ok = r.node_states.values().all(|s| matches!(s, NodeState::Succeeded { .. }));
            r.status = if all_ok {
                RunStatus::Succeeded
            } else if cancelled {
                RunStatus::Cancelled
            } else {
                RunStatus::Failed
            };
            r.finished_at = Some(now_ms());
            events.push(EventKind::RunFinished { status: r.status });
            events
        });
    }

    fn gather_inputs(
        &self,
        plan: &Plan,
        node: &str,
        produced: &BTreeMap<(String, String), Artifact>,
    ) -> PortMap {
        let mut inputs = PortMap::new();
        for e in plan.spec.edges.iter().filter(|e| e.to == node) {
            if let Some(a) = produced.get(&(e.from.clone(), e.from_port.clone())) {
                inputs.insert(e.to_port.clone(), a.clone());
            }
        }
        for ((n, port), a) in &plan.sources {
            if n == node {
                inputs.insert(port.clone(), a.clone());
            }
        }
        inputs
    }

    fn invoke(&self, plan: &Plan, node: &str, inputs: &PortMap) -> Result<PortMap, BackendError> {
        let descriptor = &plan.services[node];
        let params = plan.options.params.get(node).cloned().unwrap_or_default();
        let memo_key = plan.options.memoize.then(|| memo_key(descriptor, inputs, &params));
        if let Some(hit) = memo_key.as_ref().and_then(|k| self.memo_lookup(k, descriptor)) {
            return Ok(hit);
        }

        let lock = descriptor.backend.is_exclusive().then(|| {
            let key = serde_json::to_string(&descriptor.backend).expect("binding serializes");
            self.exclusive
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .entry(key)
                .or_default()
                .clone()
        });
        let _guard = lock.as_ref().map(|l| l.lock().unwrap_or_else(|e| e.into_inner()));

        let backend = &self.backend;
        let outputs = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            backend.invoke(descriptor, inputs, &params)
        }))
        .unwrap_or_else(|_| {
            Err(BackendError::Fault {
                code: "BACKEND_PANIC".into(),
                message: format!("backend panicked while running `{node}`"),
            })
        })?;
        if let Some(k) = &memo_key {
            self.memo_record(k, &outputs);
        }
        Ok(outputs)
    }

    /// Stores outputs in the content store and the run directory.
    #[allow(clippy::type_complexity)]
    fn publish(
        &self,
        node: &str,
        outputs: PortMap,
    ) -> Result<(Vec<(String, Artifact)>, BTreeMap<String, ArtifactRef>), BackendError> {
        let store_fault = |e: StoreError| BackendError::Fault {
            code: "STORE_UNAVAILABLE".into(),
            message: e.to_string(),
        };
        let mut refs = BTreeMap::new();
        let mut tagged = Vec::new();
        for (port, a) in outputs {
            let a = a.with_producer(node);
            let r = self.store.store(&a).map_err(store_fault)?;
            let run_dir = self.handle.dir.join("nodes").join(node);
            let path = run_dir.join(format!("{port}.{}", a.artifact_type().extension()));
            write_atomic(&path, &a.encode_payload()).map_err(store_fault)?;
            refs.insert(port.clone(), r);
            tagged.push((port, a));
        }
        Ok((tagged, refs))
    }

    fn memo_path(&self, key: &Digest) -> PathBuf {
        self.store.root().join("memo").join(format!("{}.json", key.to_hex()))
    }

    fn memo_lookup(&self, key: &Digest, descriptor: &ServiceDescriptor) -> Option<PortMap> {
        let text = std::fs::read_to_string(self.memo_path(key)).ok()?;
        let refs: BTreeMap<String, ArtifactRef> = serde_json::from_str(&text).ok()?;
        let mut outputs = PortMap::new();
        for p in &descriptor.outputs {
            let r = refs.get(&p.port)?;
            outputs.insert(p.port.clone(), self.store.load(r, p.artifact_type).ok()?);
        }
        Some(outputs)
    }

    fn memo_record(&self, key: &Digest, outputs: &PortMap) {
        let mut refs = BTreeMap::new();
        for (port, a) in outputs {
            match self.store.store(a) {
                Ok(r) => refs.insert(port.clone(), r),
                Err(_) => return,
            };
        }
        let _ = write_atomic(&self.memo_path(key), crate::canonical::to_string(&refs).as_bytes());
    }
}

fn memo_key(descriptor: &ServiceDescriptor, inputs: &PortMap, params: &Params) -> Digest {
    let hashes: BTreeMap<&String, String> =
        inputs.iter().map(|(k, a)| (k, ArtifactRef::of(a).to_string())).collect();
    let doc = serde_json::json!({
        "service": descriptor.service_id,
        "version": descriptor.version,
        "backend": descriptor.backend,
        "inputs": hashes,
        "params": params,
    });
    Digest::of(crate::canonical::to_string(&doc).as_bytes())
}

/// Transitive successors of `node`.
fn descendants(spec: &PipelineSpec, node: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![node.to_string()];
    while let Some(n) = stack.pop() {
        for e in spec.edges.iter().filter(|e| e.from == n) {
            if out.insert(e.to.clone()) {
                stack.push(e.to.clone());
            }
        }
    }
    out
}

/// Replaces file-path inputs with refs by importing the files into `store`.
///
/// Each file is decoded as the type its target port declares. Relative
/// paths resolve against `base`.
pub fn import_inputs(
    spec: &PipelineSpec,
    registry: &Registry,
    store: &ArtifactStore,
    base: &Path,
) -> Result<PipelineSpec, String> {
    let mut out = spec.clone();
    for (key, source) in &spec.inputs {
        let InputSource::Path(p) = source else { continue };
        let (node, port) = split_port_path(key).ok_or_else(|| format!("bad input key `{key}`"))?;
        let t = spec
            .node(node)
            .and_then(|n| registry.get(&n.service))
            .and_then(|d| d.input(port))
            .map(|i| i.artifact_type)
            .ok_or_else(|| format!("input `{key}` names no known port"))?;
        let path = base.join(p);
        let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let a = Artifact::decode(t, &bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        let r = store.store(&a).map_err(|e| e.to_string())?;
        out.inputs.insert(key.clone(), InputSource::Ref(r));
    }
    Ok(out)
}
