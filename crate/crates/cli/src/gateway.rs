//! HTTP API over the engine.

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::Router;
use futures::stream::{self, Stream, StreamExt};
use kolflow_core::backends::remote::{verify_remote_service, WireArtifact};
use kolflow_core::{
    canonical, synthesize_pipeline, validate_pipeline, BackendBinding, Capability, CapabilityQuery, Executor,
    PipelineSpec, Registry, RegistryError, RunRecord, ServiceDescriptor,
};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::error::{ApiError, ErrorCode};
use crate::workspace::{self, RunRequest, Workspace};

type ApiResult<T> = Result<T, ApiError>;

pub struct Config {
    pub bind: String,
    pub workspace: Workspace,
    pub with_mocks: bool,
    pub max_parallel: usize,
}

pub struct AppState {
    workspace: Workspace,
    registry: RwLock<Registry>,
    executor: Executor,
    max_parallel: usize,
    with_mocks: bool,
}

impl AppState {
    pub fn new(workspace: Workspace, with_mocks: bool, max_parallel: usize) -> ApiResult<Self> {
        let mut registry = workspace.load_registry()?;
        if with_mocks {
            workspace::add_mocks(&mut registry);
        }
        Ok(AppState {
            executor: workspace.executor(),
            registry: RwLock::new(registry),
            workspace,
            max_parallel,
            with_mocks,
        })
    }

    fn registry(&self) -> Registry {
        self.registry.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Applies `f` to the live registry and persists the result.
    fn update_registry<T>(&self, f: impl FnOnce(&mut Registry) -> ApiResult<T>) -> ApiResult<T> {
        let mut registry = self.registry.write().unwrap_or_else(|e| e.into_inner());
        let out = f(&mut registry)?;
        self.workspace.save_registry(&registry, self.with_mocks)?;
        Ok(out)
    }

    /// Live runs come from the executor; finished runs of earlier processes from disk.
    fn record(&self, run_id: &str) -> ApiResult<RunRecord> {
        match self.executor.run_status(run_id) {
            Ok(r) => Ok(r),
            Err(_) => self.workspace.read_record(run_id),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/services", get(list_services).post(register_service))
        .route("/services/{id}", delete(unregister_service))
        .route("/pipelines/synthesize", post(synthesize))
        .route("/pipelines/validate", post(validate))
        .route("/artifacts", post(upload_artifact))
        .route("/runs", post(start_run))
        .route("/runs/{id}", get(run_status))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/artifacts/{node}/{port}", get(run_artifact))
        .route("/runs/{id}/cancel", post(cancel_run))
        .fallback(|| async { ApiError::new(ErrorCode::NotFound, "no such endpoint") })
        .with_state(state)
}

pub async fn bind(addr: &str) -> ApiResult<TcpListener> {
    TcpListener::bind(addr)
        .await
        .map_err(|e| ApiError::new(ErrorCode::BindFailure, format!("cannot bind {addr}: {e}")))
}

/// Serves until `shutdown` resolves, then cancels live runs and waits for
/// their records to be finalized.
pub async fn serve(
    listener: TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> ApiResult<()> {
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    tokio::task::spawn_blocking(move || state.executor.shutdown())
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))
}

/// A server running on its own runtime thread; stops on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<ApiResult<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) -> ApiResult<()> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> ApiResult<()> {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        match self.thread.take().map(|t| t.join()) {
            Some(Ok(result)) => result,
            Some(Err(_)) => Err(ApiError::new(ErrorCode::Internal, "server thread panicked")),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

pub fn spawn(config: Config) -> ApiResult<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    let listener = runtime.block_on(bind(&config.bind))?;
    let addr = listener
        .local_addr()
        .map_err(|e| ApiError::new(ErrorCode::BindFailure, e.to_string()))?;
    let state = Arc::new(AppState::new(config.workspace, config.with_mocks, config.max_parallel)?);
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(serve(listener, state, async {
            let _ = rx.await;
        }))
    });
    Ok(ServerHandle { addr, stop: Some(tx), thread: Some(thread) })
}

fn parse<T: DeserializeOwned>(body: &[u8], code: ErrorCode) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(code, format!("malformed body: {e}")))
}

/// JSON with sorted keys, so equal values always produce equal bytes.
fn canonical_response(status: StatusCode, value: &impl serde::Serialize) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], canonical::to_string(value)).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?
}

#[derive(Deserialize)]
struct ServiceFilter {
    capability: Option<String>,
}

async fn list_services(State(st): State<Arc<AppState>>, Query(q): Query<ServiceFilter>) -> ApiResult<Response> {
    let filter = q.capability.map(|c| c.parse::<Capability>()).transpose()?;
    Ok(canonical_response(StatusCode::OK, &st.registry().list_services(filter)))
}

async fn register_service(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let d: ServiceDescriptor = parse(&body, ErrorCode::InvalidDescriptor)?;
    d.validate()?;
    if st.registry().get(&d.service_id).is_some() {
        return Err(RegistryError::DuplicateServiceId(d.service_id).into());
    }
    if matches!(d.backend, BackendBinding::Remote { .. }) {
        let probe = d.clone();
        blocking(move || verify_remote_service(&probe).map_err(ApiError::from)).await?;
    }
    st.update_registry(|r| Ok(r.register_service(d.clone())?))?;
    Ok(canonical_response(StatusCode::CREATED, &d))
}

async fn unregister_service(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let removed = st.update_registry(|r| Ok(r.unregister_service(&id)?))?;
    Ok(canonical_response(StatusCode::OK, &removed))
}

pub fn synthesize_document(spec: &PipelineSpec) -> Value {
    json!({ "spec": spec, "spec_hash": spec.spec_hash().to_hex() })
}

async fn synthesize(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let query: CapabilityQuery = parse(&body, ErrorCode::BadQuery)?;
    let spec = synthesize_pipeline(&query, &st.registry())?;
    Ok(canonical_response(StatusCode::OK, &synthesize_document(&spec)))
}

async fn validate(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?;
    let spec = PipelineSpec::from_json(text).map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?;
    validate_pipeline(&spec, &st.registry()).map_err(|v| ApiError::validation(&v))?;
    Ok(canonical_response(StatusCode::OK, &json!({ "valid": true, "spec_hash": spec.spec_hash().to_hex() })))
}

async fn upload_artifact(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let wire: WireArtifact = parse(&body, ErrorCode::BadInput)?;
    let artifact = wire.decode().map_err(|e| ApiError::new(ErrorCode::BadInput, e))?;
    let r = st.workspace.store.store(&artifact)?;
    Ok(canonical_response(StatusCode::CREATED, &json!({ "ref": r.to_string() })))
}

async fn start_run(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?;
    let request = RunRequest::from_json(text)?;
    let registry = st.registry();
    // Paths would be resolved on the server's filesystem, so they stay unresolved here.
    let spec = request.resolve(&st.workspace.store, &registry, None)?;
    let options = request.options.into_exec(st.max_parallel);
    let run_id = st.executor.start_run(&spec, &registry, options)?;
    Ok(canonical_response(StatusCode::ACCEPTED, &json!({ "run_id": run_id })))
}

async fn run_status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(canonical_response(StatusCode::OK, &st.record(&id)?))
}

#[derive(Deserialize)]
struct EventsFrom {
    #[serde(default)]
    from: usize,
}

fn sse_event(e: &kolflow_core::RunEvent) -> Event {
    let data = serde_json::to_value(e).expect("event serializes");
    let name = data["event"].as_str().unwrap_or("event").to_string();
    Event::default().id(e.seq.to_string()).event(name).data(data.to_string())
}

/// Server-sent events from index `from` until the run is terminal.
async fn run_events(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsFrom>,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    st.executor.events(&id, 0)?;
    let batches = stream::unfold(Some(q.from), move |next| {
        let (st, id) = (st.clone(), id.clone());
        async move {
            let from = next?;
            let (events, terminal) =
                blocking(move || Ok(st.executor.wait_events(&id, from, Duration::from_secs(10))?)).await.ok()?;
            let following = if terminal { None } else { Some(from + events.len()) };
            Some((events.iter().map(sse_event).collect::<Vec<_>>(), following))
        }
    });
    let events = batches.flat_map(stream::iter).map(Ok);
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn run_artifact(
    State(st): State<Arc<AppState>>,
    Path((id, node, port)): Path<(String, String, String)>,
) -> ApiResult<Response> {
    let record = st.record(&id)?;
    let r = record.outputs(&node).and_then(|o| o.get(&port)).copied().ok_or_else(|| {
        ApiError::from(kolflow_core::ExecError::UnknownArtifact { run_id: id, node, port })
    })?;
    let bytes = st.workspace.store.read_payload(&r)?;
    Ok(([(header::CONTENT_TYPE, r.artifact_type.content_type())], bytes).into_response())
}

async fn cancel_run(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    if st.executor.run_status(&id).is_err() {
        // Runs of earlier processes are already terminal.
        let r = st.workspace.read_record(&id)?;
        return Err(kolflow_core::ExecError::AlreadyTerminal { run_id: id, status: r.status }.into());
    }
    let record = blocking(move || Ok(st.executor.cancel_run(&id)?)).await?;
    Ok(canonical_response(StatusCode::OK, &record))
}
