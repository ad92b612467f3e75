//! `kolflow` command line. Every subcommand works on a local store directory;
//! `serve` exposes the same operations over HTTP.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use kolflow_core::backends::stub::{Faults, StubServer};
use kolflow_core::executor::EventKind;
use kolflow_core::flow::role_type;
use kolflow_core::samples::SampleInputs;
use kolflow_core::{
    canonical, synthesize_pipeline, validate_pipeline, Artifact, ArtifactRef, BackendBinding, Capability,
    CapabilityQuery, Catalog, NodeState, RunStatus, ServiceDescriptor,
};
use serde_json::{json, Value};

use crate::error::{ApiError, ErrorCode};
use crate::gateway;
use crate::workspace::{self, RunRequest, Workspace};

#[derive(Debug, Parser)]
#[command(name = "kolflow", version, about = "Compose and run modular generative image pipelines")]
pub struct Cli {
    /// Artifact store directory; runs and the registry snapshot live inside it.
    #[arg(long, env = "KOLFLOW_STORE", default_value = "kolflow-store", global = true)]
    pub store: PathBuf,
    /// Registry snapshot file [default: <store>/registry.json]
    #[arg(long, global = true)]
    pub registry: Option<PathBuf>,
    /// Also register the built-in mock and face-alignment services.
    #[arg(long, global = true)]
    pub with_mocks: bool,
    #[arg(long, value_enum, default_value_t = OutputFormat::Text, global = true)]
    pub output: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP gateway.
    Serve {
        #[arg(long, env = "KOLFLOW_BIND", default_value = "127.0.0.1:8080")]
        bind: String,
        /// Default node parallelism for runs that do not set it.
        #[arg(long, default_value_t = 1)]
        max_parallel: usize,
    },
    /// List registered services.
    ListServices {
        #[arg(long)]
        capability: Option<String>,
    },
    /// Register a service from a descriptor file or, for remote services, from flags.
    Register {
        #[arg(short = 'f', long, conflicts_with_all = ["id", "capability", "url"])]
        file: Option<PathBuf>,
        #[arg(long, requires_all = ["capability", "url"])]
        id: Option<String>,
        #[arg(long)]
        capability: Option<String>,
        /// Base URL of a server speaking the /v1 model protocol.
        #[arg(long)]
        url: Option<String>,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
        /// Never send two requests to this server at once.
        #[arg(long)]
        exclusive: bool,
    },
    /// Remove a service from the registry.
    Unregister { id: String },
    /// Build a pipeline from requested capabilities.
    Synthesize {
        /// Comma-separated capabilities, e.g. tryon,makeup
        #[arg(long, value_delimiter = ',')]
        caps: Vec<String>,
        /// Wrap the pipeline in face extraction and reintegration.
        #[arg(long)]
        align: bool,
        /// ROLE=REF or ROLE=PATH; files are imported into the store.
        #[arg(long = "input", value_name = "ROLE=SOURCE")]
        inputs: Vec<String>,
        /// CAPABILITY=SERVICE_ID when several services provide a capability.
        #[arg(long = "service", value_name = "CAP=ID")]
        services: Vec<String>,
        /// Query document; flags are merged on top.
        #[arg(short = 'f', long)]
        file: Option<PathBuf>,
        /// Also write the pipeline document to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a pipeline document.
    Validate {
        #[arg(short = 'f', long)]
        file: PathBuf,
    },
    /// Execute a pipeline (or run request) document and wait for it.
    Run {
        #[arg(short = 'f', long)]
        file: PathBuf,
        /// NODE.KEY=VALUE generation parameter; VALUE is JSON or a plain string.
        #[arg(long = "param", value_name = "NODE.KEY=VALUE")]
        params: Vec<String>,
        #[arg(long)]
        max_parallel: Option<usize>,
        #[arg(long)]
        fail_fast: bool,
        #[arg(long)]
        memoize: bool,
    },
    /// Show a run record.
    Status { run_id: String },
    /// Copy a node output of a run to a file.
    Artifact {
        run_id: String,
        node: String,
        port: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in sample inputs to a directory and store them.
    Samples {
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a built-in algorithm over the /v1 model protocol.
    StubServer {
        #[arg(long)]
        algorithm: String,
        #[arg(long, env = "KOLFLOW_BIND", default_value = "127.0.0.1:0")]
        bind: String,
        /// Delay every invocation (for timeout experiments).
        #[arg(long, default_value_t = 0)]
        delay_ms: u64,
    },
}

/// What a command produced: one document for `--output json`, text otherwise.
pub struct Outcome {
    pub doc: Value,
    pub text: String,
    /// Set when the command completed but the result counts as a failure.
    pub failure: Option<ApiError>,
}

impl Outcome {
    fn new(doc: Value, text: impl Into<String>) -> Self {
        Outcome { doc, text: text.into(), failure: None }
    }
}

/// Parses argv, runs the command and returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let output = cli.output;
    let (outcome, error) = match execute(cli) {
        Ok(o) => {
            let f = o.failure.clone();
            (Some(o), f)
        }
        Err(e) => (None, Some(e)),
    };
    match (output, &outcome, &error) {
        (OutputFormat::Json, Some(o), _) => println!("{}", canonical::to_string(&o.doc)),
        (OutputFormat::Json, None, Some(e)) => println!("{}", canonical::to_string(&e.to_document())),
        (OutputFormat::Text, Some(o), _) if !o.text.is_empty() => println!("{}", o.text.trim_end()),
        _ => {}
    }
    match error {
        Some(e) => {
            eprintln!("error: {e}");
            if let Some(Value::Array(details)) = &e.details {
                for d in details {
                    eprintln!("  {d}");
                }
            }
            1
        }
        None => 0,
    }
}

pub fn execute(cli: Cli) -> Result<Outcome, ApiError> {
    let ws = Workspace::open(&cli.store, cli.registry.clone())?;
    let load = || -> Result<_, ApiError> {
        let mut r = ws.load_registry()?;
        if cli.with_mocks {
            workspace::add_mocks(&mut r);
        }
        Ok(r)
    };
    match cli.command {
        Command::Serve { bind, max_parallel } => serve(ws, bind, cli.with_mocks, max_parallel),
        Command::ListServices { capability } => {
            let filter = capability.map(|c| c.parse::<Capability>()).transpose()?;
            let services = load()?.list_services(filter);
            let text = services
                .iter()
                .map(|d| format!("{:<24} {:<20} {}", d.service_id, d.capability.name(), binding_text(&d.backend)))
                .collect::<Vec<_>>()
                .join("\n");
            Ok(Outcome::new(serde_json::to_value(&services).expect("serializes"), text))
        }
        Command::Register { file, id, capability, url, timeout_ms, exclusive } => {
            let descriptor = match (file, id, capability, url) {
                (Some(f), ..) => serde_json::from_str::<ServiceDescriptor>(&read(&f)?)
                    .map_err(|e| ApiError::new(ErrorCode::InvalidDescriptor, format!("{}: {e}", f.display())))?,
                (None, Some(id), Some(cap), Some(url)) => {
                    let mut binding = BackendBinding::remote(&url, timeout_ms);
                    if let BackendBinding::Remote { exclusive: x, .. } = &mut binding {
                        *x = exclusive;
                    }
                    ServiceDescriptor::standard(&id, cap.parse()?, binding)
                }
                _ => return Err(ApiError::new(ErrorCode::BadRequest, "give -f FILE or --id, --capability and --url")),
            };
            let mut registry = load()?;
            let d = workspace::register(&mut registry, descriptor)?;
            ws.save_registry(&registry, cli.with_mocks)?;
            let text = format!("registered {} ({})", d.service_id, d.capability);
            Ok(Outcome::new(serde_json::to_value(&d).expect("serializes"), text))
        }
        Command::Unregister { id } => {
            let mut registry = load()?;
            let d = registry.unregister_service(&id)?;
            ws.save_registry(&registry, cli.with_mocks)?;
            Ok(Outcome::new(serde_json::to_value(&d).expect("serializes"), format!("unregistered {id}")))
        }
        Command::Synthesize { caps, align, inputs, services, file, out } => {
            let mut query = match &file {
                Some(f) => serde_json::from_str::<CapabilityQuery>(&read(f)?)
                    .map_err(|e| ApiError::new(ErrorCode::BadQuery, format!("{}: {e}", f.display())))?,
                None => CapabilityQuery::default(),
            };
            for c in caps {
                query.capabilities.insert(c.trim().parse()?);
            }
            query.align_faces |= align;
            let base = file.as_deref().and_then(Path::parent).unwrap_or(Path::new("."));
            for item in inputs {
                let (role, source) = split_pair(&item, ErrorCode::BadQuery)?;
                let r = input_ref(&ws, role, source, base)?;
                query.provided_inputs.insert(role.to_string(), r);
            }
            for item in services {
                let (cap, id) = split_pair(&item, ErrorCode::BadQuery)?;
                query.services.insert(cap.parse()?, id.to_string());
            }
            let spec = synthesize_pipeline(&query, &load()?)?;
            let doc = gateway::synthesize_document(&spec);
            if let Some(path) = out {
                write(&path, canonical::to_string(&doc).as_bytes())?;
            }
            let mut text = format!("spec_hash {}\n", spec.spec_hash().to_hex());
            for (i, n) in spec.nodes.iter().enumerate() {
                text += &format!("{}. {} ({})\n", i + 1, n.id, n.service);
            }
            Ok(Outcome::new(doc, text))
        }
        Command::Validate { file } => {
            let request = RunRequest::from_json(&read(&file)?)?;
            let registry = load()?;
            let spec = request.resolve(&ws.store, &registry, Some(base_dir(&file)))?;
            validate_pipeline(&spec, &registry).map_err(|v| ApiError::validation(&v))?;
            let hash = spec.spec_hash().to_hex();
            Ok(Outcome::new(json!({ "valid": true, "spec_hash": hash }), format!("valid ({hash})")))
        }
        Command::Run { file, params, max_parallel, fail_fast, memoize } => {
            let mut request = RunRequest::from_json(&read(&file)?)?;
            for item in params {
                let (key, value) = split_pair(&item, ErrorCode::BadParams)?;
                let (node, name) = key
                    .split_once('.')
                    .ok_or_else(|| ApiError::new(ErrorCode::BadParams, format!("`{key}` is not NODE.KEY")))?;
                let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
                request.options.params.entry(node.to_string()).or_default().insert(name.to_string(), value);
            }
            request.options.max_parallel = max_parallel.or(request.options.max_parallel);
            request.options.fail_fast |= fail_fast;
            request.options.memoize |= memoize;
            let registry = load()?;
            let spec = request.resolve(&ws.store, &registry, Some(base_dir(&file)))?;
            run(&ws, &spec, &registry, request.options.clone().into_exec(1), cli.output == OutputFormat::Text)
        }
        Command::Status { run_id } => {
            let record = ws.read_record(&run_id)?;
            Ok(Outcome::new(serde_json::to_value(&record).expect("serializes"), record_text(&record)))
        }
        Command::Artifact { run_id, node, port, out } => {
            let record = ws.read_record(&run_id)?;
            let r = record.outputs(&node).and_then(|o| o.get(&port)).copied().ok_or_else(|| {
                ApiError::from(kolflow_core::ExecError::UnknownArtifact { run_id, node, port })
            })?;
            write(&out, &ws.store.read_payload(&r)?)?;
            Ok(Outcome::new(json!({ "ref": r.to_string(), "path": out }), format!("{r} -> {}", out.display())))
        }
        Command::Samples { out } => samples(&ws, &out),
        Command::StubServer { algorithm, bind, delay_ms } => {
            let alg = Catalog::builtin()
                .get(&algorithm)
                .cloned()
                .ok_or_else(|| ApiError::new(ErrorCode::UnknownAlgorithm, format!("unknown algorithm `{algorithm}`")))?;
            let faults = Faults { delay_ms, ..Faults::default() };
            let server = StubServer::bind(&bind, alg, faults)
                .map_err(|e| ApiError::new(ErrorCode::BindFailure, format!("cannot bind {bind}: {e}")))?;
            // Announce the address before blocking so scripts can pick it up.
            let url = server.base_url();
            match cli.output {
                OutputFormat::Json => println!("{}", json!({ "base_url": url })),
                OutputFormat::Text => println!("serving {algorithm} at {url}"),
            }
            server.wait();
            Ok(Outcome::new(Value::Null, ""))
        }
    }
}

fn serve(ws: Workspace, bind: String, with_mocks: bool, max_parallel: usize) -> Result<Outcome, ApiError> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| ApiError::new(ErrorCode::Internal, e.to_string()))?;
    let state = Arc::new(gateway::AppState::new(ws, with_mocks, max_parallel)?);
    runtime.block_on(async move {
        let listener = gateway::bind(&bind).await?;
        let addr = listener.local_addr().map_err(|e| ApiError::new(ErrorCode::BindFailure, e.to_string()))?;
        eprintln!("kolflow gateway listening on http://{addr}");
        gateway::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })?;
    Ok(Outcome::new(json!({ "stopped": true }), "stopped"))
}

fn run(
    ws: &Workspace,
    spec: &kolflow_core::PipelineSpec,
    registry: &kolflow_core::Registry,
    options: kolflow_core::ExecOptions,
    progress: bool,
) -> Result<Outcome, ApiError> {
    let executor = ws.executor();
    let run_id = executor.start_run(spec, registry, options)?;
    let mut seen = 0;
    loop {
        let (events, terminal) = executor.wait_events(&run_id, seen, Duration::from_secs(1))?;
        seen += events.len();
        if progress {
            for e in &events {
                if let Some(line) = event_text(&e.kind) {
                    eprintln!("{line}");
                }
            }
        }
        if terminal {
            break;
        }
    }
    let record = executor.wait(&run_id)?;
    let mut outcome = Outcome::new(serde_json::to_value(&record).expect("serializes"), record_text(&record));
    if record.status != RunStatus::Succeeded {
        let failed: Vec<String> = record
            .node_states
            .iter()
            .filter_map(|(n, s)| match s {
                NodeState::Failed { error, .. } => Some(format!("{n}: {} {}", error.code, error.message)),
                _ => None,
            })
            .collect();
        let status = serde_json::to_value(record.status).expect("serializes");
        let message = format!("run {run_id} ended {}; {}", status.as_str().unwrap_or("?"), failed.join("; "));
        outcome.failure = Some(ApiError::new(ErrorCode::RunFailed, message));
    }
    Ok(outcome)
}

fn event_text(kind: &EventKind) -> Option<String> {
    Some(match kind {
        EventKind::NodeStarted { node } => format!("started  {node}"),
        EventKind::NodeFinished { node, status, duration_ms, error, .. } => match error {
            Some(e) => format!("{status:<8} {node} after {duration_ms} ms: {} {}", e.code, e.message),
            None => format!("{status:<8} {node} in {duration_ms} ms"),
        },
        EventKind::NodeSkipped { node, reason } => format!("skipped  {node}: {reason}"),
        _ => return None,
    })
}

fn record_text(record: &kolflow_core::RunRecord) -> String {
    let status = serde_json::to_value(record.status).expect("serializes");
    let mut text = format!("run {} {}\n", record.run_id, status.as_str().unwrap_or("?"));
    for (node, state) in &record.node_states {
        text += &format!("  {node:<24} {}", state.name());
        if let Some(outputs) = record.outputs(node) {
            for (port, r) in outputs {
                text += &format!("  {port}={r}");
            }
        }
        text.push('\n');
    }
    text
}

fn binding_text(b: &BackendBinding) -> String {
    match b {
        BackendBinding::Local { algorithm_id } => format!("local:{algorithm_id}"),
        BackendBinding::Remote { base_url, .. } => base_url.clone(),
    }
}

fn samples(ws: &Workspace, dir: &Path) -> Result<Outcome, ApiError> {
    let s = SampleInputs::generate();
    let mut refs = BTreeMap::new();
    let mut text = String::new();
    for (role, artifact) in s.by_role() {
        let ext = artifact.artifact_type().extension();
        let path = dir.join(format!("{role}.{}", ext.rsplit('.').next().unwrap_or(ext)));
        write(&path, &artifact.encode_payload())?;
        let r = ws.store.store(artifact)?;
        text += &format!("{role:<16} {r}  {}\n", path.display());
        refs.insert(role, r.to_string());
    }
    Ok(Outcome::new(json!(refs), text))
}

/// `ROLE=SOURCE`: a stored reference, or a file decoded as the role's type.
fn input_ref(ws: &Workspace, role: &str, source: &str, base: &Path) -> Result<ArtifactRef, ApiError> {
    let t = role_type(role).ok_or_else(|| ApiError::new(ErrorCode::BadQuery, format!("unknown input role `{role}`")))?;
    if ArtifactRef::is_ref_syntax(source) {
        return source.parse::<ArtifactRef>().map_err(ApiError::from);
    }
    let path = base.join(source);
    let bytes = std::fs::read(&path).map_err(|e| ApiError::new(ErrorCode::BadInput, format!("{}: {e}", path.display())))?;
    let artifact =
        Artifact::decode(t, &bytes).map_err(|e| ApiError::new(ErrorCode::BadInput, format!("{}: {e}", path.display())))?;
    Ok(ws.store.store(&artifact)?)
}

fn split_pair(item: &str, code: ErrorCode) -> Result<(&str, &str), ApiError> {
    item.split_once('=')
        .ok_or_else(|| ApiError::new(code, format!("`{item}` is not KEY=VALUE")))
}

fn base_dir(file: &Path) -> &Path {
    file.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn read(path: &Path) -> Result<String, ApiError> {
    std::fs::read_to_string(path).map_err(|e| ApiError::new(ErrorCode::BadRequest, format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let io = |e: std::io::Error| ApiError::new(ErrorCode::Internal, format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, bytes).map_err(io)
}
