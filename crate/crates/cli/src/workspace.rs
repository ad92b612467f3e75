//! State shared by the CLI and the gateway: store, runs directory and the
//! persisted registry snapshot.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use kolflow_core::backends::remote::{verify_remote_service, WireArtifact};
use kolflow_core::executor::import_inputs;
use kolflow_core::flow::InputSource;
use kolflow_core::{
    builtin_services, ArtifactStore, BackendBinding, Catalog, DefaultBackend, ExecOptions, Executor, Params,
    PipelineSpec, Registry, RegistrySnapshot, ServiceDescriptor,
};
use serde::Deserialize;

use crate::error::{ApiError, ErrorCode};

pub struct Workspace {
    pub store: ArtifactStore,
    pub runs_root: PathBuf,
    pub registry_path: PathBuf,
    pub catalog: Arc<Catalog>,
}

impl Workspace {
    /// Opens `<root>` as the artifact store; runs live in `<root>/runs` and the
    /// registry snapshot defaults to `<root>/registry.json`.
    pub fn open(root: &Path, registry_path: Option<PathBuf>) -> Result<Self, ApiError> {
        let store = ArtifactStore::open(root)?;
        Ok(Workspace {
            runs_root: root.join("runs"),
            registry_path: registry_path.unwrap_or_else(|| root.join("registry.json")),
            store,
            catalog: Arc::new(Catalog::builtin()),
        })
    }

    /// The persisted registry; a missing snapshot file means an empty one.
    pub fn load_registry(&self) -> Result<Registry, ApiError> {
        let snapshot = match std::fs::read_to_string(&self.registry_path) {
            Ok(text) => serde_json::from_str::<RegistrySnapshot>(&text).map_err(|e| {
                ApiError::new(ErrorCode::BadConfig, format!("{}: {e}", self.registry_path.display()))
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RegistrySnapshot::default(),
            Err(e) => {
                return Err(ApiError::new(ErrorCode::BadConfig, format!("{}: {e}", self.registry_path.display())))
            }
        };
        Registry::from_snapshot(&snapshot, self.catalog.capabilities())
            .map_err(|e| ApiError::new(ErrorCode::BadConfig, format!("{}: {e}", self.registry_path.display())))
    }

    /// Writes the snapshot. With `skip_mocks`, built-in services added by
    /// [`add_mocks`] are left out so they do not outlive the flag.
    pub fn save_registry(&self, registry: &Registry, skip_mocks: bool) -> Result<(), ApiError> {
        let mut snapshot = registry.snapshot();
        if skip_mocks {
            let builtin = builtin_services();
            snapshot.services.retain(|d| !builtin.contains(d));
        }
        let json = serde_json::to_string_pretty(&snapshot).expect("snapshot serializes");
        let tmp = self.registry_path.with_extension("json.tmp");
        let io = |e: std::io::Error| ApiError::new(ErrorCode::StoreUnavailable, format!("{}: {e}", tmp.display()));
        if let Some(dir) = self.registry_path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        std::fs::write(&tmp, json).map_err(io)?;
        std::fs::rename(&tmp, &self.registry_path).map_err(io)
    }

    pub fn executor(&self) -> Executor {
        Executor::new(
            self.store.clone(),
            self.runs_root.clone(),
            Arc::new(DefaultBackend::new(self.catalog.clone())),
        )
    }
}

/// Adds the built-in services that are not registered yet.
pub fn add_mocks(registry: &mut Registry) {
    for d in builtin_services() {
        if registry.get(&d.service_id).is_none() {
            registry.register_service(d).expect("built-in services are valid");
        }
    }
}

/// Registers `descriptor`, first checking a remote endpoint's health and signature.
pub fn register(registry: &mut Registry, descriptor: ServiceDescriptor) -> Result<ServiceDescriptor, ApiError> {
    descriptor.validate()?;
    if registry.get(&descriptor.service_id).is_some() {
        return Err(kolflow_core::RegistryError::DuplicateServiceId(descriptor.service_id).into());
    }
    if matches!(descriptor.backend, BackendBinding::Remote { .. }) {
        verify_remote_service(&descriptor)?;
    }
    registry.register_service(descriptor.clone())?;
    Ok(descriptor)
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    pub max_parallel: Option<usize>,
    #[serde(default)]
    pub fail_fast: bool,
    #[serde(default)]
    pub memoize: bool,
    /// node id → generation parameters
    #[serde(default)]
    pub params: BTreeMap<String, Params>,
}

impl RunOptions {
    pub fn into_exec(self, default_parallel: usize) -> ExecOptions {
        ExecOptions {
            max_parallel: self.max_parallel.unwrap_or(default_parallel),
            fail_fast: self.fail_fast,
            memoize: self.memoize,
            params: self.params,
        }
    }
}

/// Body of `POST /runs` and of `kolflow run -f`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub spec: PipelineSpec,
    /// Inline inputs keyed by `node.port`; they override `spec.inputs`.
    #[serde(default)]
    pub inputs: BTreeMap<String, WireArtifact>,
    #[serde(default)]
    pub options: RunOptions,
}

impl RunRequest {
    /// Accepts a full run request, a synthesize response, or a bare spec.
    pub fn from_json(text: &str) -> Result<Self, ApiError> {
        let bad = |e: serde_json::Error| ApiError::new(ErrorCode::BadRequest, format!("run document: {e}"));
        let value: serde_json::Value = serde_json::from_str(text).map_err(bad)?;
        if value.get("nodes").is_some() || value.get("spec_hash").is_some() {
            let spec = PipelineSpec::from_json(text).map_err(bad)?;
            return Ok(RunRequest { spec, inputs: BTreeMap::new(), options: RunOptions::default() });
        }
        serde_json::from_value(value).map_err(bad)
    }

    /// Stores inline inputs and, when `base` is given, imports file-path inputs
    /// relative to it. Returns the spec with every stored input bound by reference.
    pub fn resolve(
        &self,
        store: &ArtifactStore,
        registry: &Registry,
        base: Option<&Path>,
    ) -> Result<PipelineSpec, ApiError> {
        let mut spec = self.spec.clone();
        for (key, wire) in &self.inputs {
            let artifact = wire
                .decode()
                .map_err(|e| ApiError::new(ErrorCode::BadInput, format!("input `{key}`: {e}")))?;
            spec.inputs.insert(key.clone(), InputSource::Ref(store.store(&artifact)?));
        }
        match base {
            Some(base) => import_inputs(&spec, registry, store, base).map_err(|e| ApiError::new(ErrorCode::BadInput, e)),
            None => Ok(spec),
        }
    }
}

impl Workspace {
    /// A run record persisted by any earlier process.
    pub fn read_record(&self, run_id: &str) -> Result<kolflow_core::RunRecord, ApiError> {
        let unknown = || kolflow_core::ExecError::UnknownRun(run_id.to_string()).into();
        if run_id.is_empty() || !run_id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-') {
            return Err(unknown());
        }
        let text = std::fs::read_to_string(self.runs_root.join(run_id).join("record.json")).map_err(|_| unknown())?;
        serde_json::from_str(&text).map_err(|e| ApiError::new(ErrorCode::IntegrityError, format!("run record: {e}")))
    }
}
