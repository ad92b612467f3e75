//! Orchestration engine for modular generative image pipelines.
//!
//! Services register typed ports and a backend binding with the
//! [`Registry`]. The flow module turns a capability query into a validated
//! DAG ([`PipelineSpec`]), and the [`Executor`] runs it over local or remote
//! backends while persisting every intermediate artifact into a
//! content-addressed [`ArtifactStore`].

pub mod artifact;
pub mod backends;
pub mod canonical;
pub mod executor;
pub mod face_align;
pub mod flow;
pub mod registry;
pub mod samples;
pub mod store;

pub use artifact::{
    content_hash, Artifact, ArtifactData, ArtifactError, ArtifactType, Channels, Digest, LandmarkSet,
    Raster,
};
pub use backends::{
    builtin_services, Algorithm, AlgorithmDescriptor, Backend, BackendError, Catalog, DefaultBackend,
    Params, PortMap,
};
pub use executor::{
    ExecError, ExecOptions, Executor, NodeError, NodeState, RunEvent, RunRecord, RunStatus,
};
pub use face_align::{AlignError, AlignSession, LandmarkTemplate, SimilarityTransform};
pub use flow::{
    bind_io, synthesize_pipeline, topological_order, validate_pipeline, CapabilityQuery, FlowError,
    InputSource, PipelineEdge, PipelineNode, PipelineSpec, Violation,
};
pub use registry::{
    BackendBinding, Capability, Compatibility, DependencyMatrix, Incompatibility, InputPort,
    OutputPort, Registry, RegistryError, RegistrySnapshot, Rule, ServiceDescriptor,
};
pub use store::{load_artifact, store_artifact, ArtifactRef, ArtifactStore, StoreError};

/// A registry holding the built-in algorithms and their six services.
pub fn builtin_registry(catalog: &Catalog) -> Registry {
    let mut r = Registry::new(catalog.capabilities());
    for d in builtin_services() {
        r.register_service(d).expect("built-in services are valid");
    }
    r
}
