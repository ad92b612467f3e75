//! Algorithm backends.
//!
//! Local algorithms live in a [`Catalog`] and run in-process; remote ones
//! are reached through [`remote::RemoteClient`] over the `/v1` model-server
//! protocol. Both sit behind the [`Backend`] trait the executor invokes.

pub mod face;
pub mod mocks;
pub mod remote;
pub mod stub;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactType};
use crate::registry::{BackendBinding, Capability, InputPort, OutputPort, ServiceDescriptor};

/// Artifacts keyed by port name.
pub type PortMap = BTreeMap<String, Artifact>;

/// Free-form generation parameters, passed through to algorithms untouched.
pub type Params = BTreeMap<String, Value>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithm(String),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("malformed input: {0}")]
    MalformedInput(String),
    #[error("backend returned {found} on port `{port}` declared as {expected}")]
    OutputTypeMismatch {
        port: String,
        expected: ArtifactType,
        found: ArtifactType,
    },
    #[error("backend did not produce output port `{0}`")]
    MissingOutput(String),
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend timed out after {0} ms")]
    Timeout(u64),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("remote fault {code}: {message}")]
    RemoteFault { code: String, message: String },
    #[error("signature mismatch: {0}")]
    SignatureMismatch(String),
    #[error("backend error {code}: {message}")]
    Fault { code: String, message: String },
}

impl BackendError {
    /// Stable machine code; remote faults keep the server's code.
    pub fn code(&self) -> &str {
        match self {
            BackendError::UnknownAlgorithm(_) => "UNKNOWN_ALGORITHM",
            BackendError::BadParams(_) => "BAD_PARAMS",
            BackendError::MalformedInput(_) => "MALFORMED_INPUT",
            BackendError::OutputTypeMismatch { .. } => "OUTPUT_TYPE_MISMATCH",
            BackendError::MissingOutput(_) => "MISSING_OUTPUT",
            BackendError::BackendUnreachable(_) => "BACKEND_UNREACHABLE",
            BackendError::Timeout(_) => "TIMEOUT",
            BackendError::ProtocolError(_) => "PROTOCOL_ERROR",
            BackendError::RemoteFault { code, .. } => code,
            BackendError::SignatureMismatch(_) => "SIGNATURE_MISMATCH",
            BackendError::Fault { code, .. } => code,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Int,
    Float,
    String,
    Bool,
}

impl ParamType {
    fn accepts(&self, v: &Value) -> bool {
        match self {
            ParamType::Int => v.is_i64() || v.is_u64(),
            ParamType::Float => v.is_number(),
            ParamType::String => v.is_string(),
            ParamType::Bool => v.is_boolean(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    #[serde(rename = "type")]
    pub param_type: ParamType,
    pub default: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlgorithmDescriptor {
    pub algorithm_id: String,
    pub capability: Capability,
    pub deterministic: bool,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
}

impl AlgorithmDescriptor {
    pub fn new(algorithm_id: &str, capability: Capability) -> Self {
        AlgorithmDescriptor {
            algorithm_id: algorithm_id.to_string(),
            capability,
            deterministic: true,
            parameters: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, name: &str, param_type: ParamType, default: Value) -> Self {
        self.parameters
            .insert(name.to_string(), ParamSpec { param_type, default });
        self
    }

    /// Rejects unknown names and ill-typed values.
    pub fn check_params(&self, params: &Params) -> Result<(), BackendError> {
        for (name, value) in params {
            let spec = self
                .parameters
                .get(name)
                .ok_or_else(|| BackendError::BadParams(format!("unknown parameter `{name}`")))?;
            if !spec.param_type.accepts(value) {
                return Err(BackendError::BadParams(format!(
                    "parameter `{name}` must be {:?}, got {value}",
                    spec.param_type
                )));
            }
        }
        Ok(())
    }

    /// Parameter value, falling back to its declared default.
    pub fn param<'a>(&'a self, params: &'a Params, name: &str) -> Option<&'a Value> {
        params
            .get(name)
            .or_else(|| self.parameters.get(name).map(|p| &p.default))
    }
}

/// An in-process implementation of a capability.
pub trait Algorithm: Send + Sync {
    fn descriptor(&self) -> &AlgorithmDescriptor;

    /// Inputs are already checked against the capability signature.
    fn run(&self, inputs: &PortMap, params: &Params) -> Result<PortMap, BackendError>;
}

/// Checks `inputs` against a port signature.
pub fn check_inputs(inputs: &PortMap, signature: &[InputPort]) -> Result<(), BackendError> {
    for port in signature {
        match inputs.get(&port.port) {
            Some(a) if a.artifact_type() != port.artifact_type => {
                return Err(BackendError::MalformedInput(format!(
                    "port `{}` expects {}, got {}",
                    port.port,
                    port.artifact_type,
                    a.artifact_type()
                )))
            }
            None if port.required => {
                return Err(BackendError::MalformedInput(format!(
                    "missing required input `{}`",
                    port.port
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = inputs.keys().find(|k| !signature.iter().any(|p| &p.port == *k)) {
        return Err(BackendError::MalformedInput(format!("unexpected input `{extra}`")));
    }
    Ok(())
}

/// Checks `outputs` against the declared output ports; extra ports are dropped.
pub fn check_outputs(mut outputs: PortMap, signature: &[OutputPort]) -> Result<PortMap, BackendError> {
    let mut checked = PortMap::new();
    for port in signature {
        let a = outputs
            .remove(&port.port)
            .ok_or_else(|| BackendError::MissingOutput(port.port.clone()))?;
        if a.artifact_type() != port.artifact_type {
            return Err(BackendError::OutputTypeMismatch {
                port: port.port.clone(),
                expected: port.artifact_type,
                found: a.artifact_type(),
            });
        }
        checked.insert(port.port.clone(), a);
    }
    Ok(checked)
}

/// Algorithm id → implementation.
#[derive(Clone, Default)]
pub struct Catalog {
    algorithms: BTreeMap<String, Arc<dyn Algorithm>>,
}

impl std::fmt::Debug for Catalog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.algorithms.keys()).finish()
    }
}

impl Catalog {
    pub fn empty() -> Self {
        Self::default()
    }

    /// The four mock generators plus face align/reintegrate.
    pub fn builtin() -> Self {
        let mut c = Catalog::empty();
        c.insert(Arc::new(mocks::MockTryon::new()));
        c.insert(Arc::new(mocks::MockMakeup::new()));
        c.insert(Arc::new(mocks::MockBackground::new()));
        c.insert(Arc::new(mocks::MockObject::new()));
        c.insert(Arc::new(face::FaceExtractAlign::new(
            crate::face_align::LandmarkTemplate::default_256(),
        )));
        c.insert(Arc::new(face::FaceReintegrate::new()));
        c
    }

    /// Adds or replaces an algorithm.
    pub fn insert(&mut self, algorithm: Arc<dyn Algorithm>) {
        self.algorithms
            .insert(algorithm.descriptor().algorithm_id.clone(), algorithm);
    }

    pub fn get(&self, algorithm_id: &str) -> Option<&Arc<dyn Algorithm>> {
        self.algorithms.get(algorithm_id)
    }

    pub fn descriptors(&self) -> Vec<AlgorithmDescriptor> {
        self.algorithms.values().map(|a| a.descriptor().clone()).collect()
    }

    /// `(algorithm_id, capability)` pairs, as the registry needs them.
    pub fn capabilities(&self) -> Vec<(String, Capability)> {
        self.algorithms
            .iter()
            .map(|(id, a)| (id.clone(), a.descriptor().capability))
            .collect()
    }

    pub fn invoke_local(
        &self,
        algorithm_id: &str,
        inputs: &PortMap,
        params: &Params,
    ) -> Result<PortMap, BackendError> {
        let algorithm = self
            .get(algorithm_id)
            .ok_or_else(|| BackendError::UnknownAlgorithm(algorithm_id.to_string()))?;
        let desc = algorithm.descriptor();
        let (in_sig, out_sig) = desc.capability.signature();
        check_inputs(inputs, &in_sig)?;
        desc.check_params(params)?;
        let outputs = algorithm.run(inputs, params)?;
        check_outputs(outputs, &out_sig)
    }
}

/// Descriptors of the six built-in services, each bound to its local algorithm.
pub fn builtin_services() -> Vec<ServiceDescriptor> {
    [
        ("tryon", Capability::Tryon, mocks::TRYON_ID),
        ("makeup", Capability::Makeup, mocks::MAKEUP_ID),
        ("background", Capability::Background, mocks::BACKGROUND_ID),
        ("object_interaction", Capability::ObjectInteraction, mocks::OBJECT_ID),
        ("face_extract_align", Capability::FaceExtractAlign, face::ALIGN_ID),
        ("face_reintegrate", Capability::FaceReintegrate, face::REINTEGRATE_ID),
    ]
    .into_iter()
    .map(|(id, cap, alg)| ServiceDescriptor::standard(id, cap, BackendBinding::local(alg)))
    .collect()
}

/// What the executor calls for one node.
pub trait Backend: Send + Sync {
    fn invoke(
        &self,
        descriptor: &ServiceDescriptor,
        inputs: &PortMap,
        params: &Params,
    ) -> Result<PortMap, BackendError>;
}

/// Resolves service bindings to local catalog entries or remote clients.
#[derive(Debug, Clone)]
pub struct DefaultBackend {
    catalog: Arc<Catalog>,
}

impl DefaultBackend {
    pub fn new(catalog: Arc<Catalog>) -> Self {
        DefaultBackend { catalog }
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }
}

impl Backend for DefaultBackend {
    fn invoke(
        &self,
        descriptor: &ServiceDescriptor,
        inputs: &PortMap,
        params: &Params,
    ) -> Result<PortMap, BackendError> {
        check_inputs(inputs, &descriptor.inputs)?;
        let outputs = match &descriptor.backend {
            BackendBinding::Local { algorithm_id } => {
                self.catalog.invoke_local(algorithm_id, inputs, params)?
            }
            binding @ BackendBinding::Remote { .. } => {
                remote::invoke_remote(binding, descriptor.capability, inputs, params)?
            }
        };
        check_outputs(outputs, &descriptor.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifact::Raster;

    fn raster(t: ArtifactType, v: u8) -> Artifact {
        Artifact::raster(t, Raster::filled(4, 4, &[v, v, v])).unwrap()
    }

    #[test]
    fn unknown_algorithm() {
        let c = Catalog::builtin();
        assert_eq!(
            c.invoke_local("nope", &PortMap::new(), &Params::new()),
            Err(BackendError::UnknownAlgorithm("nope".into()))
        );
    }

    #[test]
    fn signature_mismatch_is_malformed_input() {
        let c = Catalog::builtin();
        let inputs = PortMap::from([
            ("person".to_string(), raster(ArtifactType::PersonImage, 10)),
            ("garment".to_string(), Artifact::text("beach")),
        ]);
        assert!(matches!(
            c.invoke_local(mocks::TRYON_ID, &inputs, &Params::new()),
            Err(BackendError::MalformedInput(_))
        ));
    }

    #[test]
    fn every_mock_is_deterministic() {
        let c = Catalog::builtin();
        let samples = crate::samples::SampleInputs::generate();
        for d in builtin_services() {
            let inputs: PortMap = d
                .inputs
                .iter()
                .filter_map(|p| samples.for_type(p.artifact_type).map(|a| (p.port.clone(), a)))
                .collect();
            if inputs.len() != d.inputs.len() {
                continue; // face_reintegrate needs a session produced upstream
            }
            let BackendBinding::Local { algorithm_id } = &d.backend else { unreachable!() };
            let a = c.invoke_local(algorithm_id, &inputs, &Params::new()).unwrap();
            let b = c.invoke_local(algorithm_id, &inputs, &Params::new()).unwrap();
            let hashes = |m: &PortMap| m.values().map(|x| x.content_hash()).collect::<Vec<_>>();
            assert_eq!(hashes(&a), hashes(&b), "{algorithm_id}");
            assert!(c.get(algorithm_id).unwrap().descriptor().deterministic);
        }
    }

    #[test]
    fn params_are_checked() {
        let d = AlgorithmDescriptor::new("x", Capability::Makeup).with_param(
            "feather",
            ParamType::Int,
            Value::from(8),
        );
        assert!(d.check_params(&Params::from([("feather".into(), Value::from(3))])).is_ok());
        assert!(d.check_params(&Params::from([("feather".into(), Value::from("3"))])).is_err());
        assert!(d.check_params(&Params::from([("seed".into(), Value::from(3))])).is_err());
        assert_eq!(d.param(&Params::new(), "feather"), Some(&Value::from(8)));
    }

    #[test]
    fn output_type_checked() {
        let outputs = PortMap::from([("image".to_string(), Artifact::text("oops"))]);
        assert_eq!(
            check_outputs(outputs, &[OutputPort::new("image", ArtifactType::PersonImage)]),
            Err(BackendError::OutputTypeMismatch {
                port: "image".into(),
                expected: ArtifactType::PersonImage,
                found: ArtifactType::BackgroundSpec
            })
        );
    }
}
