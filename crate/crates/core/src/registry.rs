//! Service registry and the compatibility / dependency matrices.
//!
//! The registry is a plain value: descriptors keyed by service id, the
//! capability-pair dependency rules, and the set of algorithm ids that local
//! bindings may reference. Every query (`check_edge`, `list_services`, ...)
//! is a pure function of that value.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::ArtifactType;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("service `{0}` is already registered")]
    DuplicateServiceId(String),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("unknown algorithm `{0}`")]
    UnknownAlgorithmId(String),
    #[error("unknown service `{0}`")]
    UnknownService(String),
    #[error("service `{service}` has no port `{port}`")]
    UnknownPort { service: String, port: String },
    #[error("rule ({first}, {second}) = before conflicts with ({second}, {first}) = before")]
    ConflictingRule {
        first: Capability,
        second: Capability,
    },
    #[error("unknown capability `{0}`")]
    UnknownCapability(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Tryon,
    Makeup,
    Background,
    ObjectInteraction,
    FaceExtractAlign,
    FaceReintegrate,
}

impl Capability {
    pub const ALL: [Capability; 6] = [
        Capability::Tryon,
        Capability::Makeup,
        Capability::Background,
        Capability::ObjectInteraction,
        Capability::FaceExtractAlign,
        Capability::FaceReintegrate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Capability::Tryon => "tryon",
            Capability::Makeup => "makeup",
            Capability::Background => "background",
            Capability::ObjectInteraction => "object_interaction",
            Capability::FaceExtractAlign => "face_extract_align",
            Capability::FaceReintegrate => "face_reintegrate",
        }
    }

    /// The standard port signature services of this capability expose.
    pub fn signature(self) -> (Vec<InputPort>, Vec<OutputPort>) {
        use ArtifactType::*;
        let person = InputPort::required("person", PersonImage);
        let image_out = vec![OutputPort::new("image", PersonImage)];
        match self {
            Capability::Tryon => (
                vec![person, InputPort::required("garment", GarmentRef)],
                image_out,
            ),
            Capability::Makeup => (
                vec![person, InputPort::required("makeup_ref", MakeupRef)],
                image_out,
            ),
            Capability::Background => (
                vec![person, InputPort::required("background_spec", BackgroundSpec)],
                image_out,
            ),
            Capability::ObjectInteraction => (
                vec![person, InputPort::required("object_ref", ObjectRef)],
                image_out,
            ),
            Capability::FaceExtractAlign => (
                vec![person, InputPort::required("landmarks", LandmarkSet)],
                vec![
                    OutputPort::new("face", PersonImage),
                    OutputPort::new("session", AlignSession),
                ],
            ),
            Capability::FaceReintegrate => (
                vec![
                    InputPort::required("face", PersonImage),
                    InputPort::required("session", AlignSession),
                ],
                image_out,
            ),
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Capability {
    type Err = RegistryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| RegistryError::UnknownCapability(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputPort {
    pub port: String,
    #[serde(rename = "type")]
    pub artifact_type: ArtifactType,
    #[serde(default = "default_true")]
    pub required: bool,
}

fn default_true() -> bool {
    true
}

impl InputPort {
    pub fn required(port: &str, artifact_type: ArtifactType) -> Self {
        InputPort {
            port: port.to_string(),
            artifact_type,
            required: true,
        }
    }

    pub fn optional(port: &str, artifact_type: ArtifactType) -> Self {
        InputPort {
            required: false,
            ..InputPort::required(port, artifact_type)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputPort {
    pub port: String,
    #[serde(rename = "type")]
    pub artifact_type: ArtifactType,
}

impl OutputPort {
    pub fn new(port: &str, artifact_type: ArtifactType) -> Self {
        OutputPort {
            port: port.to_string(),
            artifact_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendBinding {
    Local {
        algorithm_id: String,
    },
    Remote {
        base_url: String,
        timeout_ms: u64,
        /// Serialize all invocations through this binding.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        exclusive: bool,
    },
}

impl BackendBinding {
    pub fn local(algorithm_id: &str) -> Self {
        BackendBinding::Local {
            algorithm_id: algorithm_id.to_string(),
        }
    }

    pub fn remote(base_url: &str, timeout_ms: u64) -> Self {
        BackendBinding::Remote {
            base_url: base_url.trim_end_matches('/').to_string(),
            timeout_ms,
            exclusive: false,
        }
    }

    pub fn is_exclusive(&self) -> bool {
        matches!(self, BackendBinding::Remote { exclusive: true, .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub capability: Capability,
    pub inputs: Vec<InputPort>,
    pub outputs: Vec<OutputPort>,
    pub backend: BackendBinding,
    #[serde(default = "default_version")]
    pub version: String,
}

fn default_version() -> String {
    "0.1.0".to_string()
}

impl ServiceDescriptor {
    /// A descriptor with the capability's standard port signature.
    pub fn standard(service_id: &str, capability: Capability, backend: BackendBinding) -> Self {
        let (inputs, outputs) = capability.signature();
        ServiceDescriptor {
            service_id: service_id.to_string(),
            capability,
            inputs,
            outputs,
            backend,
            version: default_version(),
        }
    }

    pub fn input(&self, port: &str) -> Option<&InputPort> {
        self.inputs.iter().find(|p| p.port == port)
    }

    pub fn output(&self, port: &str) -> Option<&OutputPort> {
        self.outputs.iter().find(|p| p.port == port)
    }

    /// Checks the structural invariants (id syntax, ports, binding shape).
    pub fn validate(&self) -> Result<(), RegistryError> {
        let invalid = |m: String| Err(RegistryError::InvalidDescriptor(m));
        if self.service_id.is_empty()
            || !self
                .service_id
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
        {
            return invalid(format!(
                "service_id `{}` must match [a-z0-9_-]+",
                self.service_id
            ));
        }
        if self.outputs.is_empty() {
            return invalid(format!("service `{}` declares no output ports", self.service_id));
        }
        let mut seen = BTreeSet::new();
        for name in self
            .inputs
            .iter()
            .map(|p| &p.port)
            .chain(self.outputs.iter().map(|p| &p.port))
        {
            if name.is_empty() {
                return invalid("empty port name".into());
            }
            if !seen.insert(name.as_str()) {
                return invalid(format!("duplicate port name `{name}`"));
            }
        }
        match &self.backend {
            BackendBinding::Local { algorithm_id } if algorithm_id.is_empty() => {
                invalid("local binding with empty algorithm_id".into())
            }
            BackendBinding::Remote { base_url, timeout_ms, .. } => {
                if *timeout_ms == 0 {
                    return invalid("remote timeout_ms must be positive".into());
                }
                if !(base_url.starts_with("http://") || base_url.starts_with("https://")) {
                    return invalid(format!("remote base_url `{base_url}` is not an http(s) URL"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether the port signature equals the capability's standard one.
    pub fn has_standard_signature(&self) -> bool {
        let (inputs, outputs) = self.capability.signature();
        self.inputs == inputs && self.outputs == outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// First capability must precede the second when both occur.
    Before,
    Allowed,
    /// Direct edges from the first to the second capability are banned.
    Forbidden,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleEntry {
    pub first: Capability,
    pub second: Capability,
    pub rule: Rule,
}

/// Ordered capability-pair rules; missing entries mean `allowed`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DependencyMatrix {
    entries: BTreeMap<(Capability, Capability), Rule>,
}

impl DependencyMatrix {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Built-in ordering, every pair of the chain
    /// tryon ≺ face_extract_align ≺ makeup ≺ face_reintegrate ≺ background ≺ object_interaction.
    ///
    /// The full closure is stored so any subset of capabilities is totally
    /// ordered, e.g. alignment without makeup still extracts before reintegrating.
    pub fn defaults() -> Self {
        use Capability::*;
        let chain = [Tryon, FaceExtractAlign, Makeup, FaceReintegrate, Background, ObjectInteraction];
        let mut m = Self::empty();
        for (i, &a) in chain.iter().enumerate() {
            for &b in &chain[i + 1..] {
                m.set(a, b, Rule::Before).expect("default rules are consistent");
            }
        }
        m
    }

    pub fn get(&self, first: Capability, second: Capability) -> Rule {
        self.entries
            .get(&(first, second))
            .copied()
            .unwrap_or(Rule::Allowed)
    }

    pub fn set(&mut self, first: Capability, second: Capability, rule: Rule) -> Result<(), RegistryError> {
        if rule == Rule::Before && (first == second || self.get(second, first) == Rule::Before) {
            return Err(RegistryError::ConflictingRule { first, second });
        }
        if rule == Rule::Allowed {
            self.entries.remove(&(first, second));
        } else {
            self.entries.insert((first, second), rule);
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<RuleEntry> {
        self.entries
            .iter()
            .map(|(&(first, second), &rule)| RuleEntry { first, second, rule })
            .collect()
    }

    pub fn before_pairs(&self) -> impl Iterator<Item = (Capability, Capability)> + '_ {
        self.entries
            .iter()
            .filter(|(_, r)| **r == Rule::Before)
            .map(|(&pair, _)| pair)
    }

    /// Returns one cycle of `before` rules, if any exists.
    pub fn find_cycle(&self) -> Option<Vec<Capability>> {
        let nodes: Vec<String> = Capability::ALL.iter().map(|c| c.name().to_string()).collect();
        let edges: Vec<(String, String)> = self
            .before_pairs()
            .map(|(a, b)| (a.name().to_string(), b.name().to_string()))
            .collect();
        match crate::flow::topological_order(&nodes, &edges) {
            Ok(_) => None,
            Err(crate::flow::FlowError::CycleDetected(ids)) => {
                Some(ids.iter().filter_map(|s| s.parse().ok()).collect())
            }
            Err(_) => None,
        }
    }
}

/// Why an output port cannot feed an input port.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Incompatibility {
    TypeMismatch {
        from: ArtifactType,
        to: ArtifactType,
    },
    ForbiddenPair {
        from: Capability,
        to: Capability,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compatibility {
    Compatible,
    Incompatible(Incompatibility),
}

/// Persisted registry document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RegistrySnapshot {
    #[serde(default)]
    pub services: Vec<ServiceDescriptor>,
    /// Full rule set; absent means the built-in defaults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rules: Option<Vec<RuleEntry>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registry {
    services: BTreeMap<String, ServiceDescriptor>,
    rules: DependencyMatrix,
    algorithms: BTreeMap<String, Capability>,
}

impl Registry {
    /// Empty registry with default rules; `algorithms` maps each known
    /// local algorithm id to the capability it implements.
    pub fn new(algorithms: impl IntoIterator<Item = (String, Capability)>) -> Self {
        let rules = DependencyMatrix::defaults();
        debug_assert!(rules.find_cycle().is_none());
        Registry {
            services: BTreeMap::new(),
            rules,
            algorithms: algorithms.into_iter().collect(),
        }
    }

    pub fn rules(&self) -> &DependencyMatrix {
        &self.rules
    }

    pub fn replace_rules(&mut self, rules: DependencyMatrix) {
        self.rules = rules;
    }

    pub fn knows_algorithm(&self, algorithm_id: &str) -> bool {
        self.algorithms.contains_key(algorithm_id)
    }

    pub fn register_service(&mut self, descriptor: ServiceDescriptor) -> Result<String, RegistryError> {
        descriptor.validate()?;
        if self.services.contains_key(&descriptor.service_id) {
            return Err(RegistryError::DuplicateServiceId(descriptor.service_id));
        }
        if let BackendBinding::Local { algorithm_id } = &descriptor.backend {
            match self.algorithms.get(algorithm_id) {
                None => return Err(RegistryError::UnknownAlgorithmId(algorithm_id.clone())),
                Some(&cap) if cap != descriptor.capability => {
                    return Err(RegistryError::InvalidDescriptor(format!(
                        "algorithm `{algorithm_id}` implements {cap}, descriptor declares {}",
                        descriptor.capability
                    )))
                }
                Some(_) => {}
            }
        }
        let id = descriptor.service_id.clone();
        self.services.insert(id.clone(), descriptor);
        Ok(id)
    }

    pub fn unregister_service(&mut self, service_id: &str) -> Result<ServiceDescriptor, RegistryError> {
        self.services
            .remove(service_id)
            .ok_or_else(|| RegistryError::UnknownService(service_id.to_string()))
    }

    pub fn get(&self, service_id: &str) -> Option<&ServiceDescriptor> {
        self.services.get(service_id)
    }

    pub fn service(&self, service_id: &str) -> Result<&ServiceDescriptor, RegistryError> {
        self.get(service_id)
            .ok_or_else(|| RegistryError::UnknownService(service_id.to_string()))
    }

    /// Descriptors sorted by service id, optionally filtered by capability.
    pub fn list_services(&self, filter: Option<Capability>) -> Vec<ServiceDescriptor> {
        self.services
            .values()
            .filter(|d| filter.is_none_or(|c| d.capability == c))
            .cloned()
            .collect()
    }

    pub fn set_dependency_rule(
        &mut self,
        pair: (Capability, Capability),
        rule: Rule,
    ) -> Result<&DependencyMatrix, RegistryError> {
        self.rules.set(pair.0, pair.1, rule)?;
        Ok(&self.rules)
    }

    pub fn check_edge(
        &self,
        from: (&str, &str),
        to: (&str, &str),
    ) -> Result<Compatibility, RegistryError> {
        let producer = self.service(from.0)?;
        let consumer = self.service(to.0)?;
        let out = producer.output(from.1).ok_or_else(|| RegistryError::UnknownPort {
            service: from.0.to_string(),
            port: from.1.to_string(),
        })?;
        let inp = consumer.input(to.1).ok_or_else(|| RegistryError::UnknownPort {
            service: to.0.to_string(),
            port: to.1.to_string(),
        })?;
        if out.artifact_type != inp.artifact_type {
            return Ok(Compatibility::Incompatible(Incompatibility::TypeMismatch {
                from: out.artifact_type,
                to: inp.artifact_type,
            }));
        }
        if self.rules.get(producer.capability, consumer.capability) == Rule::Forbidden {
            return Ok(Compatibility::Incompatible(Incompatibility::ForbiddenPair {
                from: producer.capability,
                to: consumer.capability,
            }));
        }
        Ok(Compatibility::Compatible)
    }

    pub fn snapshot(&self) -> RegistrySnapshot {
        RegistrySnapshot {
            services: self.services.values().cloned().collect(),
            rules: Some(self.rules.entries()),
        }
    }

    /// Rebuilds a registry from a snapshot; services are re-validated.
    pub fn from_snapshot(
        snapshot: &RegistrySnapshot,
        algorithms: impl IntoIterator<Item = (String, Capability)>,
    ) -> Result<Self, RegistryError> {
        let mut registry = Registry::new(algorithms);
        if let Some(entries) = &snapshot.rules {
            let mut rules = DependencyMatrix::empty();
            for e in entries {
                rules.set(e.first, e.second, e.rule)?;
            }
            registry.rules = rules;
        }
        for d in &snapshot.services {
            registry.register_service(d.clone())?;
        }
        Ok(registry)
    }
}
