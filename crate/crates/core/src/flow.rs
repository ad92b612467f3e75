//! Pipeline synthesis: capability queries become validated DAGs.
//!
//! Synthesis picks one service per requested capability, orders the nodes
//! by the registry's `before` rules (Kahn's algorithm, lexicographically
//! smallest ready node first), then binds every input port to the nearest
//! upstream output of the same type, falling back to externally provided
//! artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::artifact::{ArtifactType, Digest};
use crate::registry::{Capability, Compatibility, Incompatibility, Registry, Rule};
use crate::store::ArtifactRef;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowError {
    #[error("cycle detected among nodes {0:?}")]
    CycleDetected(Vec<String>),
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
    #[error("unsatisfiable query: {0}")]
    UnsatisfiableQuery(Unsatisfiable),
    #[error("capability {capability} is provided by several services {candidates:?}; name one")]
    AmbiguousService {
        capability: Capability,
        candidates: Vec<String>,
    },
    #[error("dependency rules admit no order for {0:?}")]
    CyclicConstraints(Vec<Capability>),
    #[error("no producer or external input for {node}.{port}")]
    UnboundPort { node: String, port: String },
    #[error("several external inputs of type {artifact_type} could feed {node}.{port}")]
    AmbiguousExternalInput {
        node: String,
        port: String,
        artifact_type: ArtifactType,
    },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("synthesized pipeline failed validation: {0:?}")]
    Invalid(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unsatisfiable {
    MissingCapability(Capability),
    UnknownService { capability: Capability, service_id: String },
    MissingInput { node: String, port: String, artifact_type: ArtifactType },
}

impl fmt::Display for Unsatisfiable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Unsatisfiable::MissingCapability(c) => write!(f, "no registered service provides {c}"),
            Unsatisfiable::UnknownService { capability, service_id } => {
                write!(f, "service `{service_id}` chosen for {capability} is not registered for it")
            }
            Unsatisfiable::MissingInput { node, port, artifact_type } => {
                write!(f, "missing {port} ({artifact_type}) required by {node}")
            }
        }
    }
}

/// Topological order via Kahn's algorithm; among ready nodes the
/// lexicographically smallest id is emitted first.
pub fn topological_order(nodes: &[String], edges: &[(String, String)]) -> Result<Vec<String>, FlowError> {
    let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for (a, b) in edges {
        let ia = *index.get(a.as_str()).ok_or_else(|| FlowError::UnknownNode(a.clone()))?;
        let ib = *index.get(b.as_str()).ok_or_else(|| FlowError::UnknownNode(b.clone()))?;
        succ[ia].insert(ib);
    }
    let mut indegree = vec![0usize; nodes.len()];
    for s in &succ {
        for &b in s {
            indegree[b] += 1;
        }
    }
    let mut ready: BTreeSet<(&str, usize)> = (0..nodes.len())
        .filter(|&i| indegree[i] == 0)
        .map(|i| (nodes[i].as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(nodes[i].clone());
        for &b in &succ[i] {
            indegree[b] -= 1;
            if indegree[b] == 0 {
                ready.insert((nodes[b].as_str(), b));
            }
        }
    }
    if order.len() == nodes.len() {
        return Ok(order);
    }
    Err(FlowError::CycleDetected(find_cycle(nodes, &succ, &indegree)))
}

/// Extracts one cycle among the nodes Kahn's algorithm could not emit.
fn find_cycle(nodes: &[String], succ: &[BTreeSet<usize>], indegree: &[usize]) -> Vec<String> {
    let stuck: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] > 0).collect();
    // Every stuck node has a stuck predecessor, so walking predecessors must repeat.
    let mut pred: Vec<Option<usize>> = vec![None; nodes.len()];
    for &a in &stuck {
        for &b in &succ[a] {
            if stuck.contains(&b) && pred[b].is_none() {
                pred[b] = Some(a);
            }
        }
    }
    let start = *stuck.iter().next().expect("a cycle leaves stuck nodes");
    let mut seen = BTreeMap::new();
    let mut path = Vec::new();
    let mut cur = start;
    while !seen.contains_key(&cur) {
        seen.insert(cur, path.len());
        path.push(cur);
        cur = pred[cur].expect("stuck node has a stuck predecessor");
    }
    let mut cycle: Vec<usize> = path[seen[&cur]..].to_vec();
    cycle.reverse();
    let min = (0..cycle.len()).min_by_key(|&i| &nodes[cycle[i]]).unwrap_or(0);
    cycle.rotate_left(min);
    cycle.into_iter().map(|i| nodes[i].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PipelineNode {
    pub id: String,
    pub service: String,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PipelineEdge {
    pub from: String,
    pub from_port: String,
    pub to: String,
    pub to_port: String,
}

/// An external input: a stored artifact, or a file path still to be imported.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputSource {
    Ref(ArtifactRef),
    Path(String),
}

impl fmt::Display for InputSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputSource::Ref(r) => r.fmt(f),
            InputSource::Path(p) => f.write_str(p),
        }
    }
}

impl FromStr for InputSource {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.parse::<ArtifactRef>() {
            Ok(r) => InputSource::Ref(r),
            Err(_) => InputSource::Path(s.to_string()),
        })
    }
}

impl Serialize for InputSource {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InputSource {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(s.parse().expect("infallible"))
    }
}

/// `node.port` key of a source binding.
pub fn port_path(node: &str, port: &str) -> String {
    format!("{node}.{port}")
}

pub fn split_port_path(path: &str) -> Option<(&str, &str)> {
    path.split_once('.').filter(|(n, p)| !n.is_empty() && !p.is_empty())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub nodes: Vec<PipelineNode>,
    #[serde(default)]
    pub edges: Vec<PipelineEdge>,
    /// Source bindings keyed by `node.port`.
    #[serde(default)]
    pub inputs: BTreeMap<String, InputSource>,
}

impl PipelineSpec {
    pub fn to_canonical_json(&self) -> String {
        crate::canonical::to_string(self)
    }

    pub fn spec_hash(&self) -> Digest {
        Digest::of(self.to_canonical_json().as_bytes())
    }

    /// Parses a pipeline document, also accepting `{"spec": {...}, "spec_hash": ...}`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("spec") {
            Some(inner) if value.get("nodes").is_none() => serde_json::from_value(inner.clone()),
            _ => serde_json::from_value(value),
        }
    }

    pub fn node(&self, id: &str) -> Option<&PipelineNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Node ids that feed `node_id` through an edge.
    pub fn predecessors(&self, node_id: &str) -> BTreeSet<&str> {
        self.edges
            .iter()
            .filter(|e| e.to == node_id)
            .map(|e| e.from.as_str())
            .collect()
    }

    pub fn source_refs(&self) -> impl Iterator<Item = (&String, &ArtifactRef)> {
        self.inputs.iter().filter_map(|(k, v)| match v {
            InputSource::Ref(r) => Some((k, r)),
            InputSource::Path(_) => None,
        })
    }
}

/// One problem found by [`validate_pipeline`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum Violation {
    EmptyPipeline,
    DuplicateNode { node: String },
    UnknownService { node: String, service: String },
    UnknownNode { node: String },
    UnknownPort { node: String, port: String },
    CycleDetected { nodes: Vec<String> },
    TypeMismatch { edge: PipelineEdge, from_type: ArtifactType, to_type: ArtifactType },
    ForbiddenPair { edge: PipelineEdge, from_capability: Capability, to_capability: Capability },
    UnboundPort { node: String, port: String },
    DoubleBound { node: String, port: String },
    NotTopological { edge: PipelineEdge },
    OrderRuleViolated { first: String, second: String },
    InputTypeMismatch { node: String, port: String, expected: ArtifactType, found: ArtifactType },
    UnresolvedInput { node: String, port: String },
    BadPortPath { key: String },
}

impl Violation {
    /// Stable machine code.
    pub fn code(&self) -> &'static str {
        match self {
            Violation::EmptyPipeline => "EMPTY_PIPELINE",
            Violation::DuplicateNode { .. } => "DUPLICATE_NODE",
            Violation::UnknownService { .. } => "UNKNOWN_SERVICE",
            Violation::UnknownNode { .. } => "UNKNOWN_NODE",
            Violation::UnknownPort { .. } => "UNKNOWN_PORT",
            Violation::CycleDetected { .. } => "CYCLE_DETECTED",
            Violation::TypeMismatch { .. } => "TYPE_MISMATCH",
            Violation::ForbiddenPair { .. } => "FORBIDDEN_PAIR",
            Violation::UnboundPort { .. } => "UNBOUND_PORT",
            Violation::DoubleBound { .. } => "DOUBLE_BOUND",
            Violation::NotTopological { .. } => "NOT_TOPOLOGICAL",
            Violation::OrderRuleViolated { .. } => "ORDER_RULE_VIOLATED",
            Violation::InputTypeMismatch { .. } => "INPUT_TYPE_MISMATCH",
            Violation::UnresolvedInput { .. } => "UNRESOLVED_INPUT",
            Violation::BadPortPath { .. } => "BAD_PORT_PATH",
        }
    }
}

/// Checks every structural, typing and ordering rule; returns all violations.
pub fn validate_pipeline(spec: &PipelineSpec, registry: &Registry) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if spec.nodes.is_empty() {
        v.push(Violation::EmptyPipeline);
    }

    let mut position: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if position.insert(n.id.as_str(), i).is_some() {
            v.push(Violation::DuplicateNode { node: n.id.clone() });
        }
        if registry.get(&n.service).is_none() {
            v.push(Violation::UnknownService {
                node: n.id.clone(),
                service: n.service.clone(),
            });
        }
    }
    let descriptor = |node: &str| {
        spec.node(node).and_then(|n| registry.get(&n.service))
    };

    let mut bound: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut graph_edges = Vec::new();
    for e in &spec.edges {
        let mut ok = true;
        for node in [&e.from, &e.to] {
            if !position.contains_key(node.as_str()) {
                v.push(Violation::UnknownNode { node: node.clone() });
                ok = false;
            }
        }
        if !ok {
            continue;
        }
        graph_edges.push((e.from.clone(), e.to.clone()));
        *bound.entry((e.to.clone(), e.to_port.clone())).or_default() += 1;
        if position[e.from.as_str()] >= position[e.to.as_str()] {
            v.push(Violation::NotTopological { edge: e.clone() });
        }
        let (Some(from), Some(to)) = (descriptor(&e.from), descriptor(&e.to)) else {
            continue;
        };
        if from.output(&e.from_port).is_none() {
            v.push(Violation::UnknownPort { node: e.from.clone(), port: e.from_port.clone() });
            continue;
        }
        if to.input(&e.to_port).is_none() {
            v.push(Violation::UnknownPort { node: e.to.clone(), port: e.to_port.clone() });
            continue;
        }
        match registry.check_edge((&from.service_id, &e.from_port), (&to.service_id, &e.to_port)) {
            Ok(Compatibility::Compatible) => {}
            Ok(Compatibility::Incompatible(Incompatibility::TypeMismatch { from, to })) => {
                v.push(Violation::TypeMismatch { edge: e.clone(), from_type: from, to_type: to })
            }
            Ok(Compatibility::Incompatible(Incompatibility::ForbiddenPair { from, to })) => {
                v.push(Violation::ForbiddenPair {
                    edge: e.clone(),
                    from_capability: from,
                    to_capability: to,
                })
            }
            Err(_) => {}
        }
    }

    for (key, source) in &spec.inputs {
        let Some((node, port)) = split_port_path(key) else {
            v.push(Violation::BadPortPath { key: key.clone() });
            continue;
        };
        if !position.contains_key(node) {
            v.push(Violation::UnknownNode { node: node.to_string() });
            continue;
        }
        *bound.entry((node.to_string(), port.to_string())).or_default() += 1;
        let Some(d) = descriptor(node) else { continue };
        let Some(p) = d.input(port) else {
            v.push(Violation::UnknownPort { node: node.to_string(), port: port.to_string() });
            continue;
        };
        match source {
            InputSource::Ref(r) if r.artifact_type != p.artifact_type => {
                v.push(Violation::InputTypeMismatch {
                    node: node.to_string(),
                    port: port.to_string(),
                    expected: p.artifact_type,
                    found: r.artifact_type,
                })
            }
            InputSource::Path(_) => v.push(Violation::UnresolvedInput {
                node: node.to_string(),
                port: port.to_string(),
            }),
            InputSource::Ref(_) => {}
        }
    }

    for n in &spec.nodes {
        let Some(d) = registry.get(&n.service) else { continue };
        for p in &d.inputs {
            match bound.get(&(n.id.clone(), p.port.clone())).copied().unwrap_or(0) {
                0 if p.required => v.push(Violation::UnboundPort {
                    node: n.id.clone(),
                    port: p.port.clone(),
                }),
                0 | 1 => {}
                _ => v.push(Violation::DoubleBound {
                    node: n.id.clone(),
                    port: p.port.clone(),
                }),
            }
        }
    }

    let ids: Vec<String> = spec.nodes.iter().map(|n| n.id.clone()).collect();
    if let Err(FlowError::CycleDetected(nodes)) = topological_order(&ids, &graph_edges) {
        v.push(Violation::CycleDetected { nodes });
    }

    // `before` rules: a later node's capability must not be required to precede an earlier one.
    let caps: Vec<Option<Capability>> = spec
        .nodes
        .iter()
        .map(|n| registry.get(&n.service).map(|d| d.capability))
        .collect();
    for i in 0..spec.nodes.len() {
        for j in i + 1..spec.nodes.len() {
            if let (Some(ci), Some(cj)) = (caps[i], caps[j]) {
                if registry.rules().get(cj, ci) == Rule::Before {
                    v.push(Violation::OrderRuleViolated {
                        first: spec.nodes[j].id.clone(),
                        second: spec.nodes[i].id.clone(),
                    });
                }
            }
        }
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

/// Binds every input port of `nodes` (already in execution order).
///
/// Producers are searched from the nearest upstream node backwards; only
/// type-equal, compatible output ports qualify. Ports without a producer
/// are bound to the unique external artifact of the port's type.
pub fn bind_io(
    nodes: &[PipelineNode],
    registry: &Registry,
    provided: &[ArtifactRef],
) -> Result<(Vec<PipelineEdge>, BTreeMap<String, InputSource>), FlowError> {
    let mut edges = Vec::new();
    let mut inputs = BTreeMap::new();
    for (i, node) in nodes.iter().enumerate() {
        let consumer = registry
            .get(&node.service)
            .ok_or_else(|| FlowError::UnknownNode(node.id.clone()))?;
        for port in &consumer.inputs {
            let upstream = nodes[..i].iter().rev().find_map(|prev| {
                let producer = registry.get(&prev.service)?;
                producer
                    .outputs
                    .iter()
                    .find(|out| {
                        out.artifact_type == port.artifact_type
                            && registry
                                .check_edge((&producer.service_id, &out.port), (&consumer.service_id, &port.port))
                                == Ok(Compatibility::Compatible)
                    })
                    .map(|out| PipelineEdge {
                        from: prev.id.clone(),
                        from_port: out.port.clone(),
                        to: node.id.clone(),
                        to_port: port.port.clone(),
                    })
            });
            if let Some(edge) = upstream {
                edges.push(edge);
                continue;
            }
            let mut externals: Vec<&ArtifactRef> = provided
                .iter()
                .filter(|r| r.artifact_type == port.artifact_type)
                .collect();
            externals.dedup();
            match externals.as_slice() {
                [one] => {
                    inputs.insert(port_path(&node.id, &port.port), InputSource::Ref(**one));
                }
                [] if port.required => {
                    return Err(FlowError::UnboundPort {
                        node: node.id.clone(),
                        port: port.port.clone(),
                    })
                }
                [] => {}
                _ => {
                    return Err(FlowError::AmbiguousExternalInput {
                        node: node.id.clone(),
                        port: port.port.clone(),
                        artifact_type: port.artifact_type,
                    })
                }
            }
        }
    }
    Ok((edges, inputs))
}

/// Well-known roles for externally provided inputs.
pub const INPUT_ROLES: [(&str, ArtifactType); 6] = [
    ("identity", ArtifactType::PersonImage),
    ("garment", ArtifactType::GarmentRef),
    ("makeup_ref", ArtifactType::MakeupRef),
    ("background_spec", ArtifactType::BackgroundSpec),
    ("object_ref", ArtifactType::ObjectRef),
    ("landmarks", ArtifactType::LandmarkSet),
];

pub fn role_type(role: &str) -> Option<ArtifactType> {
    INPUT_ROLES.iter().find(|(r, _)| *r == role).map(|(_, t)| *t)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CapabilityQuery {
    pub capabilities: BTreeSet<Capability>,
    #[serde(default)]
    pub align_faces: bool,
    /// role → stored artifact (roles listed in [`INPUT_ROLES`]).
    #[serde(default)]
    pub provided_inputs: BTreeMap<String, ArtifactRef>,
    /// Explicit service choice per capability, needed when several exist.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub services: BTreeMap<Capability, String>,
}

impl CapabilityQuery {
    pub fn new(capabilities: impl IntoIterator<Item = Capability>) -> Self {
        CapabilityQuery {
            capabilities: capabilities.into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn with_input(mut self, role: &str, reference: ArtifactRef) -> Self {
        self.provided_inputs.insert(role.to_string(), reference);
        self
    }

    pub fn aligned(mut self) -> Self {
        self.align_faces = true;
        self
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.capabilities.is_empty() {
            return Err(FlowError::InvalidQuery("no capabilities requested".into()));
        }
        for (role, r) in &self.provided_inputs {
            let expected = role_type(role)
                .ok_or_else(|| FlowError::InvalidQuery(format!("unknown input role `{role}`")))?;
            if r.artifact_type != expected {
                return Err(FlowError::InvalidQuery(format!(
                    "input `{role}` must be {expected}, got {}",
                    r.artifact_type
                )));
            }
        }
        Ok(())
    }
}

/// Builds a validated pipeline for `query` over the registered services.
pub fn synthesize_pipeline(query: &CapabilityQuery, registry: &Registry) -> Result<PipelineSpec, FlowError> {
    query.validate()?;
    let mut caps = query.capabilities.clone();
    if query.align_faces {
        caps.insert(Capability::FaceExtractAlign);
        caps.insert(Capability::FaceReintegrate);
    }

    let mut chosen: BTreeMap<Capability, String> = BTreeMap::new();
    for &cap in &caps {
        let service_id = match query.services.get(&cap) {
            Some(id) => match registry.get(id) {
                Some(d) if d.capability == cap => id.clone(),
                _ => {
                    return Err(FlowError::UnsatisfiableQuery(Unsatisfiable::UnknownService {
                        capability: cap,
                        service_id: id.clone(),
                    }))
                }
            },
            None => {
                let candidates: Vec<String> = registry
                    .list_services(Some(cap))
                    .into_iter()
                    .map(|d| d.service_id)
                    .collect();
                match candidates.as_slice() {
                    [] => return Err(FlowError::UnsatisfiableQuery(Unsatisfiable::MissingCapability(cap))),
                    [one] => one.clone(),
                    _ => return Err(FlowError::AmbiguousService { capability: cap, candidates }),
                }
            }
        };
        chosen.insert(cap, service_id);
    }

    let ids: Vec<String> = chosen.values().cloned().collect();
    let constraints: Vec<(String, String)> = registry
        .rules()
        .before_pairs()
        .filter_map(|(a, b)| Some((chosen.get(&a)?.clone(), chosen.get(&b)?.clone())))
        .collect();
    let order = topological_order(&ids, &constraints).map_err(|e| match e {
        FlowError::CycleDetected(_) => FlowError::CyclicConstraints(caps.iter().copied().collect()),
        other => other,
    })?;

    let nodes: Vec<PipelineNode> = order
        .into_iter()
        .map(|id| PipelineNode { service: id.clone(), id })
        .collect();
    let provided: Vec<ArtifactRef> = query.provided_inputs.values().copied().collect();
    let (edges, inputs) = bind_io(&nodes, registry, &provided).map_err(|e| match e {
        FlowError::UnboundPort { node, port } => {
            let artifact_type = registry
                .get(&node)
                .and_then(|d| d.input(&port))
                .map(|p| p.artifact_type)
                .expect("bound node exists");
            FlowError::UnsatisfiableQuery(Unsatisfiable::MissingInput { node, port, artifact_type })
        }
        other => other,
    })?;

    let spec = PipelineSpec { nodes, edges, inputs };
    validate_pipeline(&spec, registry).map_err(FlowError::Invalid)?;
    Ok(spec)
}
