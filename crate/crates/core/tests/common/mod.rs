//! Independent oracles and fixtures shared by the integration tests.
//!
//! Nothing here calls into the engine's algorithms for the quantity it
//! checks: orders are enumerated, fits are searched, pixels recomputed.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use kolflow_core::backends::{Backend, BackendError, DefaultBackend, Params, PortMap};
use kolflow_core::flow::port_path;
use kolflow_core::{
    builtin_registry, Artifact, ArtifactRef, ArtifactStore, ArtifactType, BackendBinding, Capability,
    Catalog, DependencyMatrix, Executor, InputSource, PipelineEdge, PipelineNode, PipelineSpec,
    Raster, Registry, Rule, ServiceDescriptor,
};
use rand::seq::SliceRandom;
use rand::Rng;

// ---------------------------------------------------------------------------
// Topological order oracle

/// Every ordering of `nodes` in which all edges point forward.
pub fn all_valid_orders(nodes: &[String], edges: &[(String, String)]) -> Vec<Vec<String>> {
    fn go(
        nodes: &[String],
        used: &mut Vec<bool>,
        prefix: &mut Vec<String>,
        out: &mut Vec<Vec<String>>,
    ) {
        if prefix.len() == nodes.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..nodes.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            prefix.push(nodes[i].clone());
            go(nodes, used, prefix, out);
            prefix.pop();
            used[i] = false;
        }
    }
    let mut perms = Vec::new();
    go(nodes, &mut vec![false; nodes.len()], &mut Vec::new(), &mut perms);
    perms.into_iter().filter(|p| is_valid_order(p, edges)).collect()
}

pub fn is_valid_order(order: &[String], edges: &[(String, String)]) -> bool {
    let pos: BTreeMap<&String, usize> = order.iter().enumerate().map(|(i, n)| (n, i)).collect();
    edges.iter().all(|(a, b)| pos[a] < pos[b])
}

/// Random DAG: a hidden random permutation orients every sampled pair.
pub fn random_dag(rng: &mut impl Rng, max_nodes: usize) -> (Vec<String>, Vec<(String, String)>) {
    let n = rng.random_range(1..=max_nodes);
    let mut ids = BTreeSet::new();
    while ids.len() < n {
        let len = rng.random_range(1..=3);
        let id: String = (0..len).map(|_| rng.random_range(b'a'..=b'e') as char).collect();
        ids.insert(id);
    }
    let mut nodes: Vec<String> = ids.into_iter().collect();
    nodes.shuffle(rng);
    let hidden = nodes.clone();
    let density: f64 = rng.random_range(0.0..0.7);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                edges.push((hidden[i].clone(), hidden[j].clone()));
            }
        }
    }
    edges.shuffle(rng);
    nodes.shuffle(rng);
    (nodes, edges)
}

/// True if consecutive ids in `cycle` (wrapping) are all edges.
pub fn is_cycle(cycle: &[String], edges: &[(String, String)]) -> bool {
    !cycle.is_empty()
        && (0..cycle.len()).all(|i| {
            let next = &cycle[(i + 1) % cycle.len()];
            edges.iter().any(|(a, b)| a == &cycle[i] && b == next)
        })
}

// ---------------------------------------------------------------------------
// Similarity oracle

pub fn apply(params: [f64; 4], p: [f64; 2]) -> [f64; 2] {
    let [s, th, tx, ty] = params;
    [
        s * th.cos() * p[0] - s * th.sin() * p[1] + tx,
        s * th.sin() * p[0] + s * th.cos() * p[1] + ty,
    ]
}

pub fn residual(params: [f64; 4], src: &[[f64; 2]], dst: &[[f64; 2]]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(x, y)| {
            let q = apply(params, *x);
            (q[0] - y[0]).powi(2) + (q[1] - y[1]).powi(2)
        })
        .sum()
}

fn best_translation(s: f64, th: f64, src: &[[f64; 2]], dst: &[[f64; 2]]) -> [f64; 2] {
    // For a fixed linear part the optimal translation is the mean offset.
    let n = src.len() as f64;
    let mut t = [0.0, 0.0];
    for (x, y) in src.iter().zip(dst) {
        let q = apply([s, th, 0.0, 0.0], *x);
        t[0] += (y[0] - q[0]) / n;
        t[1] += (y[1] - q[1]) / n;
    }
    t
}

/// Grid search over (scale, angle) followed by compass-search refinement.
/// Translation is profiled out as the mean offset at every probe. Returns
/// (scale, angle, tx, ty).
pub fn similarity_oracle(src: &[[f64; 2]], dst: &[[f64; 2]]) -> [f64; 4] {
    let profiled = |s: f64, th: f64| {
        let [tx, ty] = best_translation(s, th, src, dst);
        let p = [s, th, tx, ty];
        (residual(p, src, dst), p)
    };
    let mut best = (f64::INFINITY, [1.0, 0.0, 0.0, 0.0]);
    for i in 0..720 {
        let th = -std::f64::consts::PI + (i as f64 + 0.5) * std::f64::consts::TAU / 720.0;
        for k in 0..80 {
            let s = 0.1 * (50.0f64).powf(k as f64 / 79.0);
            let cand = profiled(s, th);
            if cand.0 < best.0 {
                best = cand;
            }
        }
    }
    let mut step = [0.05 * best.1[0], 0.01];
    while step[0] > 1e-14 || step[1] > 1e-14 {
        let mut improved = false;
        for d in 0..2 {
            for sign in [-1.0, 1.0] {
                let mut s = best.1[0];
                let mut th = best.1[1];
                if d == 0 {
                    s += sign * step[0];
                } else {
                    th += sign * step[1];
                }
                let cand = profiled(s, th);
                if s > 0.0 && cand.0 < best.0 {
                    best = cand;
                    improved = true;
                }
            }
        }
        if !improved {
            step[0] *= 0.5;
            step[1] *= 0.5;
        }
    }
    best.1
}

pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

/// Random landmark cloud, roughly face-sized.
pub fn random_points(rng: &mut impl Rng, n: usize) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [rng.random_range(20.0..230.0), rng.random_range(20.0..230.0)])
        .collect()
}

// ---------------------------------------------------------------------------
// Mock arithmetic oracles

/// FNV-1a over 32 bits, computed in 64-bit arithmetic with an explicit mask.
pub fn fnv1a_reference(bytes: &[u8]) -> u32 {
    let mut h: u64 = 2_166_136_261;
    for &b in bytes {
        h ^= b as u64;
        h = (h * 16_777_619) % (1u64 << 32);
    }
    h as u32
}

pub fn colour_reference(spec: &str) -> [u8; 3] {
    let h = fnv1a_reference(spec.as_bytes());
    [(h >> 16 & 0xff) as u8, (h >> 8 & 0xff) as u8, (h & 0xff) as u8]
}

pub fn nn_index(i: u32, src: u32, dst: u32) -> u32 {
    (i as f64 * src as f64 / dst as f64).floor() as u32
}

// ---------------------------------------------------------------------------
// Registry and pipeline fixtures

pub fn catalog() -> Arc<Catalog> {
    Arc::new(Catalog::builtin())
}

pub fn registry() -> Registry {
    builtin_registry(&Catalog::builtin())
}

/// The built-in registry with no dependency rules at all.
pub fn unordered_registry() -> Registry {
    let mut r = registry();
    r.replace_rules(DependencyMatrix::empty());
    r
}

pub fn store_samples(store: &ArtifactStore) -> BTreeMap<&'static str, ArtifactRef> {
    let s = kolflow_core::samples::SampleInputs::generate();
    s.by_role()
        .into_iter()
        .map(|(role, a)| (role, store.store(a).unwrap()))
        .collect()
}

pub fn sample_ref(t: ArtifactType) -> ArtifactRef {
    let s = kolflow_core::samples::SampleInputs::generate();
    ArtifactRef::of(&s.for_type(t).expect("sample exists"))
}

/// A pipeline over the four generative mocks shaped like a random forest:
/// each node's person input comes from an earlier node or the identity.
pub fn random_mock_forest(
    rng: &mut impl Rng,
    refs: &BTreeMap<&'static str, ArtifactRef>,
    max_nodes: usize,
) -> PipelineSpec {
    let services = [
        ("tryon", "garment"),
        ("makeup", "makeup_ref"),
        ("background", "background_spec"),
        ("object_interaction", "object_ref"),
    ];
    let n = rng.random_range(1..=max_nodes);
    let mut spec = PipelineSpec::default();
    for i in 0..n {
        let (service, ref_port) = services[rng.random_range(0..services.len())];
        let id = format!("n{i:02}");
        spec.nodes.push(PipelineNode { id: id.clone(), service: service.into() });
        let reference = refs[ref_port];
        spec.inputs.insert(port_path(&id, ref_port), InputSource::Ref(reference));
        if i > 0 && rng.random_bool(0.75) {
            let from = format!("n{:02}", rng.random_range(0..i));
            spec.edges.push(PipelineEdge {
                from,
                from_port: "image".into(),
                to: id,
                to_port: "person".into(),
            });
        } else {
            spec.inputs.insert(port_path(&id, "person"), InputSource::Ref(refs["identity"]));
        }
    }
    spec
}

// ---------------------------------------------------------------------------
// Adversarial edge suite

#[derive(Debug, Clone)]
pub struct EdgeCase {
    pub name: String,
    pub registry: Registry,
    pub spec: PipelineSpec,
    /// `None` for edges that must validate.
    pub expected: Option<&'static str>,
}

/// Two-node spec `a → b` over one edge, every other port source-bound.
pub fn two_node_spec(
    registry: &Registry,
    from: &ServiceDescriptor,
    from_port: &str,
    to: &ServiceDescriptor,
    to_port: &str,
) -> PipelineSpec {
    let mut spec = PipelineSpec {
        nodes: vec![
            PipelineNode { id: "a".into(), service: from.service_id.clone() },
            PipelineNode { id: "b".into(), service: to.service_id.clone() },
        ],
        edges: vec![PipelineEdge {
            from: "a".into(),
            from_port: from_port.into(),
            to: "b".into(),
            to_port: to_port.into(),
        }],
        inputs: BTreeMap::new(),
    };
    for (node, d) in [("a", from), ("b", to)] {
        for p in &registry.service(&d.service_id).unwrap().inputs {
            if node == "b" && p.port == to_port {
                continue;
            }
            spec.inputs
                .insert(port_path(node, &p.port), InputSource::Ref(any_ref(p.artifact_type)));
        }
    }
    spec
}

/// Some reference of type `t`; validation never dereferences it.
pub fn any_ref(t: ArtifactType) -> ArtifactRef {
    ArtifactRef { artifact_type: t, digest: kolflow_core::Digest::of(t.name().as_bytes()) }
}

/// Forbidden pairs, type mismatches and the complementary valid edges.
pub fn adversarial_edge_suite() -> Vec<EdgeCase> {
    let base = unordered_registry();
    let services = base.list_services(None);
    let mut cases = Vec::new();

    // Every ordered capability pair, forbidden, over a type-correct PersonImage edge.
    for from in &services {
        for to in &services {
            let mut r = base.clone();
            r.set_dependency_rule((from.capability, to.capability), Rule::Forbidden).unwrap();
            let out = from.outputs.iter().find(|o| o.artifact_type == ArtifactType::PersonImage).unwrap();
            let inp = to.inputs.iter().find(|i| i.artifact_type == ArtifactType::PersonImage).unwrap();
            let spec = two_node_spec(&r, from, &out.port, to, &inp.port);
            cases.push(EdgeCase {
                name: format!("forbidden {}.{} -> {}.{}", from.service_id, out.port, to.service_id, inp.port),
                registry: r,
                spec,
                expected: Some("FORBIDDEN_PAIR"),
            });
        }
    }

    // Every output/input port pair whose types differ, and every pair that agrees.
    for from in &services {
        for to in &services {
            for out in &from.outputs {
                for inp in &to.inputs {
                    let spec = two_node_spec(&base, from, &out.port, to, &inp.port);
                    let (expected, kind) = if out.artifact_type == inp.artifact_type {
                        (None, "valid")
                    } else {
                        (Some("TYPE_MISMATCH"), "mismatch")
                    };
                    cases.push(EdgeCase {
                        name: format!("{kind} {}.{} -> {}.{}", from.service_id, out.port, to.service_id, inp.port),
                        registry: base.clone(),
                        spec,
                        expected,
                    });
                }
            }
        }
    }
    cases
}

// ---------------------------------------------------------------------------
// Backends with controllable behaviour

/// Wraps the default backend, adding per-service latency, failures and a
/// record of invocation order.
pub struct ScriptedBackend {
    inner: DefaultBackend,
    pub delay: BTreeMap<String, Duration>,
    pub fail: BTreeSet<String>,
    pub jitter_ms: u64,
    pub invoked: Mutex<Vec<String>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend {
            inner: DefaultBackend::new(catalog()),
            delay: BTreeMap::new(),
            fail: BTreeSet::new(),
            jitter_ms: 0,
            invoked: Mutex::new(Vec::new()),
        }
    }
}

impl Backend for ScriptedBackend {
    fn invoke(
        &self,
        descriptor: &ServiceDescriptor,
        inputs: &PortMap,
        params: &Params,
    ) -> Result<PortMap, BackendError> {
        self.invoked.lock().unwrap().push(descriptor.service_id.clone());
        if let Some(d) = self.delay.get(&descriptor.service_id) {
            std::thread::sleep(*d);
        }
        if self.jitter_ms > 0 {
            let ms = rand::rng().random_range(0..=self.jitter_ms);
            std::thread::sleep(Duration::from_millis(ms));
        }
        if self.fail.contains(&descriptor.service_id) {
            return Err(BackendError::Fault { code: "INJECTED".into(), message: "scripted failure".into() });
        }
        self.inner.invoke(descriptor, inputs, params)
    }
}

/// Always returns a BackgroundSpec, whatever the declared outputs.
pub struct WrongTypeBackend;

impl Backend for WrongTypeBackend {
    fn invoke(&self, d: &ServiceDescriptor, _: &PortMap, _: &Params) -> Result<PortMap, BackendError> {
        let outputs = d.outputs.iter().map(|o| (o.port.clone(), Artifact::text("oops"))).collect();
        kolflow_core::backends::check_outputs(outputs, &d.outputs)
    }
}

pub fn executor_with(backend: Arc<dyn Backend>) -> (tempfile::TempDir, Executor) {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::open(dir.path().join("store")).unwrap();
    let exec = Executor::new(store, dir.path().join("runs"), backend);
    (dir, exec)
}

pub fn four_chain_query(refs: &BTreeMap<&'static str, ArtifactRef>) -> kolflow_core::CapabilityQuery {
    let mut q = kolflow_core::CapabilityQuery::new([
        Capability::Tryon,
        Capability::Makeup,
        Capability::Background,
        Capability::ObjectInteraction,
    ]);
    for role in ["identity", "garment", "makeup_ref", "background_spec", "object_ref"] {
        q = q.with_input(role, refs[role]);
    }
    q
}

/// Remote twin of a built-in service bound to `base_url`.
pub fn remote_service(service_id: &str, capability: Capability, base_url: &str) -> ServiceDescriptor {
    ServiceDescriptor::standard(service_id, capability, BackendBinding::remote(base_url, 5_000))
}

pub fn rgb(w: u32, h: u32, v: [u8; 3]) -> Raster {
    Raster::filled(w, h, &v)
}
