use std::time::{Duration, Instant};

use kolflow_cli::gateway::{self, Config, ServerHandle};
use kolflow_cli::workspace::Workspace;
use kolflow_core::backends::mocks;
use kolflow_core::backends::remote::WireArtifact;
use kolflow_core::backends::stub::{Faults, StubServer};
use kolflow_core::samples::SampleInputs;
use kolflow_core::{Catalog, CapabilityQuery, Capability, ArtifactRef};
use serde_json::{json, Value};

struct Gateway {
    _dir: tempfile::TempDir,
    server: ServerHandle,
}

fn start(with_mocks: bool) -> Gateway {
    let dir = tempfile::tempdir().unwrap();
    let workspace = Workspace::open(&dir.path().join("store"), None).unwrap();
    let server = gateway::spawn(Config { bind: "127.0.0.1:0".into(), workspace, with_mocks, max_parallel: 1 }).unwrap();
    Gateway { _dir: dir, server }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

struct Reply {
    status: u16,
    content_type: String,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.body)))
    }

    fn text(&self) -> String {
        String::from_utf8(self.body.clone()).unwrap()
    }
}

impl Gateway {
    fn call(&self, method: &str, path: &str, body: Option<&str>) -> Reply {
        let url = format!("{}{path}", self.server.base_url());
        let a = agent();
        let response = match (method, body) {
            ("GET", _) => a.get(&url).call(),
            ("DELETE", _) => a.delete(&url).call(),
            ("POST", Some(b)) => a.post(&url).header("content-type", "application/json").send(b),
            ("POST", None) => a.post(&url).send_empty(),
            _ => unreachable!(),
        };
        let mut response = response.unwrap();
        let content_type = response
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string())
            .unwrap_or_default();
        let body = response.body_mut().with_config().limit(64 << 20).read_to_vec().unwrap();
        Reply { status: response.status().as_u16(), content_type, body }
    }

    fn upload_samples(&self) -> std::collections::BTreeMap<&'static str, ArtifactRef> {
        SampleInputs::generate()
            .by_role()
            .into_iter()
            .map(|(role, a)| {
                let body = serde_json::to_string(&WireArtifact::encode(a)).unwrap();
                let reply = self.call("POST", "/artifacts", Some(&body));
                assert_eq!(reply.status, 201, "{}", reply.text());
                (role, reply.json()["ref"].as_str().unwrap().parse().unwrap())
            })
            .collect()
    }

    fn chain_query(&self, services: &[(Capability, &str)]) -> String {
        let refs = self.upload_samples();
        let mut q = CapabilityQuery::new([
            Capability::Tryon,
            Capability::Makeup,
            Capability::Background,
            Capability::ObjectInteraction,
        ]);
        for role in ["identity", "garment", "makeup_ref", "background_spec", "object_ref"] {
            q = q.with_input(role, refs[role]);
        }
        for (c, id) in services {
            q.services.insert(*c, id.to_string());
        }
        serde_json::to_string(&q).unwrap()
    }

    fn wait_for(&self, run_id: &str, until: impl Fn(&Value) -> bool) -> Value {
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let record = self.call("GET", &format!("/runs/{run_id}"), None).json();
            if until(&record) {
                return record;
            }
            assert!(Instant::now() < deadline, "timed out: {record}");
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}

fn stub(id: &str, faults: Faults) -> StubServer {
    StubServer::start(Catalog::builtin().get(id).unwrap().clone(), faults).unwrap()
}

fn register_remote(g: &Gateway, id: &str, cap: &str, url: &str) -> Reply {
    let d = json!({
        "service_id": id, "capability": cap,
        "inputs": serde_json::to_value(cap.parse::<Capability>().unwrap().signature().0).unwrap(),
        "outputs": serde_json::to_value(cap.parse::<Capability>().unwrap().signature().1).unwrap(),
        "backend": { "kind": "remote", "base_url": url, "timeout_ms": 5000 }
    });
    g.call("POST", "/services", Some(&d.to_string()))
}

#[test]
fn service_listing() {
    assert_eq!(start(false).call("GET", "/services", None).json(), json!([]));
    let g = start(true);
    let services = g.call("GET", "/services", None).json();
    assert_eq!(services.as_array().unwrap().len(), 6);
    let makeup = g.call("GET", "/services?capability=makeup", None).json();
    assert_eq!(makeup.as_array().unwrap().len(), 1);
    let bad = g.call("GET", "/services?capability=hair", None);
    assert_eq!((bad.status, bad.json()["code"].as_str()), (400, Some("UNKNOWN_CAPABILITY")));
    let missing = g.call("GET", "/nope", None);
    assert_eq!(missing.status, 404);
}

#[test]
fn synthesize_is_byte_stable() {
    let g = start(true);
    let query = g.chain_query(&[]);
    let a = g.call("POST", "/pipelines/synthesize", Some(&query));
    let b = g.call("POST", "/pipelines/synthesize", Some(&query));
    assert_eq!(a.status, 200, "{}", a.text());
    assert_eq!(a.body, b.body);
    let doc = a.json();
    let ids: Vec<&str> = doc["spec"]["nodes"].as_array().unwrap().iter().map(|n| n["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["tryon", "makeup", "background", "object_interaction"]);
    assert_eq!(doc["spec_hash"].as_str().unwrap().len(), 64);

    let valid = g.call("POST", "/pipelines/validate", Some(&doc["spec"].to_string()));
    assert_eq!(valid.json()["spec_hash"], doc["spec_hash"]);

    let empty = start(false);
    let unsat = empty.call("POST", "/pipelines/synthesize", Some(&query));
    assert_eq!((unsat.status, unsat.json()["code"].as_str()), (422, Some("UNSATISFIABLE_QUERY")));
    let bad = g.call("POST", "/pipelines/synthesize", Some("{not json"));
    assert_eq!((bad.status, bad.json()["code"].as_str()), (400, Some("BAD_QUERY")));
}

#[test]
fn validate_reports_violations() {
    let g = start(true);
    let spec = json!({
        "nodes": [{"id": "a", "service": "makeup"}, {"id": "b", "service": "makeup"}],
        "edges": [
            {"from": "a", "from_port": "image", "to": "b", "to_port": "person"},
            {"from": "b", "from_port": "image", "to": "a", "to_port": "person"}
        ],
        "inputs": {}
    });
    let reply = g.call("POST", "/pipelines/validate", Some(&spec.to_string()));
    assert_eq!(reply.status, 422);
    let doc = reply.json();
    assert_eq!(doc["code"], "VALIDATION_FAILED");
    let kinds: Vec<&str> = doc["details"].as_array().unwrap().iter().map(|v| v["violation"].as_str().unwrap()).collect();
    assert!(kinds.contains(&"cycle_detected") && kinds.contains(&"unbound_port"), "{kinds:?}");
}

#[test]
fn run_events_follow_spec_order() {
    let g = start(true);
    let synth = g.call("POST", "/pipelines/synthesize", Some(&g.chain_query(&[]))).json();
    let started = g.call("POST", "/runs", Some(&json!({ "spec": synth["spec"] }).to_string()));
    assert_eq!(started.status, 202, "{}", started.text());
    let run_id = started.json()["run_id"].as_str().unwrap().to_string();

    let stream = g.call("GET", &format!("/runs/{run_id}/events"), None);
    assert!(stream.content_type.starts_with("text/event-stream"));
    let names: Vec<String> = stream
        .text()
        .lines()
        .filter_map(|l| l.strip_prefix("event: ").or_else(|| l.strip_prefix("event:")))
        .map(str::to_string)
        .collect();
    let data: Vec<Value> = stream
        .text()
        .lines()
        .filter_map(|l| l.strip_prefix("data: ").or_else(|| l.strip_prefix("data:")))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect();
    assert_eq!(names.first().map(String::as_str), Some("run_started"));
    assert_eq!(names.last().map(String::as_str), Some("run_finished"));
    let nodes: Vec<(&str, &str)> = data
        .iter()
        .filter(|d| d.get("node").is_some())
        .map(|d| (d["event"].as_str().unwrap(), d["node"].as_str().unwrap()))
        .collect();
    let mut expected = Vec::new();
    for n in ["tryon", "makeup", "background", "object_interaction"] {
        expected.push(("node_started", n));
        expected.push(("node_finished", n));
    }
    assert_eq!(nodes, expected);

    // Resuming from an offset replays only the tail.
    let tail = g.call("GET", &format!("/runs/{run_id}/events?from=9"), None).text();
    assert_eq!(tail.lines().filter(|l| l.starts_with("data:")).count(), 1);

    let record = g.call("GET", &format!("/runs/{run_id}"), None).json();
    assert_eq!(record["status"], "succeeded");
    let artifact = g.call("GET", &format!("/runs/{run_id}/artifacts/object_interaction/image"), None);
    assert_eq!((artifact.status, artifact.content_type.as_str()), (200, "image/png"));
    assert!(artifact.body.starts_with(b"\x89PNG"));

    let again = g.call("POST", &format!("/runs/{run_id}/cancel"), None);
    assert_eq!((again.status, again.json()["code"].as_str()), (409, Some("ALREADY_TERMINAL")));
    let unknown = g.call("GET", "/runs/nope", None);
    assert_eq!((unknown.status, unknown.json()["code"].as_str()), (404, Some("UNKNOWN_RUN")));
}

#[test]
fn intermediate_artifacts_while_running_and_failed_nodes() {
    let g = start(true);
    let slow = stub(mocks::BACKGROUND_ID, Faults { delay_ms: 1500, ..Faults::default() });
    assert_eq!(register_remote(&g, "slow_background", "background", &slow.base_url()).status, 201);
    let query = g.chain_query(&[(Capability::Background, "slow_background")]);
    let synth = g.call("POST", "/pipelines/synthesize", Some(&query)).json();
    let run_id = g.call("POST", "/runs", Some(&json!({ "spec": synth["spec"] }).to_string())).json()["run_id"]
        .as_str()
        .unwrap()
        .to_string();
    let record = g.wait_for(&run_id, |r| r["node_states"]["slow_background"]["state"] == "running");
    assert_eq!(record["node_states"]["tryon"]["state"], "succeeded");
    let early = g.call("GET", &format!("/runs/{run_id}/artifacts/tryon/image"), None);
    assert_eq!((early.status, early.content_type.as_str()), (200, "image/png"));
    let pending = g.call("GET", &format!("/runs/{run_id}/artifacts/object_interaction/image"), None);
    assert_eq!((pending.status, pending.json()["code"].as_str()), (404, Some("UNKNOWN_ARTIFACT")));

    let cancelled = g.call("POST", &format!("/runs/{run_id}/cancel"), None).json();
    assert_eq!(cancelled["status"], "cancelled");
    assert_eq!(cancelled["node_states"]["object_interaction"]["state"], "skipped");

    // A remote that answers with an error fails its node.
    let broken = stub(mocks::MAKEUP_ID, Faults { error: Some(("OOM".into(), "out of memory".into())), ..Faults::default() });
    assert_eq!(register_remote(&g, "broken_makeup", "makeup", &broken.base_url()).status, 201);
    let query = g.chain_query(&[(Capability::Makeup, "broken_makeup"), (Capability::Background, "background")]);
    let synth = g.call("POST", "/pipelines/synthesize", Some(&query)).json();
    assert!(synth.get("spec").is_some(), "{synth}");
    let started = g.call("POST", "/runs", Some(&json!({ "spec": synth["spec"] }).to_string()));
    let run_id = started.json()["run_id"].as_str().unwrap_or_else(|| panic!("{}", started.text())).to_string();
    let record = g.wait_for(&run_id, |r| r["status"] != "running");
    assert_eq!(record["status"], "failed");
    assert_eq!(record["node_states"]["broken_makeup"]["error"]["code"], "OOM");
    let failed = g.call("GET", &format!("/runs/{run_id}/artifacts/broken_makeup/image"), None);
    assert_eq!((failed.status, failed.json()["code"].as_str()), (404, Some("UNKNOWN_ARTIFACT")));
}

#[test]
fn inline_inputs_and_bad_runs() {
    let g = start(true);
    let s = SampleInputs::generate();
    let wire = |a| serde_json::to_value(WireArtifact::encode(a)).unwrap();
    let body = json!({
        "spec": {"nodes": [{"id": "m", "service": "makeup"}]},
        "inputs": {"m.person": wire(&s.identity), "m.makeup_ref": wire(&s.makeup_ref)},
        "options": {"params": {"m": {"seed": 4}}}
    });
    let run_id = g.call("POST", "/runs", Some(&body.to_string())).json()["run_id"].as_str().unwrap().to_string();
    assert_eq!(g.wait_for(&run_id, |r| r["status"] != "running")["status"], "succeeded");

    let invalid = g.call("POST", "/runs", Some(&json!({"spec": {"nodes": []}}).to_string()));
    assert_eq!((invalid.status, invalid.json()["code"].as_str()), (422, Some("VALIDATION_FAILED")));
    let paths = json!({"spec": {"nodes": [{"id": "m", "service": "makeup"}],
        "inputs": {"m.person": "/etc/passwd", "m.makeup_ref": "x.png"}}});
    let reply = g.call("POST", "/runs", Some(&paths.to_string()));
    assert_eq!(reply.status, 422);
    assert!(reply.text().contains("unresolved_input"));
    let garbage = g.call("POST", "/artifacts", Some(r#"{"type":"PersonImage","payload_b64":"AAAA"}"#));
    assert_eq!((garbage.status, garbage.json()["code"].as_str()), (400, Some("BAD_INPUT")));
}

#[test]
fn remote_registration_round_trip() {
    let g = start(true);
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dead = register_remote(&g, "ghost", "makeup", &format!("http://127.0.0.1:{port}"));
    assert_eq!((dead.status, dead.json()["code"].as_str()), (502, Some("BACKEND_UNREACHABLE")));

    let server = stub(mocks::MAKEUP_ID, Faults::default());
    let wrong = register_remote(&g, "wrong", "tryon", &server.base_url());
    assert_eq!((wrong.status, wrong.json()["code"].as_str()), (422, Some("SIGNATURE_MISMATCH")));
    assert_eq!(register_remote(&g, "makeup_remote", "makeup", &server.base_url()).status, 201);
    let dup = register_remote(&g, "makeup_remote", "makeup", &server.base_url());
    assert_eq!((dup.status, dup.json()["code"].as_str()), (409, Some("DUPLICATE_SERVICE")));

    let ambiguous = g.call("POST", "/pipelines/synthesize", Some(&g.chain_query(&[])));
    assert_eq!((ambiguous.status, ambiguous.json()["code"].as_str()), (409, Some("AMBIGUOUS_SERVICE")));
    assert_eq!(g.call("DELETE", "/services/makeup_remote", None).status, 200);
    let gone = g.call("DELETE", "/services/makeup_remote", None);
    assert_eq!((gone.status, gone.json()["code"].as_str()), (404, Some("UNKNOWN_SERVICE")));
    assert_eq!(g.call("POST", "/pipelines/synthesize", Some(&g.chain_query(&[]))).status, 200);
}

#[test]
fn registry_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let server = stub(mocks::MAKEUP_ID, Faults::default());
    let open = || Workspace::open(&dir.path().join("store"), None).unwrap();
    let g = Gateway {
        _dir: tempfile::tempdir().unwrap(),
        server: gateway::spawn(Config { bind: "127.0.0.1:0".into(), workspace: open(), with_mocks: true, max_parallel: 1 })
            .unwrap(),
    };
    assert_eq!(register_remote(&g, "makeup_remote", "makeup", &server.base_url()).status, 201);
    g.server.stop().unwrap();
    // Built-in services came from the flag, so only the remote one persists.
    let g = Gateway {
        _dir: tempfile::tempdir().unwrap(),
        server: gateway::spawn(Config { bind: "127.0.0.1:0".into(), workspace: open(), with_mocks: false, max_parallel: 1 })
            .unwrap(),
    };
    let ids: Vec<Value> = g.call("GET", "/services", None).json().as_array().unwrap().iter().map(|d| d["service_id"].clone()).collect();
    assert_eq!(ids, [json!("makeup_remote")]);
}

#[test]
fn occupied_port_is_a_bind_failure() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let workspace = Workspace::open(dir.path(), None).unwrap();
    let bind = taken.local_addr().unwrap().to_string();
    let err = gateway::spawn(Config { bind, workspace, with_mocks: false, max_parallel: 1 }).err().unwrap();
    assert_eq!(err.code.as_str(), "BIND_FAILURE");
}
