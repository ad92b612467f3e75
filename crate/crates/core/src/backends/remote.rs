//! Client side of the `/v1` model-server protocol.
//!
//! Payloads travel as base64 of the canonical artifact encoding inside JSON
//! bodies. Application errors come back as HTTP 200 with `status: "error"`.

use std::collections::BTreeMap;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_outputs, BackendError, ParamSpec, Params, PortMap};
use crate::artifact::{Artifact, ArtifactType};
use crate::registry::{BackendBinding, Capability, InputPort, OutputPort, ServiceDescriptor};

/// Upper bound on a response body; large rasters in base64 are a few MB.
const MAX_BODY: u64 = 512 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireArtifact {
    #[serde(rename = "type")]
    pub artifact_type: ArtifactType,
    pub payload_b64: String,
}

impl WireArtifact {
    pub fn encode(a: &Artifact) -> Self {
        WireArtifact {
            artifact_type: a.artifact_type(),
            payload_b64: base64::engine::general_purpose::STANDARD.encode(a.encode_payload()),
        }
    }

    pub fn decode(&self) -> Result<Artifact, String> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.payload_b64)
            .map_err(|e| format!("bad base64: {e}"))?;
        Artifact::decode(self.artifact_type, &bytes).map_err(|e| e.to_string())
    }
}

pub fn encode_ports(ports: &PortMap) -> BTreeMap<String, WireArtifact> {
    ports.iter().map(|(k, a)| (k.clone(), WireArtifact::encode(a))).collect()
}

pub fn decode_ports(ports: &BTreeMap<String, WireArtifact>) -> Result<PortMap, String> {
    ports
        .iter()
        .map(|(k, w)| w.decode().map(|a| (k.clone(), a)).map_err(|e| format!("port `{k}`: {e}")))
        .collect()
}

/// Body of `GET /v1/descriptor`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteDescriptor {
    pub algorithm_id: String,
    pub capability: Capability,
    pub deterministic: bool,
    pub inputs: Vec<InputPort>,
    pub outputs: Vec<OutputPort>,
    #[serde(default)]
    pub parameters: BTreeMap<String, ParamSpec>,
}

impl RemoteDescriptor {
    /// Checks the advertised ports against `expected` (by default the
    /// capability's standard signature).
    pub fn check_signature(
        &self,
        expected: Option<(&[InputPort], &[OutputPort])>,
    ) -> Result<(), BackendError> {
        if self.outputs.is_empty() {
            return Err(BackendError::SignatureMismatch(format!(
                "`{}` advertises no output ports",
                self.algorithm_id
            )));
        }
        let standard = self.capability.signature();
        let (inputs, outputs) = expected.unwrap_or((&standard.0, &standard.1));
        if self.inputs != inputs || self.outputs != outputs {
            return Err(BackendError::SignatureMismatch(format!(
                "`{}` advertises ports that differ from the {} signature",
                self.algorithm_id, self.capability
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvokeRequest {
    pub capability: Capability,
    #[serde(default)]
    pub params: Params,
    pub inputs: BTreeMap<String, WireArtifact>,
}

/// Body of a `POST /v1/invoke` response.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum InvokeResponse {
    Ok { outputs: BTreeMap<String, WireArtifact> },
    Error { code: String, message: String },
}

fn endpoint(binding: &BackendBinding) -> Result<(&str, u64), BackendError> {
    match binding {
        BackendBinding::Remote { base_url, timeout_ms, .. } => Ok((base_url, *timeout_ms)),
        BackendBinding::Local { algorithm_id } => Err(BackendError::Fault {
            code: "NOT_REMOTE".into(),
            message: format!("binding to local algorithm `{algorithm_id}` is not remote"),
        }),
    }
}

fn agent(timeout_ms: u64) -> ureq::Agent {
    let config = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .http_status_as_error(false)
        .build();
    ureq::Agent::new_with_config(config)
}

fn transport_error(e: ureq::Error, timeout_ms: u64) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout(timeout_ms),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => {
            BackendError::Timeout(timeout_ms)
        }
        ureq::Error::Io(io) => BackendError::BackendUnreachable(io.to_string()),
        ureq::Error::HostNotFound | ureq::Error::ConnectionFailed => {
            BackendError::BackendUnreachable(e.to_string())
        }
        other => BackendError::ProtocolError(other.to_string()),
    }
}

fn read_body(
    response: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    timeout_ms: u64,
) -> Result<String, BackendError> {
    let mut response = response.map_err(|e| transport_error(e, timeout_ms))?;
    let status = response.status().as_u16();
    let body = response
        .body_mut()
        .with_config()
        .limit(MAX_BODY)
        .read_to_string()
        .map_err(|e| transport_error(e, timeout_ms))?;
    if status != 200 {
        return Err(BackendError::ProtocolError(format!("HTTP status {status}")));
    }
    Ok(body)
}

fn get(binding: &BackendBinding, path: &str) -> Result<String, BackendError> {
    let (base, timeout_ms) = endpoint(binding)?;
    read_body(agent(timeout_ms).get(&format!("{base}{path}")).call(), timeout_ms)
}

/// `GET /v1/health`.
pub fn health(binding: &BackendBinding) -> Result<(), BackendError> {
    let body = get(binding, "/v1/health")?;
    let v: Value = serde_json::from_str(&body).map_err(|e| BackendError::ProtocolError(e.to_string()))?;
    if v.get("status").and_then(Value::as_str) == Some("ok") {
        Ok(())
    } else {
        Err(BackendError::ProtocolError(format!("unexpected health body {body}")))
    }
}

/// Fetches and sanity-checks the server's self-description.
pub fn fetch_descriptor(binding: &BackendBinding) -> Result<RemoteDescriptor, BackendError> {
    let body = get(binding, "/v1/descriptor")?;
    let d: RemoteDescriptor =
        serde_json::from_str(&body).map_err(|e| BackendError::ProtocolError(e.to_string()))?;
    if d.outputs.is_empty() {
        return Err(BackendError::SignatureMismatch(format!(
            "`{}` advertises no output ports",
            d.algorithm_id
        )));
    }
    Ok(d)
}

/// Registration-time check that a remote service's server agrees with the
/// ports the descriptor declares.
pub fn verify_remote_service(descriptor: &ServiceDescriptor) -> Result<RemoteDescriptor, BackendError> {
    let remote = fetch_descriptor(&descriptor.backend)?;
    if remote.capability != descriptor.capability {
        return Err(BackendError::SignatureMismatch(format!(
            "server implements {}, service declares {}",
            remote.capability, descriptor.capability
        )));
    }
    remote.check_signature(Some((&descriptor.inputs, &descriptor.outputs)))?;
    Ok(remote)
}

pub fn invoke_remote(
    binding: &BackendBinding,
    capability: Capability,
    inputs: &PortMap,
    params: &Params,
) -> Result<PortMap, BackendError> {
    let (base, timeout_ms) = endpoint(binding)?;
    let request = InvokeRequest {
        capability,
        params: params.clone(),
        inputs: encode_ports(inputs),
    };
    let body = serde_json::to_string(&request).expect("request serializes");
    let response = agent(timeout_ms)
        .post(&format!("{base}/v1/invoke"))
        .header("content-type", "application/json")
        .send(body.as_bytes());
    let text = read_body(response, timeout_ms)?;
    match serde_json::from_str::<InvokeResponse>(&text) {
        Ok(InvokeResponse::Ok { outputs }) => {
            let outputs = decode_ports(&outputs).map_err(BackendError::ProtocolError)?;
            check_outputs(outputs, &capability.signature().1)
        }
        Ok(InvokeResponse::Error { code, message }) => Err(BackendError::RemoteFault { code, message }),
        Err(e) => Err(BackendError::ProtocolError(format!("unparseable response: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_port_is_unreachable() {
        let port = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .port();
        let binding = BackendBinding::remote(&format!("http://127.0.0.1:{port}"), 2000);
        assert!(matches!(
            fetch_descriptor(&binding),
            Err(BackendError::BackendUnreachable(_))
        ));
    }

    #[test]
    fn wire_artifact_round_trip() {
        let a = Artifact::text("studio");
        assert_eq!(WireArtifact::encode(&a).decode().unwrap(), a);
    }

    #[test]
    fn error_response_shape() {
        let r: InvokeResponse =
            serde_json::from_str(r#"{"status":"error","code":"OOM","message":"out of memory"}"#).unwrap();
        assert!(matches!(r, InvokeResponse::Error { code, .. } if code == "OOM"));
    }
}
