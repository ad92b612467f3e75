//! Reference model server: wraps any [`Algorithm`] behind the `/v1`
//! protocol. Used by loopback tests and the `stub-server` CLI command.
//! Faults can be injected to exercise the client's error paths.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use super::remote::{decode_ports, encode_ports, InvokeRequest, InvokeResponse, RemoteDescriptor};
use super::{check_inputs, check_outputs, Algorithm, BackendError};
use crate::artifact::Artifact;

#[derive(Debug, Clone, Default)]
pub struct Faults {
    /// Sleep before answering `/v1/invoke`.
    pub delay_ms: u64,
    /// Answer every invoke with `status: "error"`.
    pub error: Option<(String, String)>,
    /// Answer every invoke with a body that is not JSON.
    pub garbage: bool,
    /// Replace the declared output with a text artifact.
    pub wrong_output_type: bool,
    /// Served verbatim from `/v1/descriptor`.
    pub descriptor_override: Option<Value>,
}

pub struct StubServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    invocations: Arc<AtomicUsize>,
    thread: Option<JoinHandle<()>>,
}

struct Handler {
    algorithm: Arc<dyn Algorithm>,
    faults: Faults,
    invocations: Arc<AtomicUsize>,
}

impl StubServer {
    /// Listens on an ephemeral loopback port.
    pub fn start(algorithm: Arc<dyn Algorithm>, faults: Faults) -> std::io::Result<Self> {
        Self::bind("127.0.0.1:0", algorithm, faults)
    }

    pub fn bind(addr: &str, algorithm: Arc<dyn Algorithm>, faults: Faults) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let stopping = Arc::new(AtomicBool::new(false));
        let invocations = Arc::new(AtomicUsize::new(0));
        let handler = Arc::new(Handler {
            algorithm,
            faults,
            invocations: invocations.clone(),
        });
        let thread = {
            let server = server.clone();
            let stopping = stopping.clone();
            std::thread::spawn(move || {
                while !stopping.load(Ordering::SeqCst) {
                    let request = match server.recv_timeout(Duration::from_millis(100)) {
                        Ok(Some(r)) => r,
                        Ok(None) => continue,
                        Err(_) => break,
                    };
                    let handler = handler.clone();
                    std::thread::spawn(move || handler.handle(request));
                }
            })
        };
        Ok(StubServer {
            server,
            addr,
            stopping,
            invocations,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Number of `/v1/invoke` requests received so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::SeqCst)
    }

    /// Blocks the calling thread until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn respond(request: tiny_http::Request, status: u16, body: String) {
    let header = tiny_http::Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = request.respond(
        tiny_http::Response::from_string(body)
            .with_status_code(status)
            .with_header(header),
    );
}

impl Handler {
    fn descriptor(&self) -> Value {
        if let Some(d) = &self.faults.descriptor_override {
            return d.clone();
        }
        let d = self.algorithm.descriptor();
        let (inputs, outputs) = d.capability.signature();
        serde_json::to_value(RemoteDescriptor {
            algorithm_id: d.algorithm_id.clone(),
            capability: d.capability,
            deterministic: d.deterministic,
            inputs,
            outputs,
            parameters: d.parameters.clone(),
        })
        .expect("descriptor serializes")
    }

    fn invoke(&self, body: &str) -> Result<InvokeResponse, BackendError> {
        let req: InvokeRequest =
            serde_json::from_str(body).map_err(|e| BackendError::MalformedInput(e.to_string()))?;
        let d = self.algorithm.descriptor();
        if req.capability != d.capability {
            return Err(BackendError::MalformedInput(format!(
                "this server implements {}, not {}",
                d.capability, req.capability
            )));
        }
        let inputs = decode_ports(&req.inputs).map_err(BackendError::MalformedInput)?;
        let (in_sig, out_sig) = d.capability.signature();
        check_inputs(&inputs, &in_sig)?;
        d.check_params(&req.params)?;
        let mut outputs = check_outputs(self.algorithm.run(&inputs, &req.params)?, &out_sig)?;
        if self.faults.wrong_output_type {
            for a in outputs.values_mut() {
                *a = Artifact::text("not an image");
            }
        }
        Ok(InvokeResponse::Ok { outputs: encode_ports(&outputs) })
    }

    fn handle(&self, mut request: tiny_http::Request) {
        let method = request.method().clone();
        let url = request.url().to_string();
        match (method, url.as_str()) {
            (tiny_http::Method::Get, "/v1/health") => {
                respond(request, 200, json!({"status": "ok"}).to_string())
            }
            (tiny_http::Method::Get, "/v1/descriptor") => {
                let body = self.descriptor().to_string();
                respond(request, 200, body)
            }
            (tiny_http::Method::Post, "/v1/invoke") => {
                self.invocations.fetch_add(1, Ordering::SeqCst);
                let mut body = String::new();
                if let Err(e) = request.as_reader().read_to_string(&mut body) {
                    respond(request, 400, json!({"status": "error", "code": "BAD_REQUEST", "message": e.to_string()}).to_string());
                    return;
                }
                if self.faults.delay_ms > 0 {
                    std::thread::sleep(Duration::from_millis(self.faults.delay_ms));
                }
                if self.faults.garbage {
                    respond(request, 200, "<<not json>>".to_string());
                    return;
                }
                let response = match &self.faults.error {
                    Some((code, message)) => InvokeResponse::Error {
                        code: code.clone(),
                        message: message.clone(),
                    },
                    None => self.invoke(&body).unwrap_or_else(|e| InvokeResponse::Error {
                        code: e.code().to_string(),
                        message: e.to_string(),
                    }),
                };
                respond(request, 200, serde_json::to_string(&response).expect("response serializes"))
            }
            _ => respond(request, 404, json!({"status": "error", "code": "NOT_FOUND", "message": url}).to_string()),
        }
    }
}
