//! The closed set of API error codes and the mapping from engine errors.

use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use kolflow_core::flow::Unsatisfiable;
use kolflow_core::{BackendError, ExecError, FlowError, RegistryError, StoreError, Violation};
use serde::Serialize;
use serde_json::Value;

macro_rules! codes {
    ($($variant:ident = ($status:literal, $name:literal)),* $(,)?) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum ErrorCode { $($variant),* }

        impl ErrorCode {
            pub const ALL: &'static [ErrorCode] = &[$(ErrorCode::$variant),*];

            pub fn http_status(self) -> u16 {
                match self { $(ErrorCode::$variant => $status),* }
            }

            pub fn as_str(self) -> &'static str {
                match self { $(ErrorCode::$variant => $name),* }
            }
        }
    };
}

codes! {
    BadRequest = (400, "BAD_REQUEST"),
    BadQuery = (400, "BAD_QUERY"),
    BadInput = (400, "BAD_INPUT"),
    BadParams = (400, "BAD_PARAMS"),
    InvalidOptions = (400, "INVALID_OPTIONS"),
    InvalidDescriptor = (400, "INVALID_DESCRIPTOR"),
    UnknownAlgorithm = (400, "UNKNOWN_ALGORITHM"),
    UnknownCapability = (400, "UNKNOWN_CAPABILITY"),
    UnknownPort = (400, "UNKNOWN_PORT"),
    NotFound = (404, "NOT_FOUND"),
    UnknownService = (404, "UNKNOWN_SERVICE"),
    UnknownRun = (404, "UNKNOWN_RUN"),
    UnknownArtifact = (404, "UNKNOWN_ARTIFACT"),
    AmbiguousService = (409, "AMBIGUOUS_SERVICE"),
    DuplicateService = (409, "DUPLICATE_SERVICE"),
    ConflictingRule = (409, "CONFLICTING_RULE"),
    AlreadyTerminal = (409, "ALREADY_TERMINAL"),
    UnsatisfiableQuery = (422, "UNSATISFIABLE_QUERY"),
    CycleDetected = (422, "CYCLE_DETECTED"),
    ValidationFailed = (422, "VALIDATION_FAILED"),
    SignatureMismatch = (422, "SIGNATURE_MISMATCH"),
    RunFailed = (500, "RUN_FAILED"),
    StoreUnavailable = (500, "STORE_UNAVAILABLE"),
    IntegrityError = (500, "INTEGRITY_ERROR"),
    BadConfig = (500, "BAD_CONFIG"),
    BindFailure = (500, "BIND_FAILURE"),
    Internal = (500, "INTERNAL"),
    BackendUnreachable = (502, "BACKEND_UNREACHABLE"),
    ProtocolError = (502, "PROTOCOL_ERROR"),
    RemoteFault = (502, "REMOTE_FAULT"),
    BackendFault = (502, "BACKEND_FAULT"),
    BackendTimeout = (504, "BACKEND_TIMEOUT"),
}

impl std::fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ErrorCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into(), details: None }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = Some(details);
        self
    }

    pub fn http_status(&self) -> u16 {
        self.code.http_status()
    }

    /// `{"code", "message", "details"?, "http_status"}`
    pub fn to_document(&self) -> Value {
        let mut doc = serde_json::to_value(self).expect("error serializes");
        doc["http_status"] = self.http_status().into();
        doc
    }

    pub fn validation(violations: &[Violation]) -> Self {
        let codes: Vec<&str> = violations.iter().map(|v| v.code()).collect();
        ApiError::new(ErrorCode::ValidationFailed, format!("pipeline is invalid: {}", codes.join(", ")))
            .with_details(serde_json::to_value(violations).expect("violations serialize"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, axum::Json(self.to_document())).into_response()
    }
}

impl From<FlowError> for ApiError {
    fn from(e: FlowError) -> Self {
        let message = e.to_string();
        let code = match &e {
            FlowError::CycleDetected(_) | FlowError::CyclicConstraints(_) => ErrorCode::CycleDetected,
            FlowError::UnknownNode(_) => ErrorCode::UnknownService,
            FlowError::UnsatisfiableQuery(Unsatisfiable::UnknownService { .. }) => ErrorCode::UnknownService,
            FlowError::UnsatisfiableQuery(_) | FlowError::UnboundPort { .. } => ErrorCode::UnsatisfiableQuery,
            FlowError::AmbiguousService { .. } => ErrorCode::AmbiguousService,
            FlowError::AmbiguousExternalInput { .. } | FlowError::InvalidQuery(_) => ErrorCode::BadQuery,
            FlowError::Invalid(v) => return ApiError::validation(v),
        };
        ApiError::new(code, message)
    }
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> Self {
        let code = match &e {
            RegistryError::DuplicateServiceId(_) => ErrorCode::DuplicateService,
            RegistryError::InvalidDescriptor(_) => ErrorCode::InvalidDescriptor,
            RegistryError::UnknownAlgorithmId(_) => ErrorCode::UnknownAlgorithm,
            RegistryError::UnknownService(_) => ErrorCode::UnknownService,
            RegistryError::UnknownPort { .. } => ErrorCode::UnknownPort,
            RegistryError::ConflictingRule { .. } => ErrorCode::ConflictingRule,
            RegistryError::UnknownCapability(_) => ErrorCode::UnknownCapability,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<BackendError> for ApiError {
    fn from(e: BackendError) -> Self {
        let code = match &e {
            BackendError::UnknownAlgorithm(_) => ErrorCode::UnknownAlgorithm,
            BackendError::BadParams(_) => ErrorCode::BadParams,
            BackendError::MalformedInput(_) => ErrorCode::BadInput,
            BackendError::OutputTypeMismatch { .. } | BackendError::MissingOutput(_) | BackendError::Fault { .. } => {
                ErrorCode::BackendFault
            }
            BackendError::BackendUnreachable(_) => ErrorCode::BackendUnreachable,
            BackendError::Timeout(_) => ErrorCode::BackendTimeout,
            BackendError::ProtocolError(_) => ErrorCode::ProtocolError,
            BackendError::RemoteFault { .. } => ErrorCode::RemoteFault,
            BackendError::SignatureMismatch(_) => ErrorCode::SignatureMismatch,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<ExecError> for ApiError {
    fn from(e: ExecError) -> Self {
        let code = match &e {
            ExecError::ValidationFailed(v) => return ApiError::validation(v),
            ExecError::StoreUnavailable(_) => ErrorCode::StoreUnavailable,
            ExecError::UnknownRun(_) => ErrorCode::UnknownRun,
            ExecError::AlreadyTerminal { .. } => ErrorCode::AlreadyTerminal,
            ExecError::UnknownArtifact { .. } => ErrorCode::UnknownArtifact,
            ExecError::InvalidOptions(_) => ErrorCode::InvalidOptions,
        };
        ApiError::new(code, e.to_string())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let code = match &e {
            StoreError::Io { .. } => ErrorCode::StoreUnavailable,
            StoreError::HashCollisionMismatch(_) | StoreError::HashMismatch(_) => ErrorCode::IntegrityError,
            StoreError::NotFound(_) => ErrorCode::UnknownArtifact,
            StoreError::TypeMismatch { .. } | StoreError::InvalidRef(_) => ErrorCode::BadInput,
        };
        ApiError::new(code, e.to_string())
    }
}
