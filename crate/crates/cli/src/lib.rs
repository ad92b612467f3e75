//! HTTP gateway and command-line front end for the kolflow engine.

pub mod cli;
pub mod error;
pub mod gateway;
pub mod workspace;

pub use error::{ApiError, ErrorCode};
