//! Code-execution tool.
//!
//! Two interchangeable backends: the in-process verb interpreter and a pool
//! of external worker processes reached over the framed stdio protocol.

pub mod builtin;
pub mod pool;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::imagekit::ImageBuffer;

pub use builtin::{builtin_parse, ParseError, Verb};
pub use pool::{WorkerConfig, WorkerPool};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub wall_time_secs: f64,
    pub memory_bytes: u64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            wall_time_secs: 10.0,
            memory_bytes: 512 * 1024 * 1024,
        }
    }
}

impl Limits {
    pub fn wall_time(&self) -> Duration {
        Duration::from_secs_f64(self.wall_time_secs.max(0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeRequest {
    pub code: String,
    pub input_images: Vec<(String, ImageBuffer)>,
    pub limits: Limits,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    RuntimeError,
    Timeout,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeResponse {
    pub status: ExecStatus,
    pub stdout: String,
    pub stderr: String,
    pub output_images: Vec<(String, ImageBuffer)>,
}

impl CodeResponse {
    pub fn failure(status: ExecStatus, stderr: String) -> Self {
        Self {
            status,
            stdout: String::new(),
            stderr,
            output_images: Vec::new(),
        }
    }
}

#[derive(Clone)]
pub enum CodeBackend {
    Builtin,
    Worker(Arc<WorkerPool>),
}

impl std::fmt::Debug for CodeBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodeBackend::Builtin => f.write_str("Builtin"),
            CodeBackend::Worker(p) => write!(f, "Worker({})", p.config().program),
        }
    }
}

pub fn execute(req: &CodeRequest, backend: &CodeBackend) -> CodeResponse {
    if req.code.trim().is_empty() {
        return CodeResponse::failure(ExecStatus::RuntimeError, "empty code".into());
    }
    match backend {
        CodeBackend::Builtin => builtin::run_script(req),
        CodeBackend::Worker(pool) => pool.execute(req),
    }
}
