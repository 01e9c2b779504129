//! Text-completion backends.
//!
//! Every model is driven through [`CompletionBackend::complete`]. Chat APIs
//! receive the prompt as a single user message.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::PromptKind;

mod http;
mod record;
mod replay;

pub use http::{HttpBackend, HttpBackendConfig, WireStyle};
pub use record::RecordingBackend;
pub use replay::{CassetteEntry, ReplayBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub tag: PromptKind,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, tag: PromptKind, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            stop_sequences: Vec::new(),
            tag,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    /// May be empty.
    pub text: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
    pub backend_id: String,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("no recorded completion for fingerprint {fingerprint}")]
    CassetteMiss { fingerprint: String },
    #[error("cassette i/o: {0}")]
    Io(String),
    #[error("unexpected response: {0}")]
    InvalidResponse(String),
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
    fn id(&self) -> String;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }

    fn id(&self) -> String {
        (**self).id()
    }
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }

    fn id(&self) -> String {
        (**self).id()
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    max_tokens: u32,
    prompt: &'a str,
    stop_sequences: &'a [String],
    temperature: f64,
}

/// SHA-256 over the canonical JSON of prompt and sampling parameters.
/// The telemetry tag is not part of it.
pub fn fingerprint(request: &CompletionRequest) -> String {
    let canonical = serde_json::to_string(&FingerprintInput {
        max_tokens: request.max_tokens,
        prompt: &request.prompt,
        stop_sequences: &request.stop_sequences,
        temperature: request.temperature,
    })
    .expect("fingerprint input serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Answers from a closure; for tests and scripted demos.
pub struct FnBackend<F> {
    name: String,
    f: F,
}

impl<F> FnBackend<F>
where
    F: Fn(&CompletionRequest) -> String + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> fmt::Debug for FnBackend<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnBackend").field("name", &self.name).finish()
    }
}

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> String + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        Ok(CompletionResult {
            text: (self.f)(request),
            latency_ms: 0,
            prompt_tokens: None,
            completion_tokens: None,
            backend_id: self.id(),
        })
    }

    fn id(&self) -> String {
        format!("fn:{}", self.name)
    }
}
