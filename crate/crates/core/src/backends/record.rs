use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use super::{BackendError, CassetteEntry, CompletionBackend, CompletionRequest, CompletionResult};

/// Forwards to a live backend and appends every exchange to a cassette.
pub struct RecordingBackend<B> {
    inner: B,
    out: Mutex<BufWriter<File>>,
}

impl<B: CompletionBackend> RecordingBackend<B> {
    pub fn new(inner: B, cassette: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(cassette)
            .map_err(|e| BackendError::Io(format!("{}: {e}", cassette.display())))?;
        Ok(Self {
            inner,
            out: Mutex::new(BufWriter::new(file)),
        })
    }
}

impl<B: CompletionBackend> CompletionBackend for RecordingBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let result = self.inner.complete(request)?;
        let entry = CassetteEntry {
            fingerprint: request.fingerprint(),
            request: request.clone(),
            result: result.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| BackendError::Io(e.to_string()))?;
        let mut out = self.out.lock().unwrap_or_else(|p| p.into_inner());
        writeln!(out, "{line}")
            .and_then(|_| out.flush())
            .map_err(|e| BackendError::Io(e.to_string()))?;
        Ok(result)
    }

    fn id(&self) -> String {
        self.inner.id()
    }
}
