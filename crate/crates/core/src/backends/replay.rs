use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult};

/// One cassette line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub fingerprint: String,
    pub request: CompletionRequest,
    pub result: CompletionResult,
}

/// Plays back recorded completions keyed by request fingerprint.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend {
    entries: HashMap<String, CompletionResult>,
    strict: bool,
    name: String,
}

impl ReplayBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = CassetteEntry>, strict: bool) -> Self {
        let mut map = HashMap::new();
        for e in entries {
            map.insert(e.fingerprint, e.result);
        }
        Self {
            entries: map,
            strict,
            name: "replay".into(),
        }
    }

    /// Later lines override earlier ones with the same fingerprint.
    pub fn load(path: &Path, strict: bool) -> Result<Self, BackendError> {
        let io = |e: &dyn std::fmt::Display| BackendError::Io(format!("{}: {e}", path.display()));
        let file = File::open(path).map_err(|e| io(&e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| io(&e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry =
                serde_json::from_str(&line).map_err(|e| io(&format!("line {}: {e}", n + 1)))?;
            entries.push(entry);
        }
        let mut backend = Self::from_entries(entries, strict);
        backend.name = format!("replay:{}", path.display());
        Ok(backend)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    /// Non-strict misses answer with empty text.
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let fp = request.fingerprint();
        match self.entries.get(&fp) {
            Some(r) => Ok(r.clone()),
            None if self.strict => Err(BackendError::CassetteMiss { fingerprint: fp }),
            None => Ok(CompletionResult {
                text: String::new(),
                latency_ms: 0,
                prompt_tokens: None,
                completion_tokens: None,
                backend_id: self.id(),
            }),
        }
    }

    fn id(&self) -> String {
        self.name.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptKind;

    fn entry(prompt: &str, text: &str) -> CassetteEntry {
        let request = CompletionRequest::new(prompt, PromptKind::DomainDetect, 8);
        CassetteEntry {
            fingerprint: request.fingerprint(),
            request,
            result: CompletionResult {
                text: text.into(),
                latency_ms: 3,
                prompt_tokens: Some(1),
                completion_tokens: Some(1),
                backend_id: "rec".into(),
            },
        }
    }

    #[test]
    fn playback_and_misses() {
        let b = ReplayBackend::from_entries([entry("P1", "hotel")], true);
        let req = CompletionRequest::new("P1", PromptKind::DomainDetect, 8);
        assert_eq!(b.complete(&req).unwrap().text, "hotel");
        let miss = CompletionRequest::new("P2", PromptKind::DomainDetect, 8);
        match b.complete(&miss) {
            Err(BackendError::CassetteMiss { fingerprint }) => assert_eq!(fingerprint, miss.fingerprint()),
            other => panic!("expected miss, got {other:?}"),
        }
        let lenient = ReplayBackend::from_entries([entry("P1", "hotel")], false);
        assert_eq!(lenient.complete(&miss).unwrap().text, "");
    }

    #[test]
    fn last_write_wins() {
        let b = ReplayBackend::from_entries([entry("P1", "hotel"), entry("P1", "taxi")], true);
        assert_eq!(b.len(), 1);
        let req = CompletionRequest::new("P1", PromptKind::DomainDetect, 8);
        assert_eq!(b.complete(&req).unwrap().text, "taxi");
    }
}
