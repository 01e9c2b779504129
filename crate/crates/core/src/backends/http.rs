use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResult};

/// Request/response shape of the remote API.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireStyle {
    /// `{"prompt": ...}` answered by `choices[0].text`.
    #[default]
    Completion,
    /// `{"messages": [{"role": "user", ...}]}` answered by `choices[0].message.content`.
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub path: String,
    pub style: WireStyle,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    pub auth_header: String,
    /// Prefix before the key in the auth header, e.g. `Bearer`. Empty for none.
    pub auth_scheme: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_concurrency: usize,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000".into(),
            path: "/v1/completions".into(),
            style: WireStyle::Completion,
            model: None,
            api_key_env: None,
            auth_header: "Authorization".into(),
            auth_scheme: "Bearer".into(),
            timeout_secs: 60,
            max_retries: 3,
            backoff_base_ms: 500,
            max_concurrency: 4,
        }
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|p| p.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|p| p.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    slots: Semaphore,
}

enum Attempt {
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::Auth(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let permits = config.max_concurrency.max(1);
        Ok(Self {
            config,
            api_key,
            client,
            slots: Semaphore {
                permits: Mutex::new(permits),
                cv: Condvar::new(),
            },
        })
    }

    fn url(&self) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), self.config.path)
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = match self.config.style {
            WireStyle::Completion => json!({ "prompt": request.prompt }),
            WireStyle::Chat => json!({ "messages": [{ "role": "user", "content": request.prompt }] }),
        };
        body["max_tokens"] = json!(request.max_tokens);
        body["temperature"] = json!(request.temperature);
        if !request.stop_sequences.is_empty() {
            body["stop"] = json!(request.stop_sequences);
        }
        if let Some(model) = &self.config.model {
            body["model"] = json!(model);
        }
        body
    }

    fn extract(&self, body: &Value) -> Result<(String, Option<u64>, Option<u64>), BackendError> {
        let choice = &body["choices"][0];
        let text = match self.config.style {
            WireStyle::Completion => choice["text"].as_str(),
            WireStyle::Chat => choice["message"]["content"].as_str(),
        }
        .ok_or_else(|| BackendError::InvalidResponse(format!("no completion text in {body}")))?;
        let usage = &body["usage"];
        Ok((
            text.to_string(),
            usage["prompt_tokens"].as_u64(),
            usage["completion_tokens"].as_u64(),
        ))
    }

    fn attempt(&self, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            let value = if self.config.auth_scheme.is_empty() {
                key.clone()
            } else {
                format!("{} {key}", self.config.auth_scheme)
            };
            req = req.header(self.config.auth_header.as_str(), value);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(Attempt::Fatal(BackendError::Auth(status.to_string())));
        }
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(status.to_string()));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Attempt::Fatal(BackendError::Transport(format!("{status}: {text}"))));
        }
        resp.json::<Value>()
            .map_err(|e| Attempt::Fatal(BackendError::InvalidResponse(e.to_string())))
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let _permit = self.slots.acquire();
        let body = self.body(request);
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self.config.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::warn!("retrying completion after {wait} ms: {last}");
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Ok(json) => {
                    let (text, prompt_tokens, completion_tokens) = self.extract(&json)?;
                    return Ok(CompletionResult {
                        text,
                        latency_ms: start.elapsed().as_millis() as u64,
                        prompt_tokens,
                        completion_tokens,
                        backend_id: self.id(),
                    });
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::Transport(format!(
            "giving up after {} attempts: {last}",
            self.config.max_retries + 1
        )))
    }

    fn id(&self) -> String {
        match &self.config.model {
            Some(m) => format!("http:{}:{m}", self.url()),
            None => format!("http:{}", self.url()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptKind;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves canned responses in order, one per connection; returns the
    /// base URL and a log of received request bodies.
    fn stub(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<Value>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let seen = log.clone();
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                seen.lock().unwrap().push(serde_json::from_slice(&buf).unwrap());
                let resp = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (url, log)
    }

    fn backend(url: &str, style: WireStyle, retries: u32) -> HttpBackend {
        HttpBackend::new(HttpBackendConfig {
            base_url: url.into(),
            style,
            model: Some("m".into()),
            max_retries: retries,
            backoff_base_ms: 1,
            timeout_secs: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn completion_style() {
        let (url, log) = stub(vec![(
            200,
            r#"{"choices":[{"text":"hotel"}],"usage":{"prompt_tokens":12,"completion_tokens":1}}"#.into(),
        )]);
        let b = backend(&url, WireStyle::Completion, 0);
        let r = b.complete(&CompletionRequest::new("P1", PromptKind::DomainDetect, 8)).unwrap();
        assert_eq!(r.text, "hotel");
        assert_eq!((r.prompt_tokens, r.completion_tokens), (Some(12), Some(1)));
        let sent = &log.lock().unwrap()[0];
        assert_eq!(sent["prompt"], "P1");
        assert_eq!(sent["max_tokens"], 8);
        assert_eq!(sent["model"], "m");
    }

    #[test]
    fn chat_style_with_retry() {
        let (url, log) = stub(vec![
            (503, "{}".into()),
            (429, "{}".into()),
            (200, r#"{"choices":[{"message":{"role":"assistant","content":"taxi"}}]}"#.into()),
        ]);
        let b = backend(&url, WireStyle::Chat, 3);
        let r = b.complete(&CompletionRequest::new("P2", PromptKind::DomainDetect, 8)).unwrap();
        assert_eq!(r.text, "taxi");
        assert_eq!(r.prompt_tokens, None);
        let log = log.lock().unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log[0]["messages"][0]["content"], "P2");
    }

    #[test]
    fn gives_up_and_auth_fails_fast() {
        let (url, _) = stub(vec![(500, "{}".into()), (500, "{}".into())]);
        let b = backend(&url, WireStyle::Completion, 1);
        let err = b.complete(&CompletionRequest::new("P", PromptKind::State, 8)).unwrap_err();
        assert!(matches!(err, BackendError::Transport(_)), "{err}");

        let (url, log) = stub(vec![(401, "{}".into())]);
        let b = backend(&url, WireStyle::Completion, 3);
        let err = b.complete(&CompletionRequest::new("P", PromptKind::State, 8)).unwrap_err();
        assert!(matches!(err, BackendError::Auth(_)));
        assert_eq!(log.lock().unwrap().len(), 1);
    }

    #[test]
    fn unreachable_host_is_transport_error() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let b = backend(&format!("http://127.0.0.1:{port}"), WireStyle::Completion, 1);
        assert!(matches!(
            b.complete(&CompletionRequest::new("P", PromptKind::State, 8)),
            Err(BackendError::Transport(_))
        ));
    }

    #[test]
    fn missing_key_env_is_auth_error() {
        let cfg = HttpBackendConfig {
            api_key_env: Some("TOD_TEST_SURELY_UNSET_KEY".into()),
            ..Default::default()
        };
        assert!(matches!(HttpBackend::new(cfg), Err(BackendError::Auth(_))));
    }

    #[test]
    fn concurrency_cap_is_respected() {
        let sem = Arc::new(Semaphore {
            permits: Mutex::new(2),
            cv: Condvar::new(),
        });
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (sem, active, peak) = (sem.clone(), active.clone(), peak.clone());
                thread::spawn(move || {
                    let _p = sem.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
