//! Few-shot example storage: embedding, seeded pool sampling, exact cosine
//! retrieval and negative-example corruption.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{DialogueHistory, Speaker};
use crate::fuzzy::normalize;
use crate::schema::DomainSchema;
use crate::state::{BeliefState, StateUpdate};

pub const DEFAULT_EMBEDDING_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding failed: {0}")]
    Embed(String),
    #[error("vector of length {got} does not match embedder dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("example `{0}` has no replaceable slot value")]
    Uncorruptible(String),
    #[error("store file {path}: {message}")]
    File { path: String, message: String },
}

pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, StoreError>;
    fn dimension(&self) -> usize;
    /// Identifies the implementation and its parameters in run manifests.
    fn id(&self) -> String;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// L2-normalized hashed character-trigram counts of the lowercased,
/// space-padded text.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_EMBEDDING_DIM)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, StoreError> {
        let padded: Vec<char> = format!(" {} ", text.to_lowercase()).chars().collect();
        let mut v = vec![0f32; self.dim];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            v[(fnv1a(buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(v)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("hashed-trigram-{}", self.dim)
    }
}

/// Remote embedding service. Sends `{"input": text, "model": model}` and
/// accepts `{"embedding": [...]}` or `{"data": [{"embedding": [...]}]}`.
pub struct HttpEmbedder {
    url: String,
    model: String,
    dim: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbedder {
    /// `api_key_env` names an environment variable holding a bearer token.
    pub fn new(url: &str, model: &str, dim: usize, api_key_env: Option<&str>) -> Result<Self, StoreError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| StoreError::Embed(e.to_string()))?;
        Ok(Self {
            url: url.to_string(),
            model: model.to_string(),
            dim,
            api_key: api_key_env.and_then(|k| std::env::var(k).ok()),
            client,
        })
    }
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f32>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingResponse {
    Flat { embedding: Vec<f32> },
    Data { data: Vec<EmbeddingItem> },
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f32>, StoreError> {
        let mut req = self
            .client
            .post(&self.url)
            .json(&serde_json::json!({"input": text, "model": self.model}));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| StoreError::Embed(e.to_string()))?;
        let body: EmbeddingResponse = resp.json().map_err(|e| StoreError::Embed(e.to_string()))?;
        let v = match body {
            EmbeddingResponse::Flat { embedding } => embedding,
            EmbeddingResponse::Data { mut data } if !data.is_empty() => data.swap_remove(0).embedding,
            EmbeddingResponse::Data { .. } => return Err(StoreError::Embed("empty data array".into())),
        };
        if v.len() != self.dim {
            return Err(StoreError::Dimension {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(v)
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("http:{}:{}", self.url, self.model)
    }
}

/// A gold-annotated turn offered to `build_store`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSnippet {
    pub dialogue_id: String,
    pub turn_index: usize,
    /// All domains of the source dialogue.
    pub dialogue_domains: Vec<String>,
    pub domain: String,
    pub context_key: String,
    pub gold_update: StateUpdate,
    pub gold_state: BeliefState,
    pub gold_response_delex: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredExample {
    /// `<dialogue id>#<turn index>`; negatives append `~neg`.
    pub id: String,
    pub domain: String,
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context_key: String,
    pub gold_update: StateUpdate,
    pub gold_state: BeliefState,
    pub gold_response_delex: String,
    pub key_vector: Vec<f32>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub negative: bool,
}

/// Speaker-labelled last `window - 1` history utterances plus the current
/// customer utterance, newline-separated.
pub fn make_context_key(history: &DialogueHistory, utterance: &str, window: usize) -> String {
    let window = window.max(1);
    let mut lines: Vec<String> = history
        .window(Some(window - 1))
        .iter()
        .map(|u| format!("{}: {}", u.speaker.label(), u.text))
        .collect();
    if window == 1 {
        lines.clear();
    }
    lines.push(format!("{}: {}", Speaker::Customer.label(), utterance));
    lines.join("\n")
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Values observed per slot, used to corrupt open (non-enumerated) slots.
pub type ValuePool = BTreeMap<String, BTreeSet<String>>;

#[derive(Clone)]
pub struct ContextStore {
    buckets: BTreeMap<String, Vec<StoredExample>>,
    embedder: Arc<dyn Embedder>,
}

impl fmt::Debug for ContextStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ContextStore")
            .field("embedder", &self.embedder.id())
            .field("buckets", &self.buckets.iter().map(|(d, v)| (d, v.len())).collect::<Vec<_>>())
            .finish()
    }
}

fn domain_stream(domain: &str) -> u64 {
    fnv1a(domain.as_bytes())
}

impl ContextStore {
    pub fn empty(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            buckets: BTreeMap::new(),
            embedder,
        }
    }

    /// Wraps already-embedded examples; vector lengths must match the embedder.
    pub fn from_examples(examples: Vec<StoredExample>, embedder: Arc<dyn Embedder>) -> Result<Self, StoreError> {
        let mut buckets: BTreeMap<String, Vec<StoredExample>> = BTreeMap::new();
        for ex in examples {
            if ex.key_vector.len() != embedder.dimension() {
                return Err(StoreError::Dimension {
                    expected: embedder.dimension(),
                    got: ex.key_vector.len(),
                });
            }
            buckets.entry(ex.domain.clone()).or_default().push(ex);
        }
        Ok(Self { buckets, embedder })
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn bucket(&self, domain: &str) -> &[StoredExample] {
        self.buckets.get(domain).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.buckets.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn examples(&self) -> impl Iterator<Item = &StoredExample> {
        self.buckets.values().flatten()
    }

    /// Top-`k` examples of `domain` by cosine similarity to the embedded key.
    /// Ties keep store order.
    pub fn retrieve(&self, key: &str, domain: &str, k: usize) -> Result<Vec<StoredExample>, StoreError> {
        let bucket = self.bucket(domain);
        if k == 0 || bucket.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.embedder.embed(key)?;
        Ok(self.rank(&q, domain, k).into_iter().map(|i| bucket[i].clone()).collect())
    }

    /// Indices into `bucket(domain)` of the `k` nearest keys to `query`.
    pub fn rank(&self, query: &[f32], domain: &str, k: usize) -> Vec<usize> {
        let bucket = self.bucket(domain);
        let mut scored: Vec<(usize, f64)> = bucket
            .iter()
            .enumerate()
            .map(|(i, ex)| (i, cosine(query, &ex.key_vector)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.into_iter().take(k).map(|(i, _)| i).collect()
    }

    /// Slot values seen in the domain's gold updates and states.
    pub fn value_pool(&self, domain: &str) -> ValuePool {
        let mut pool = ValuePool::new();
        for ex in self.bucket(domain) {
            let state_slots = ex.gold_state.domain(domain).into_iter().flatten();
            for (slot, value) in ex.gold_update.pairs.iter().chain(state_slots) {
                pool.entry(slot.clone()).or_default().insert(value.clone());
            }
        }
        pool
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<(), StoreError> {
        let err = |e: &dyn fmt::Display| StoreError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut w = BufWriter::new(File::create(path).map_err(|e| err(&e))?);
        for ex in self.examples() {
            let line = serde_json::to_string(ex).map_err(|e| err(&e))?;
            writeln!(w, "{line}").map_err(|e| err(&e))?;
        }
        w.flush().map_err(|e| err(&e))
    }

    pub fn load_jsonl(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, StoreError> {
        let err = |e: &dyn fmt::Display| StoreError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let reader = BufReader::new(File::open(path).map_err(|e| err(&e))?);
        let mut examples = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(|e| err(&e))?;
            if line.trim().is_empty() {
                continue;
            }
            examples.push(serde_json::from_str(&line).map_err(|e| err(&e))?);
        }
        Self::from_examples(examples, embedder)
    }
}

/// Samples up to `pool_size` single-domain snippets per domain and embeds
/// their context keys. Each domain draws from its own seeded stream, so a
/// domain's selection does not depend on which other domains are present.
pub fn build_store(
    snippets: &[ExampleSnippet],
    pool_size: usize,
    embedder: Arc<dyn Embedder>,
    seed: u64,
) -> Result<ContextStore, StoreError> {
    let mut by_domain: BTreeMap<&str, Vec<&ExampleSnippet>> = BTreeMap::new();
    for s in snippets {
        if s.dialogue_domains.len() == 1 && s.dialogue_domains[0] == s.domain {
            by_domain.entry(&s.domain).or_default().push(s);
        }
    }
    let mut examples = Vec::new();
    for (domain, candidates) in by_domain {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(domain_stream(domain));
        let take = pool_size.min(candidates.len());
        let mut picked = rand::seq::index::sample(&mut rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        for i in picked {
            let s = candidates[i];
            examples.push(StoredExample {
                id: format!("{}#{}", s.dialogue_id, s.turn_index),
                domain: s.domain.clone(),
                dialogue_id: s.dialogue_id.clone(),
                turn_index: s.turn_index,
                context_key: s.context_key.clone(),
                gold_update: s.gold_update.clone(),
                gold_state: s.gold_state.clone(),
                gold_response_delex: s.gold_response_delex.clone(),
                key_vector: embedder.embed(&s.context_key)?,
                negative: false,
            });
        }
    }
    ContextStore::from_examples(examples, embedder)
}

/// Replacement candidates for `slot`: the schema enumeration if any, else
/// the observed pool, minus values equal to `current` after normalization.
pub fn replacement_candidates(slot: &str, current: &str, schema: &DomainSchema, pool: &ValuePool) -> Vec<String> {
    let cur = normalize(current);
    let source: Vec<String> = match schema.slot(slot).and_then(|s| s.values.as_ref()) {
        Some(values) => values.clone(),
        None => pool.get(slot).map(|s| s.iter().cloned().collect()).unwrap_or_default(),
    };
    let mut seen = BTreeSet::new();
    source
        .into_iter()
        .filter(|v| normalize(v) != cur && seen.insert(normalize(v)))
        .collect()
}

/// A negative copy of `example` with one or more slot values swapped for
/// other valid values of the same slot.
pub fn corrupt_example(
    example: &StoredExample,
    schema: &DomainSchema,
    pool: &ValuePool,
    seed: u64,
) -> Result<StoredExample, StoreError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut replaceable: Vec<(&String, Vec<String>)> = example
        .gold_update
        .pairs
        .iter()
        .map(|(slot, value)| (slot, replacement_candidates(slot, value, schema, pool)))
        .filter(|(_, c)| !c.is_empty())
        .collect();
    if replaceable.is_empty() {
        return Err(StoreError::Uncorruptible(example.id.clone()));
    }
    replaceable.shuffle(&mut rng);
    let n = rng.gen_range(1..=replaceable.len());
    let mut out = example.clone();
    for (slot, candidates) in replaceable.into_iter().take(n) {
        let v = candidates[rng.gen_range(0..candidates.len())].clone();
        out.gold_update.pairs.insert(slot.clone(), v);
    }
    out.id = format!("{}~neg", example.id);
    out.negative = true;
    Ok(out)
}
