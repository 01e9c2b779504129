//! Per-turn orchestration: detect domain, retrieve examples, track state,
//! query the database and generate a delexicalized response.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, CompletionBackend, CompletionRequest};
use crate::config::{ConfigError, PipelineConfig};
use crate::context_store::{corrupt_example, make_context_key, ContextStore, StoreError, StoredExample};
use crate::database::{booking_reference, external_result, lexicalize, Database, DbResult};
use crate::dialogue::{Dialogue, DialogueHistory, ProvidedResults, Turn};
use crate::parsing::{extract_placeholders, parse_domain_output, parse_state_output_with, sanitize_response};
use crate::prompts::{
    render_domain_prompt, render_response_prompt, render_state_prompt, DbRendering, FewShot, PromptKind,
    RenderedPrompt, TemplateError, TemplateSet,
};
use crate::schema::{find, DomainSchema};
use crate::state::{apply_state_update, BeliefState, StateUpdate};

/// Entities kept in turn records; the count always reflects all matches.
const RECORDED_ENTITIES: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("{kind} call failed: {source}")]
    Backend {
        kind: &'static str,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("oracle {0} requested but the turn carries no gold annotation")]
    MissingOracle(&'static str),
    #[error("no schema for domain `{0}`")]
    UnknownDomain(String),
    #[error("corpus has no domains")]
    NoDomains,
}

/// One backend exchange.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub kind: PromptKind,
    pub prompt: String,
    pub fingerprint: String,
    pub completion: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

/// Full audit of one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn_index: usize,
    pub utterance: String,
    pub domain: String,
    pub calls: Vec<CallRecord>,
    /// Ids of retrieved positive examples.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<String>,
    /// `None` when the belief came from the oracle.
    pub update: Option<StateUpdate>,
    pub belief: BeliefState,
    pub db: Option<DbResult>,
    pub response_raw: String,
    pub response: String,
    pub placeholders: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicalized: Option<String>,
    pub warnings: Vec<String>,
}

impl TurnRecord {
    pub fn call(&self, kind: PromptKind) -> Option<&CallRecord> {
        self.calls.iter().find(|c| c.kind == kind)
    }
}

/// Gold annotations available to oracle modes and DB routing.
#[derive(Debug, Clone, Default)]
pub struct GoldInputs {
    pub domain: Option<String>,
    pub state: Option<BeliefState>,
    /// Dataset-provided DB results; when set the database is not queried.
    pub provided_results: Option<ProvidedResults>,
    /// Text to place in the history instead of the generated reply.
    pub history_reply: Option<String>,
}

impl GoldInputs {
    pub fn from_turn(turn: &Turn) -> Self {
        Self {
            domain: turn.gold_domain.clone(),
            state: turn.gold_state.clone(),
            provided_results: turn.provided_results.clone(),
            history_reply: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub history: DialogueHistory,
    pub belief: BeliefState,
    pub active_domain: Option<String>,
    pub turns: usize,
    /// Put lexicalized replies into the history (live chat).
    #[serde(default)]
    pub lexicalize_history: bool,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Default::default()
        }
    }
}

/// Seed for the `index`-th corruption of a turn.
pub fn corruption_seed(seed: u64, session: &str, turn: usize, index: usize) -> u64 {
    let digest = Sha256::digest(format!("{seed}\u{0}{session}\u{0}{turn}\u{0}{index}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Shared, read-only resources for running turns.
#[derive(Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub templates: Arc<TemplateSet>,
    pub schemas: Arc<Vec<DomainSchema>>,
    pub backend: Arc<dyn CompletionBackend>,
    pub store: Option<Arc<ContextStore>>,
    pub database: Option<Arc<Database>>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("variant", &self.config.variant_label())
            .field("backend", &self.backend.id())
            .finish()
    }
}

struct Calls<'a> {
    backend: &'a dyn CompletionBackend,
    config: &'a PipelineConfig,
    records: Vec<CallRecord>,
}

impl Calls<'_> {
    fn run(&mut self, prompt: &RenderedPrompt) -> Result<String, PipelineError> {
        let t = &self.config.max_tokens;
        let max_tokens = match prompt.kind {
            PromptKind::DomainDetect => t.domain_detect,
            PromptKind::State => t.state,
            PromptKind::Response => t.response,
        };
        let mut req = CompletionRequest::new(prompt.text.clone(), prompt.kind, max_tokens);
        req.temperature = self.config.temperature;
        let result = self
            .backend
            .complete(&req)
            .map_err(|source| PipelineError::Backend {
                kind: prompt.kind.as_str(),
                source,
            })?;
        self.records.push(CallRecord {
            kind: prompt.kind,
            prompt: prompt.text.clone(),
            fingerprint: req.fingerprint(),
            completion: result.text.clone(),
            latency_ms: result.latency_ms,
            prompt_tokens: result.prompt_tokens,
            completion_tokens: result.completion_tokens,
        });
        Ok(result.text)
    }
}

impl Pipeline {
    pub fn domain_names(&self) -> Vec<String> {
        if self.config.domains.is_empty() {
            self.schemas.iter().map(|s| s.name.clone()).collect()
        } else {
            self.config
                .domains
                .iter()
                .filter(|d| find(&self.schemas, d).is_some())
                .cloned()
                .collect()
        }
    }

    fn schema(&self, domain: &str) -> Result<&DomainSchema, PipelineError> {
        find(&self.schemas, domain).ok_or_else(|| PipelineError::UnknownDomain(domain.to_string()))
    }

    fn db_rendering(&self) -> DbRendering {
        if self.config.db_include_top_entity {
            DbRendering::CountAndTopEntity
        } else {
            DbRendering::CountOnly
        }
    }

    /// Runs one turn. The session is only modified when the turn succeeds.
    pub fn run_turn(
        &self,
        session: &mut Session,
        utterance: &str,
        gold: &GoldInputs,
    ) -> Result<TurnRecord, PipelineError> {
        let cfg = &self.config;
        let domains = self.domain_names();
        if domains.is_empty() {
            return Err(PipelineError::NoDomains);
        }
        let mut warnings: Vec<String> = Vec::new();
        let mut calls = Calls {
            backend: self.backend.as_ref(),
            config: cfg,
            records: Vec::new(),
        };

        let domain = if cfg.oracle_domain {
            gold.domain.clone().ok_or(PipelineError::MissingOracle("domain"))?
        } else {
            let prompt = render_domain_prompt(
                &self.templates,
                &session.history,
                utterance,
                &domains,
                cfg.history_window,
            )?;
            let text = calls.run(&prompt)?;
            let parsed = parse_domain_output(&text, &domains, session.active_domain.as_deref());
            warnings.extend(parsed.warning_tags().into_iter().map(|w| format!("domain:{w}")));
            parsed.value
        };
        let schema = self.schema(&domain)?;

        let (positives, negatives) = self.examples(session, utterance, schema, &mut warnings)?;

        let (belief, update) = if cfg.oracle_state {
            let gold_state = gold.state.clone().ok_or(PipelineError::MissingOracle("state"))?;
            (gold_state, None)
        } else {
            let few_shot = FewShot {
                positives: &positives,
                negatives: &negatives,
            };
            let prompt = render_state_prompt(
                &self.templates,
                schema,
                &session.history,
                utterance,
                few_shot,
                cfg.history_window,
            )?;
            let text = calls.run(&prompt)?;
            let parsed = parse_state_output_with(&text, schema, cfg.fuzzy_threshold);
            warnings.extend(parsed.warning_tags().into_iter().map(|w| format!("state:{w}")));
            let known: Vec<&str> = self.schemas.iter().map(|s| s.name.as_str()).collect();
            let belief = apply_state_update(&session.belief, &parsed.value, &known)
                .map_err(|e| PipelineError::UnknownDomain(e.to_string()))?;
            (belief, Some(parsed.value))
        };

        let db = self.query_db(&domain, &belief, schema, gold, &mut warnings);
        let prompt = render_response_prompt(
            &self.templates,
            schema,
            &session.history,
            utterance,
            &belief,
            db.as_ref(),
            &positives,
            cfg.history_window,
            self.db_rendering(),
        )?;
        let raw = calls.run(&prompt)?;
        let sanitized = sanitize_response(&raw);
        warnings.extend(sanitized.warning_tags().into_iter().map(|w| format!("response:{w}")));
        let response = sanitized.value;
        let placeholders = extract_placeholders(&response);

        let lexicalized = if session.lexicalize_history {
            let mut extras = BTreeMap::new();
            extras.insert("reference".to_string(), booking_reference(&session.id, &domain));
            let (text, unresolved) = lexicalize(&response, db.as_ref().and_then(DbResult::top), &extras);
            warnings.extend(unresolved);
            Some(text)
        } else {
            None
        };

        let reply_for_history = gold
            .history_reply
            .clone()
            .or_else(|| lexicalized.clone())
            .unwrap_or_else(|| response.clone());
        let record = TurnRecord {
            turn_index: session.turns,
            utterance: utterance.to_string(),
            domain: domain.clone(),
            calls: calls.records,
            provenance: positives.iter().map(|e| e.id.clone()).collect(),
            negatives: negatives.iter().map(|e| e.id.clone()).collect(),
            update,
            belief: belief.clone(),
            db: db.map(|d| d.truncated(RECORDED_ENTITIES)),
            response_raw: raw,
            response,
            placeholders,
            lexicalized,
            warnings,
        };
        session.history.push_exchange(utterance, reply_for_history);
        session.belief = belief;
        session.active_domain = Some(domain);
        session.turns += 1;
        Ok(record)
    }

    fn examples(
        &self,
        session: &Session,
        utterance: &str,
        schema: &DomainSchema,
        warnings: &mut Vec<String>,
    ) -> Result<(Vec<StoredExample>, Vec<StoredExample>), PipelineError> {
        let cfg = &self.config;
        let Some(store) = self.store.as_ref().filter(|_| cfg.few_shot) else {
            return Ok((Vec::new(), Vec::new()));
        };
        let key = make_context_key(&session.history, utterance, cfg.context_window_utterances);
        let positives = store.retrieve(&key, &schema.name, cfg.retrieval_k)?;
        let pool = store.value_pool(&schema.name);
        let mut negatives = Vec::new();
        let mut index = 0;
        for p in &positives {
            for _ in 0..cfg.negatives_per_example {
                let seed = corruption_seed(cfg.seed, &session.id, session.turns, index);
                index += 1;
                match corrupt_example(p, schema, &pool, seed) {
                    Ok(n) => negatives.push(n),
                    Err(_) => warnings.push(format!("uncorruptible-example:{}", p.id)),
                }
            }
        }
        Ok((positives, negatives))
    }

    fn query_db(
        &self,
        domain: &str,
        belief: &BeliefState,
        schema: &DomainSchema,
        gold: &GoldInputs,
        warnings: &mut Vec<String>,
    ) -> Option<DbResult> {
        if let Some(provided) = &gold.provided_results {
            let (result, warning) = external_result(domain, Some(provided));
            warnings.extend(warning);
            return Some(result);
        }
        let db = self.database.as_ref()?;
        if !db.has_domain(domain) {
            return None;
        }
        db.query(domain, belief, Some(schema), self.config.fuzzy_threshold).ok()
    }

    /// Runs every turn of a corpus dialogue, feeding gold user utterances.
    /// Stops at the first failing turn and reports its error.
    pub fn run_dialogue(&self, dialogue: &Dialogue) -> DialogueRun {
        let mut session = Session::new(dialogue.id.clone());
        let mut records = Vec::new();
        let mut error = None;
        let mut backend_failure = false;
        for turn in &dialogue.turns {
            let mut gold = GoldInputs::from_turn(turn);
            if self.config.gold_history {
                gold.history_reply = Some(
                    turn.system_response_delex
                        .clone()
                        .or_else(|| turn.system_response.clone())
                        .unwrap_or_default(),
                );
            }
            match self.run_turn(&mut session, &turn.user_utterance, &gold) {
                Ok(r) => records.push(r),
                Err(e) => {
                    backend_failure = matches!(e, PipelineError::Backend { .. });
                    error = Some(format!("turn {}: {e}", records.len()));
                    break;
                }
            }
        }
        DialogueRun {
            dialogue_id: dialogue.id.clone(),
            records,
            error,
            backend_failure,
        }
    }

    /// Runs dialogues on `parallelism` worker threads; output order follows
    /// the input order.
    pub fn run_corpus(&self, dialogues: &[&Dialogue], parallelism: usize) -> Vec<DialogueRun> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .expect("thread pool");
        pool.install(|| dialogues.par_iter().map(|d| self.run_dialogue(d)).collect())
    }

    pub fn manifest(&self, corpus: &str, split: &str, runs: &[DialogueRun]) -> RunManifest {
        RunManifest {
            variant: self.config.variant_label(),
            corpus: corpus.to_string(),
            split: split.to_string(),
            config: self.config.clone(),
            template_hash: self.templates.content_hash().to_string(),
            backend: self.backend.id(),
            embedder: self.store.as_ref().map(|s| s.embedder().id()),
            store_examples: self.store.as_ref().map_or(0, |s| s.len()),
            dialogues: runs.len(),
            turns: runs.iter().map(|r| r.records.len()).sum(),
            calls: runs
                .iter()
                .flat_map(|r| &r.records)
                .map(|t| t.calls.len())
                .sum(),
            failures: runs
                .iter()
                .filter_map(|r| {
                    r.error.as_ref().map(|e| Failure {
                        dialogue_id: r.dialogue_id.clone(),
                        error: e.clone(),
                        backend_failure: r.backend_failure,
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRun {
    pub dialogue_id: String,
    pub records: Vec<TurnRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The error came from the completion backend.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub backend_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Failure {
    pub dialogue_id: String,
    pub error: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub backend_failure: bool,
}

/// Everything needed to reproduce a run; free of timestamps so equal runs
/// produce equal bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: String,
    pub corpus: String,
    pub split: String,
    pub config: PipelineConfig,
    pub template_hash: String,
    pub backend: String,
    pub embedder: Option<String>,
    pub store_examples: usize,
    pub dialogues: usize,
    pub turns: usize,
    pub calls: usize,
    pub failures: Vec<Failure>,
}

/// One line of a prediction file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub domain: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_domain: Option<String>,
    pub update: Option<StateUpdate>,
    pub belief: BeliefState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_state: Option<BeliefState>,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_response: Option<String>,
    pub db_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db_top: Option<crate::database::Entity>,
    pub warnings: Vec<String>,
}

/// Flattens runs into prediction records, pairing each with its gold turn.
pub fn predictions(runs: &[DialogueRun], dialogues: &[&Dialogue]) -> Vec<Prediction> {
    let by_id: BTreeMap<&str, &Dialogue> = dialogues.iter().map(|d| (d.id.as_str(), *d)).collect();
    let mut out = Vec::new();
    for run in runs {
        let dialogue = by_id.get(run.dialogue_id.as_str());
        for r in &run.records {
            let gold = dialogue.and_then(|d| d.turns.get(r.turn_index));
            out.push(Prediction {
                dialogue_id: run.dialogue_id.clone(),
                turn_index: r.turn_index,
                domain: r.domain.clone(),
                gold_domain: gold.and_then(|t| t.gold_domain.clone()),
                update: r.update.clone(),
                belief: r.belief.clone(),
                gold_state: gold.and_then(|t| t.gold_state.clone()),
                response: r.response.clone(),
                gold_response: gold.and_then(|t| t.system_response_delex.clone()),
                db_count: r.db.as_ref().map(|d| d.count),
                db_top: r.db.as_ref().and_then(|d| d.top().cloned()),
                warnings: r.warnings.clone(),
            });
        }
    }
    out
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
