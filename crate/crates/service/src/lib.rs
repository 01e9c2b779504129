//! HTTP chat and annotation service.
//!
//! Annotators get a goal, chat with the pipeline and answer three questions
//! at the end. Every endpoint lives under `/v1`; see [`router`].

pub mod error;
pub mod store;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tod_core::config::PipelineConfig;
use tod_core::dialogue::{Corpus, GoalSpec};
use tod_core::eval::{aggregate_annotations, AnnotatedDialogue, AnnotationRecord, HumanEvalTable};
use tod_core::pipeline::{GoldInputs, Pipeline, PipelineError, Session, TurnRecord};
use tod_core::state::BeliefState;
use tokio::sync::Mutex as AsyncMutex;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use tower_http::services::ServeDir;

pub use error::ApiError;
use store::{Event, EventLog};

/// Placeholder instructions; the wording is ours, not from any published protocol.
pub const DEFAULT_INSTRUCTIONS: &str = "You will be given a goal. Talk to the assistant until the goal is \
reached or you give up, then answer the three questions about the conversation. (Instruction text is \
configurable; this default is not taken from any published protocol.)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusyPolicy {
    /// A second concurrent message to the same session gets 409.
    #[default]
    Reject,
    /// A second concurrent message waits for the first.
    Queue,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Seeds the goal sequence.
    pub seed: u64,
    pub busy: BusyPolicy,
    /// Append-only session log; `None` keeps everything in memory.
    pub data_file: Option<PathBuf>,
    /// Built UI bundle served for paths outside `/v1`.
    pub static_dir: Option<PathBuf>,
    /// Allowed CORS origins; empty allows any.
    pub cors_origins: Vec<String>,
    pub instructions: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            busy: BusyPolicy::Reject,
            data_file: None,
            static_dir: None,
            cors_origins: Vec::new(),
            instructions: DEFAULT_INSTRUCTIONS.to_string(),
        }
    }
}

#[derive(Debug)]
struct SessionEntry {
    id: String,
    goal_id: String,
    goal: GoalSpec,
    config: PipelineConfig,
    state: Session,
    records: Vec<TurnRecord>,
    annotation: Option<AnnotationRecord>,
    created_at_ms: u64,
    updated_at_ms: u64,
}

#[derive(Default)]
struct Index {
    sessions: HashMap<String, Arc<AsyncMutex<SessionEntry>>>,
    order: Vec<String>,
}

pub struct AppState {
    pipeline: Pipeline,
    goals: Vec<(String, GoalSpec)>,
    config: ServiceConfig,
    rng: Mutex<ChaCha8Rng>,
    index: RwLock<Index>,
    log: Option<EventLog>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(e.to_string())
}

impl AppState {
    /// Builds the service state. Goals are offered in the given order; a
    /// configured data file is replayed to restore earlier sessions.
    pub fn new(pipeline: Pipeline, goals: Vec<(String, GoalSpec)>, config: ServiceConfig) -> io::Result<Self> {
        let (log, events) = match &config.data_file {
            Some(path) => {
                let (log, events) = EventLog::open(path)?;
                (Some(log), events)
            }
            None => (None, Vec::new()),
        };
        let state = Self {
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(config.seed)),
            pipeline,
            goals,
            config,
            index: RwLock::new(Index::default()),
            log,
        };
        state.restore(events);
        Ok(state)
    }

    fn restore(&self, events: Vec<Event>) {
        let mut index = self.index.write().unwrap_or_else(|p| p.into_inner());
        for event in events {
            let id = event.session_id().to_string();
            match event {
                Event::Created {
                    session_id,
                    goal_id,
                    goal,
                    config,
                    at_ms,
                } => {
                    let entry = SessionEntry {
                        state: live_session(&session_id),
                        id: session_id.clone(),
                        goal_id,
                        goal,
                        config,
                        records: Vec::new(),
                        annotation: None,
                        created_at_ms: at_ms,
                        updated_at_ms: at_ms,
                    };
                    index.order.push(session_id.clone());
                    index.sessions.insert(session_id, Arc::new(AsyncMutex::new(entry)));
                }
                Event::Turn {
                    record, state, at_ms, ..
                } => match index.sessions.get(&id) {
                    Some(entry) => {
                        let mut e = entry.try_lock().expect("no contention during restore");
                        e.state = *state;
                        e.records.push(*record);
                        e.updated_at_ms = at_ms;
                    }
                    None => log::warn!("turn for unknown session {id} skipped"),
                },
                Event::Annotation { annotation, at_ms, .. } => match index.sessions.get(&id) {
                    Some(entry) => {
                        let mut e = entry.try_lock().expect("no contention during restore");
                        e.annotation = Some(annotation);
                        e.updated_at_ms = at_ms;
                    }
                    None => log::warn!("annotation for unknown session {id} skipped"),
                },
            }
        }
    }

    fn append(&self, event: &Event) -> Result<(), ApiError> {
        match &self.log {
            Some(log) => log
                .append(event)
                .map_err(|e| internal(format!("writing {}: {e}", log.path().display()))),
            None => Ok(()),
        }
    }

    fn session(&self, id: &str) -> Result<Arc<AsyncMutex<SessionEntry>>, ApiError> {
        let index = self.index.read().unwrap_or_else(|p| p.into_inner());
        index
            .sessions
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }

    fn all_sessions(&self) -> Vec<Arc<AsyncMutex<SessionEntry>>> {
        let index = self.index.read().unwrap_or_else(|p| p.into_inner());
        index.order.iter().map(|id| index.sessions[id].clone()).collect()
    }

    fn session_config(&self, overrides: Option<&Value>) -> Result<PipelineConfig, ApiError> {
        let config = match overrides.filter(|v| !v.is_null()) {
            Some(o) => self
                .pipeline
                .config
                .with_overrides(o)
                .map_err(|e| ApiError::Invalid(e.to_string()))?,
            None => self.pipeline.config.clone(),
        };
        if config.oracle_domain || config.oracle_state {
            return Err(ApiError::Invalid("live sessions have no oracle annotations".into()));
        }
        Ok(config)
    }

    fn pick_goal(&self, goal_id: Option<&str>) -> Result<(String, GoalSpec), ApiError> {
        if self.goals.is_empty() {
            return Err(ApiError::Unavailable("no corpus with goals is loaded".into()));
        }
        match goal_id {
            Some(id) => self
                .goals
                .iter()
                .find(|(g, _)| g == id)
                .cloned()
                .ok_or_else(|| ApiError::Invalid(format!("unknown goal `{id}`"))),
            None => {
                let mut rng = self.rng.lock().unwrap_or_else(|p| p.into_inner());
                Ok(self.goals[rng.gen_range(0..self.goals.len())].clone())
            }
        }
    }

    /// Runs one message. The session is only updated once the turn has
    /// succeeded and been persisted.
    fn run_message(&self, entry: &mut SessionEntry, text: &str) -> Result<MessageReply, ApiError> {
        let pipeline = Pipeline {
            config: entry.config.clone(),
            ..self.pipeline.clone()
        };
        let mut next = entry.state.clone();
        let record = pipeline
            .run_turn(&mut next, text, &GoldInputs::default())
            .map_err(|e| match e {
                PipelineError::Backend { .. } => ApiError::Backend(e.to_string()),
                other => internal(other),
            })?;
        let at_ms = now_ms();
        self.append(&Event::Turn {
            session_id: entry.id.clone(),
            record: Box::new(record.clone()),
            state: Box::new(next.clone()),
            at_ms,
        })?;
        entry.state = next;
        entry.updated_at_ms = at_ms;
        let reply = MessageReply {
            turn_index: record.turn_index,
            response_lexicalized: record.lexicalized.clone().unwrap_or_else(|| record.response.clone()),
            response_delex: record.response.clone(),
            belief: record.belief.clone(),
            detected_domain: record.domain.clone(),
            db_count: record.db.as_ref().map(|d| d.count),
            warnings: record.warnings.clone(),
        };
        entry.records.push(record);
        Ok(reply)
    }
}

/// Goals of every corpus dialogue that has one, ordered by dialogue id.
pub fn corpus_goals(corpus: &Corpus) -> Vec<(String, GoalSpec)> {
    let mut goals: Vec<(String, GoalSpec)> = corpus
        .dialogues
        .iter()
        .filter_map(|d| d.goal.clone().filter(|g| !g.domains.is_empty()).map(|g| (d.id.clone(), g)))
        .collect();
    goals.sort_by(|a, b| a.0.cmp(&b.0));
    goals
}

fn live_session(id: &str) -> Session {
    let mut s = Session::new(id);
    s.lexicalize_history = true;
    s
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    /// Partial `PipelineConfig` applied over the server's configuration.
    #[serde(default)]
    pub config: Option<Value>,
    #[serde(default)]
    pub goal_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub goal_id: String,
    pub goal_message: String,
    pub goal: GoalSpec,
    pub variant: String,
}

#[derive(Debug, Deserialize)]
pub struct MessageBody {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageReply {
    pub turn_index: usize,
    pub response_lexicalized: String,
    pub response_delex: String,
    pub belief: BeliefState,
    pub detected_domain: String,
    pub db_count: Option<usize>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct AnnotateQuery {
    #[serde(default)]
    pub overwrite: bool,
}

#[derive(Debug, Default, Deserialize)]
pub struct TranscriptQuery {
    /// Include the full prompts of every call.
    #[serde(default)]
    pub debug: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Transcript {
    pub session_id: String,
    pub goal_id: String,
    pub goal: GoalSpec,
    pub variant: String,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub prompts_redacted: bool,
    pub records: Vec<TurnRecord>,
    pub annotation: Option<AnnotationRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExportRecord {
    pub goal_id: String,
    #[serde(flatten)]
    pub dialogue: AnnotatedDialogue,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Export {
    pub records: Vec<ExportRecord>,
    /// Always recomputed from `records`.
    pub aggregate: HumanEvalTable,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Option<Json<CreateSession>>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let config = app.session_config(body.config.as_ref())?;
    let (goal_id, goal) = app.pick_goal(body.goal_id.as_deref())?;
    let id = uuid::Uuid::new_v4().to_string();
    let at_ms = now_ms();
    app.append(&Event::Created {
        session_id: id.clone(),
        goal_id: goal_id.clone(),
        goal: goal.clone(),
        config: config.clone(),
        at_ms,
    })?;
    let reply = SessionCreated {
        session_id: id.clone(),
        goal_id: goal_id.clone(),
        goal_message: goal.annotator_text(),
        goal: goal.clone(),
        variant: config.variant_label(),
    };
    let entry = SessionEntry {
        state: live_session(&id),
        id: id.clone(),
        goal_id,
        goal,
        config,
        records: Vec::new(),
        annotation: None,
        created_at_ms: at_ms,
        updated_at_ms: at_ms,
    };
    let mut index = app.index.write().unwrap_or_else(|p| p.into_inner());
    index.order.push(id.clone());
    index.sessions.insert(id, Arc::new(AsyncMutex::new(entry)));
    Ok((StatusCode::CREATED, Json(reply)))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<MessageBody>,
) -> Result<Json<MessageReply>, ApiError> {
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::Invalid("message text is empty".into()));
    }
    let entry = app.session(&id)?;
    let mut guard = match app.config.busy {
        BusyPolicy::Reject => entry.try_lock_owned().map_err(|_| ApiError::Busy(id.clone()))?,
        BusyPolicy::Queue => entry.lock_owned().await,
    };
    let worker = app.clone();
    tokio::task::spawn_blocking(move || worker.run_message(&mut guard, &text))
        .await
        .map_err(internal)?
        .map(Json)
}

async fn annotate(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<AnnotateQuery>,
    Json(annotation): Json<AnnotationRecord>,
) -> Result<Json<AnnotatedDialogue>, ApiError> {
    let entry = app.session(&id)?;
    let mut e = entry.lock().await;
    if e.annotation.is_some() && !q.overwrite {
        return Err(ApiError::AlreadyAnnotated(id));
    }
    let domains = e.goal.domains.len();
    if annotation.q1_successful_subdialogues > domains {
        return Err(ApiError::Invalid(format!(
            "{} successful subdialogues but the goal has {domains} domains",
            annotation.q1_successful_subdialogues
        )));
    }
    if let Some(d) = annotation.q1_domain_flags.keys().find(|d| !e.goal.domains.contains_key(*d)) {
        return Err(ApiError::Invalid(format!("`{d}` is not a goal domain")));
    }
    let flagged = annotation.q1_domain_flags.values().filter(|v| **v).count();
    if !annotation.q1_domain_flags.is_empty() && flagged != annotation.q1_successful_subdialogues {
        return Err(ApiError::Invalid(format!(
            "{flagged} domains flagged successful but the count is {}",
            annotation.q1_successful_subdialogues
        )));
    }
    let at_ms = now_ms();
    app.append(&Event::Annotation {
        session_id: id.clone(),
        annotation: annotation.clone(),
        at_ms,
    })?;
    e.annotation = Some(annotation.clone());
    e.updated_at_ms = at_ms;
    Ok(Json(AnnotatedDialogue {
        session_id: id,
        subdialogues: domains,
        annotation,
    }))
}

async fn transcript(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<TranscriptQuery>,
) -> Result<Json<Transcript>, ApiError> {
    let entry = app.session(&id)?;
    let e = entry.lock().await;
    let mut records = e.records.clone();
    if !q.debug {
        for call in records.iter_mut().flat_map(|r| r.calls.iter_mut()) {
            call.prompt.clear();
        }
    }
    Ok(Json(Transcript {
        session_id: e.id.clone(),
        goal_id: e.goal_id.clone(),
        goal: e.goal.clone(),
        variant: e.config.variant_label(),
        created_at_ms: e.created_at_ms,
        updated_at_ms: e.updated_at_ms,
        prompts_redacted: !q.debug,
        records,
        annotation: e.annotation.clone(),
    }))
}

async fn export(State(app): State<Arc<AppState>>) -> Json<Export> {
    let mut records = Vec::new();
    for entry in app.all_sessions() {
        let e = entry.lock().await;
        if let Some(a) = &e.annotation {
            records.push(ExportRecord {
                goal_id: e.goal_id.clone(),
                dialogue: AnnotatedDialogue {
                    session_id: e.id.clone(),
                    subdialogues: e.goal.domains.len(),
                    annotation: a.clone(),
                },
            });
        }
    }
    let dialogues: Vec<AnnotatedDialogue> = records.iter().map(|r| r.dialogue.clone()).collect();
    Json(Export {
        aggregate: aggregate_annotations(&dialogues),
        records,
    })
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Value> {
    let sessions = app.index.read().unwrap_or_else(|p| p.into_inner()).order.len();
    Json(serde_json::json!({
        "status": "ok",
        "variant": app.pipeline.config.variant_label(),
        "backend": app.pipeline.backend.id(),
        "goals": app.goals.len(),
        "sessions": sessions,
    }))
}

async fn instructions(State(app): State<Arc<AppState>>) -> Json<BTreeMap<&'static str, String>> {
    Json(BTreeMap::from([("text", app.config.instructions.clone())]))
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    if origins.is_empty() {
        return layer.allow_origin(Any);
    }
    let list: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    layer.allow_origin(AllowOrigin::list(list))
}

pub fn router(app: Arc<AppState>) -> Router {
    let static_dir = app.config.static_dir.clone();
    let cors = cors(&app.config.cors_origins);
    let api = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/annotation", post(annotate))
        .route("/sessions/{id}/transcript", get(transcript))
        .route("/annotations/export", get(export))
        .route("/health", get(health))
        .route("/instructions", get(instructions));
    let mut router = Router::new().nest("/v1", api).with_state(app);
    if let Some(dir) = static_dir {
        router = router.fallback_service(ServeDir::new(dir));
    }
    router.layer(cors)
}

/// Serves on a bound listener until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> io::Result<()> {
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
