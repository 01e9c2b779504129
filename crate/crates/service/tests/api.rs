use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tod_core::backends::{
    BackendError, CompletionBackend, CompletionRequest, CompletionResult, FnBackend, ReplayBackend,
};
use tod_core::config::PipelineConfig;
use tod_core::eval::{aggregate_annotations, AnnotatedDialogue};
use tod_core::ingest::{load_multiwoz, LoadedCorpus};
use tod_core::pipeline::{Pipeline, TurnRecord};
use tod_core::prompts::{PromptKind, TemplateSet};
use tod_service::{corpus_goals, router, AppState, BusyPolicy, Export, ServiceConfig};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures")
}

fn corpus() -> LoadedCorpus {
    load_multiwoz(&fixtures().join("multiwoz")).unwrap()
}

fn pipeline(loaded: &LoadedCorpus, backend: Arc<dyn CompletionBackend>) -> Pipeline {
    Pipeline {
        config: PipelineConfig::default(),
        templates: Arc::new(TemplateSet::builtin("multiwoz").unwrap()),
        schemas: Arc::new(loaded.corpus.schemas.clone()),
        backend,
        store: None,
        database: loaded.database.clone().map(Arc::new),
    }
}

fn cassette() -> Arc<dyn CompletionBackend> {
    Arc::new(ReplayBackend::load(&fixtures().join("cassettes/multiwoz.jsonl"), true).unwrap())
}

/// Always answers hotel / cheap / a name-and-phone reply.
fn cooperative() -> Arc<dyn CompletionBackend> {
    Arc::new(FnBackend::new("cooperative", |r: &CompletionRequest| match r.tag {
        PromptKind::DomainDetect => "hotel".to_string(),
        PromptKind::State => "pricerange:\"cheap\"".to_string(),
        PromptKind::Response => "[hotel_name] is cheap, the phone is [hotel_phone].".to_string(),
    }))
}

fn app_with(backend: Arc<dyn CompletionBackend>, config: ServiceConfig) -> Router {
    let loaded = corpus();
    let goals = corpus_goals(&loaded.corpus);
    router(Arc::new(AppState::new(pipeline(&loaded, backend), goals, config).unwrap()))
}

fn app(backend: Arc<dyn CompletionBackend>) -> Router {
    app_with(backend, ServiceConfig::default())
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn say(app: &Router, id: &str, text: &str) -> (StatusCode, Value) {
    call(app, Method::POST, &format!("/v1/sessions/{id}/messages"), Some(json!({ "text": text }))).await
}

fn annotation(q1: usize) -> Value {
    json!({ "q1_successful_subdialogues": q1, "q2_clarifications": 1, "q3_all_captured": true })
}

#[tokio::test]
async fn create_session_returns_a_goal() {
    let app = app(cassette());
    let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(!v["goal"]["domains"].as_object().unwrap().is_empty());
    assert!(!v["goal_message"].as_str().unwrap().is_empty());
    assert_eq!(v["variant"], "zs-gbs");

    let (_, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({ "goal_id": "PMUL0203" }))).await;
    assert_eq!(v["goal_id"], "PMUL0203");
    let domains: Vec<_> = v["goal"]["domains"].as_object().unwrap().keys().cloned().collect();
    assert_eq!(domains, ["hotel", "restaurant"]);

    // an empty body is accepted too
    let req = Request::post("/v1/sessions").body(Body::empty()).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::CREATED);
}

#[tokio::test]
async fn seeded_goal_sequence_is_reproducible() {
    let mut runs = Vec::new();
    for _ in 0..2 {
        let app = app_with(cassette(), ServiceConfig { seed: 42, ..Default::default() });
        let mut ids = Vec::new();
        let mut goals = Vec::new();
        for _ in 0..6 {
            let (_, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({}))).await;
            ids.push(v["session_id"].as_str().unwrap().to_string());
            goals.push(v["goal_id"].as_str().unwrap().to_string());
        }
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        runs.push(goals);
    }
    assert_eq!(runs[0], runs[1]);
    let other = app_with(cassette(), ServiceConfig { seed: 43, ..Default::default() });
    let mut goals = Vec::new();
    for _ in 0..6 {
        let (_, v) = call(&other, Method::POST, "/v1/sessions", Some(json!({}))).await;
        goals.push(v["goal_id"].as_str().unwrap().to_string());
    }
    assert_ne!(goals, runs[0]);
}

#[tokio::test]
async fn bad_create_requests() {
    let app = app(cassette());
    let cases = [
        json!({ "goal_id": "nope" }),
        json!({ "config": { "oracle_state": true } }),
        json!({ "config": { "no_such_field": 1 } }),
        json!({ "config": { "retrieval_k": "two" } }),
        json!({ "config": [1] }),
    ];
    for body in cases {
        let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(body.clone())).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}: {v}");
        assert!(v["error"].is_string());
    }
    let (status, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({ "config": { "few_shot": true, "max_tokens": { "response": 80 } } }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["variant"], "fs-gbs");
}

#[tokio::test]
async fn no_goals_is_unavailable() {
    let loaded = corpus();
    let app = router(Arc::new(AppState::new(pipeline(&loaded, cassette()), vec![], ServiceConfig::default()).unwrap()));
    let (status, _) = call(&app, Method::POST, "/v1/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn first_message_matches_the_recorded_corpus_turn() {
    let app = app(cassette());
    let id = create(&app, json!({ "goal_id": "SNG0201" })).await;
    let (status, v) = say(&app, &id, "I want a cheap place to stay.").await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["detected_domain"], "hotel");
    assert_eq!(v["belief"]["hotel"]["pricerange"], "cheap");
    assert_eq!(v["turn_index"], 0);
    assert!(v["db_count"].as_u64().unwrap() > 0);
    assert!(!v["response_delex"].as_str().unwrap().is_empty());

    // the same prompts as the recorded corpus run of that turn
    let golden: Vec<TurnRecord> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("golden/transcript_SNG0201_zs-gbs.json")).unwrap())
            .unwrap();
    let (_, t) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript?debug=true"), None).await;
    let records: Vec<TurnRecord> = serde_json::from_value(t["records"].clone()).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].calls, golden[0].calls);
    assert_eq!(records[0].response, golden[0].response);
}

#[tokio::test]
async fn responses_are_lexicalized_for_display() {
    let app = app(cooperative());
    let id = create(&app, json!({})).await;
    let (_, v) = say(&app, &id, "I want a cheap place to stay.").await;
    assert_eq!(v["response_delex"], "[hotel_name] is cheap, the phone is [hotel_phone].");
    // first cheap hotel in the fixture database
    assert_eq!(v["response_lexicalized"], "alpha lodge is cheap, the phone is 01223 111111.");
}

#[tokio::test]
async fn messages_are_kept_in_order() {
    let app = app(cooperative());
    let id = create(&app, json!({})).await;
    for (i, text) in ["I want a cheap place to stay.", "Anything in the east?", "Thanks."].iter().enumerate() {
        let (status, v) = say(&app, &id, text).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["turn_index"], i);
    }
    let (_, t) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript"), None).await;
    let records: Vec<TurnRecord> = serde_json::from_value(t["records"].clone()).unwrap();
    let utterances: Vec<_> = records.iter().map(|r| r.utterance.as_str()).collect();
    assert_eq!(utterances, ["I want a cheap place to stay.", "Anything in the east?", "Thanks."]);
    // prompts are redacted unless asked for
    assert_eq!(t["prompts_redacted"], true);
    assert!(records.iter().flat_map(|r| &r.calls).all(|c| c.prompt.is_empty()));
    // the history of the last prompt holds both earlier exchanges, lexicalized
    let (_, full) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript?debug=true"), None).await;
    let records: Vec<TurnRecord> = serde_json::from_value(full["records"].clone()).unwrap();
    let prompt = &records[2].call(PromptKind::State).unwrap().prompt;
    let first = prompt.find("I want a cheap place to stay.").unwrap();
    let second = prompt.find("Anything in the east?").unwrap();
    assert!(first < second);
    assert!(prompt.contains("alpha lodge is cheap"));
}

struct Flaky {
    fail: AtomicBool,
    inner: Arc<dyn CompletionBackend>,
}

impl CompletionBackend for Flaky {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        if self.fail.load(Ordering::SeqCst) && request.tag == PromptKind::Response {
            return Err(BackendError::Transport("connection reset".into()));
        }
        self.inner.complete(request)
    }

    fn id(&self) -> String {
        "flaky".into()
    }
}

#[tokio::test]
async fn backend_failure_leaves_the_session_unchanged() {
    let flaky = Arc::new(Flaky {
        fail: AtomicBool::new(true),
        inner: cooperative(),
    });
    let app = app(flaky.clone());
    let id = create(&app, json!({})).await;
    let (status, v) = say(&app, &id, "I want a cheap place to stay.").await;
    assert_eq!(status, StatusCode::BAD_GATEWAY);
    assert!(v["error"].as_str().unwrap().contains("connection reset"));
    let (_, t) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript"), None).await;
    assert!(t["records"].as_array().unwrap().is_empty());

    flaky.fail.store(false, Ordering::SeqCst);
    let (status, v) = say(&app, &id, "I want a cheap place to stay.").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["turn_index"], 0);
}

#[tokio::test]
async fn unknown_sessions_are_404() {
    let app = app(cassette());
    let (s1, _) = say(&app, "missing", "hi").await;
    let (s2, _) = call(&app, Method::GET, "/v1/sessions/missing/transcript", None).await;
    let (s3, _) = call(&app, Method::POST, "/v1/sessions/missing/annotation", Some(annotation(0))).await;
    assert_eq!([s1, s2, s3], [StatusCode::NOT_FOUND; 3]);
    let id = create(&app, json!({})).await;
    let (status, _) = say(&app, &id, "   ").await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

/// Blocks every call until released, announcing each arrival.
struct Gate {
    entered: Mutex<mpsc::Sender<()>>,
    release: Mutex<mpsc::Receiver<()>>,
    inner: Arc<dyn CompletionBackend>,
}

impl CompletionBackend for Gate {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        if request.tag == PromptKind::DomainDetect {
            self.entered.lock().unwrap().send(()).unwrap();
            self.release.lock().unwrap().recv().unwrap();
        }
        self.inner.complete(request)
    }

    fn id(&self) -> String {
        "gate".into()
    }
}

fn gated(busy: BusyPolicy) -> (Router, mpsc::Receiver<()>, mpsc::Sender<()>) {
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel();
    let gate = Arc::new(Gate {
        entered: Mutex::new(entered_tx),
        release: Mutex::new(release_rx),
        inner: cooperative(),
    });
    (app_with(gate, ServiceConfig { busy, ..Default::default() }), entered_rx, release_tx)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_message_to_a_busy_session_is_rejected() {
    let (app, entered, release) = gated(BusyPolicy::Reject);
    let id = create(&app, json!({})).await;
    let first = tokio::spawn({
        let (app, id) = (app.clone(), id.clone());
        async move { say(&app, &id, "I want a cheap place to stay.").await }
    });
    let entered = tokio::task::spawn_blocking(move || {
        entered.recv().unwrap();
        entered
    })
    .await
    .unwrap();
    let (status, _) = say(&app, &id, "second").await;
    assert_eq!(status, StatusCode::CONFLICT);

    // another session is not affected
    let other = create(&app, json!({})).await;
    let second = tokio::spawn({
        let app = app.clone();
        async move { say(&app, &other, "hello").await }
    });
    tokio::task::spawn_blocking(move || entered.recv().unwrap()).await.unwrap();
    release.send(()).unwrap();
    release.send(()).unwrap();
    assert_eq!(first.await.unwrap().0, StatusCode::OK);
    assert_eq!(second.await.unwrap().0, StatusCode::OK);
    let (_, t) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript"), None).await;
    assert_eq!(t["records"].as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn queued_messages_run_in_turn() {
    let (app, entered, release) = gated(BusyPolicy::Queue);
    let id = create(&app, json!({})).await;
    let first = tokio::spawn({
        let (app, id) = (app.clone(), id.clone());
        async move { say(&app, &id, "first").await }
    });
    let entered = tokio::task::spawn_blocking(move || {
        entered.recv().unwrap();
        entered
    })
    .await
    .unwrap();
    let second = tokio::spawn({
        let (app, id) = (app.clone(), id.clone());
        async move { say(&app, &id, "second").await }
    });
    release.send(()).unwrap();
    tokio::task::spawn_blocking(move || entered.recv().unwrap()).await.unwrap();
    release.send(()).unwrap();
    let (a, b) = (first.await.unwrap(), second.await.unwrap());
    assert_eq!((a.0, b.0), (StatusCode::OK, StatusCode::OK));
    assert_eq!((a.1["turn_index"].as_u64(), b.1["turn_index"].as_u64()), (Some(0), Some(1)));
}

#[tokio::test]
async fn annotation_rules() {
    let app = app(cooperative());
    let id = create(&app, json!({ "goal_id": "PMUL0203" })).await;
    let url = format!("/v1/sessions/{id}/annotation");

    let (status, v) = call(&app, Method::POST, &url, Some(annotation(3))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let flags_off = json!({
        "q1_successful_subdialogues": 2, "q1_domain_flags": { "hotel": true, "restaurant": false },
        "q2_clarifications": 0, "q3_all_captured": true
    });
    let (status, _) = call(&app, Method::POST, &url, Some(flags_off)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let foreign = json!({
        "q1_successful_subdialogues": 1, "q1_domain_flags": { "taxi": true },
        "q2_clarifications": 0, "q3_all_captured": true
    });
    let (status, _) = call(&app, Method::POST, &url, Some(foreign)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, v) = call(&app, Method::POST, &url, Some(annotation(2))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["subdialogues"], 2);
    let (status, _) = call(&app, Method::POST, &url, Some(annotation(1))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, Method::POST, &format!("{url}?overwrite=true"), Some(annotation(1))).await;
    assert_eq!(status, StatusCode::OK);

    let (_, t) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript"), None).await;
    assert_eq!(t["annotation"]["q1_successful_subdialogues"], 1);
}

#[tokio::test]
async fn export_aggregates_raw_records() {
    let app = app(cooperative());
    // 25 annotated sessions over one- and two-domain goals, plus one left open
    let mut expected_subdialogues = 0;
    for i in 0..25 {
        let goal = if i % 5 == 0 { "PMUL0203" } else { "SNG0201" };
        let domains = if goal == "PMUL0203" { 2 } else { 1 };
        expected_subdialogues += domains;
        let id = create(&app, json!({ "goal_id": goal })).await;
        say(&app, &id, "I want a cheap place to stay.").await;
        let (status, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/annotation"), Some(annotation(i % (domains + 1)))).await;
        assert_eq!(status, StatusCode::OK);
    }
    create(&app, json!({})).await;

    let (status, v) = call(&app, Method::GET, "/v1/annotations/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let export: Export = serde_json::from_value(v).unwrap();
    assert_eq!(export.records.len(), 25);
    assert_eq!(export.aggregate.dialogues, 25);
    assert_eq!(export.aggregate.subdialogues, expected_subdialogues);
    let raw: Vec<AnnotatedDialogue> = export.records.iter().map(|r| r.dialogue.clone()).collect();
    assert_eq!(export.aggregate, aggregate_annotations(&raw));
    assert_eq!(export.aggregate.clarifications, 25);
}

#[tokio::test]
async fn sessions_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let config = ServiceConfig {
        data_file: Some(dir.path().join("store/sessions.jsonl")),
        ..Default::default()
    };
    let app = app_with(cooperative(), config.clone());
    let id = create(&app, json!({ "goal_id": "SNG0201" })).await;
    say(&app, &id, "I want a cheap place to stay.").await;
    call(&app, Method::POST, &format!("/v1/sessions/{id}/annotation"), Some(annotation(1))).await;
    let (_, before) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript?debug=true"), None).await;
    let (_, export_before) = call(&app, Method::GET, "/v1/annotations/export", None).await;
    drop(app);

    // a torn final line is ignored
    let path = dir.path().join("store/sessions.jsonl");
    let mut text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 3);
    text.push_str("{\"event\":\"turn\",\"sess");
    std::fs::write(&path, text).unwrap();

    let app = app_with(cooperative(), config);
    let (_, after) = call(&app, Method::GET, &format!("/v1/sessions/{id}/transcript?debug=true"), None).await;
    let (_, export_after) = call(&app, Method::GET, "/v1/annotations/export", None).await;
    assert_eq!(before, after);
    assert_eq!(export_before, export_after);
    // the restored session continues from its stored state
    let (_, v) = say(&app, &id, "Anything in the east?").await;
    assert_eq!(v["turn_index"], 1);
    let (status, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/annotation"), Some(annotation(1))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn cors_and_static_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    let app = app_with(
        cassette(),
        ServiceConfig {
            static_dir: Some(dir.path().to_path_buf()),
            cors_origins: vec!["http://localhost:5173".into()],
            ..Default::default()
        },
    );
    let preflight = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/sessions")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.clone().oneshot(preflight).await.unwrap();
    assert_eq!(resp.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");

    let (status, body) = call(&app, Method::GET, "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, "<html>ui</html>");
    let (status, v) = call(&app, Method::GET, "/v1/instructions", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(v["text"].as_str().unwrap().contains("configurable"));
    let (_, v) = call(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(v["goals"], 12);
}
