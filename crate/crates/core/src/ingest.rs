//! Corpus loaders for the MultiWOZ 2.2 and SGD directory layouts, gold
//! update derivation and context-store snippet extraction.
//!
//! MultiWOZ 2.2 layout:
//!
//! ```text
//! <root>/schema.json            list of {service_name, description, slots: [{name, description, is_categorical, possible_values}]}
//! <root>/{train,dev,test}/*.json  lists of dialogues
//! <root>/db/<domain>_db.json    optional entity tables (MultiWOZ 2.1 db layout)
//! <root>/goals.json             optional {dialogue_id: {<domain>: {info, reqt, book}, message}}
//! ```
//!
//! SGD layout: `<root>/{train,dev,test}/schema.json` plus `dialogues_*.json`
//! in each split directory.
//!
//! A dialogue is `{dialogue_id, services, turns}`; turns alternate USER and
//! SYSTEM and carry `frames` of `{service, slots, state, service_results}`.
//! User frames hold `state.slot_values` (slot to list of alternatives, the
//! first one is used), `state.requested_slots` and `state.active_intent`.
//! System frames hold span annotations (`slot`, `start`, `exclusive_end`,
//! character offsets) used for delexicalization. MultiWOZ slot names carry a
//! `<domain>-` prefix which is stripped; SGD services map to their family,
//! lowercased without the numeric suffix (`Restaurants_1` becomes
//! `restaurants`).
//!
//! MultiWOZ slots named `book*` are booking slots; `address`, `phone`,
//! `postcode`, `ref`, `entrancefee`, `openhours`, `trainid`, `price`,
//! `duration` and `choice` are request-only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::context_store::{make_context_key, ExampleSnippet};
use crate::database::Database;
use crate::dialogue::{Corpus, Dialogue, DialogueHistory, DomainGoal, GoalSpec, ProvidedResults, Turn};
use crate::fuzzy::is_dontcare;
use crate::schema::{DomainSchema, SlotSpec};
use crate::state::{diff_states, BeliefState, SlotMap, StateUpdate};

const SPLITS: &[&str] = &["train", "dev", "test"];
const REQUEST_ONLY: &[&str] = &[
    "address",
    "phone",
    "postcode",
    "ref",
    "entrancefee",
    "openhours",
    "trainid",
    "price",
    "duration",
    "choice",
];
/// Entity attributes replaced by placeholders when a system turn carries no
/// span annotations.
const DELEX_ATTRIBUTES: &[&str] = &[
    "name",
    "address",
    "phone",
    "postcode",
    "trainid",
    "price",
    "entrancefee",
    "duration",
    "openhours",
];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: invalid JSON: {message}")]
    Json { path: String, message: String },
    #[error("dialogue {id}: {message}")]
    Dialogue { id: String, message: String },
    #[error("{0}")]
    Layout(String),
}

fn read(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IngestError> {
    serde_json::from_str(&read(path)?).map_err(|e| IngestError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn json_files(dir: &Path, skip: &[&str]) -> Result<Vec<PathBuf>, IngestError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| IngestError::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| !p.file_name().is_some_and(|n| skip.iter().any(|s| n == *s)))
        .collect();
    out.sort();
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct RawSchemaSlot {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    is_categorical: bool,
    #[serde(default)]
    possible_values: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RawService {
    service_name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    slots: Vec<RawSchemaSlot>,
}

#[derive(Debug, Deserialize)]
struct RawSpan {
    slot: String,
    #[serde(default)]
    start: Option<usize>,
    #[serde(default)]
    exclusive_end: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
struct RawState {
    #[serde(default)]
    active_intent: String,
    #[serde(default)]
    requested_slots: Vec<String>,
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Deserialize)]
struct RawFrame {
    service: String,
    #[serde(default)]
    slots: Vec<RawSpan>,
    #[serde(default)]
    state: Option<RawState>,
    #[serde(default)]
    service_results: Option<Vec<BTreeMap<String, Value>>>,
}

#[derive(Debug, Deserialize)]
struct RawTurn {
    speaker: String,
    utterance: String,
    #[serde(default)]
    frames: Vec<RawFrame>,
}

#[derive(Debug, Deserialize)]
struct RawDialogue {
    dialogue_id: String,
    #[serde(default)]
    services: Vec<String>,
    turns: Vec<RawTurn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flavor {
    MultiWoz,
    Sgd,
}

impl Flavor {
    fn domain(self, service: &str) -> String {
        match self {
            Flavor::MultiWoz => service.to_lowercase(),
            Flavor::Sgd => sgd_family(service),
        }
    }

    fn slot<'a>(self, domain: &str, name: &'a str) -> &'a str {
        match self {
            Flavor::MultiWoz => name
                .strip_prefix(domain)
                .and_then(|s| s.strip_prefix('-'))
                .unwrap_or(name),
            Flavor::Sgd => name,
        }
    }

    fn placeholder(self, domain: &str, slot: &str) -> String {
        match self {
            Flavor::MultiWoz => {
                let slot = match slot {
                    "ref" | "bookreference" => "reference",
                    s => s,
                };
                format!("[{domain}_{slot}]")
            }
            Flavor::Sgd => format!("[{slot}]"),
        }
    }
}

/// `Restaurants_1` → `restaurants`.
pub fn sgd_family(service: &str) -> String {
    let base = match service.rsplit_once('_') {
        Some((head, tail)) if !tail.is_empty() && tail.chars().all(|c| c.is_ascii_digit()) => head,
        _ => service,
    };
    base.to_lowercase()
}

/// A parsed corpus with its entity database and non-fatal load warnings.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub database: Option<Database>,
    pub warnings: Vec<String>,
}

fn build_schemas(services: Vec<RawService>, flavor: Flavor) -> Vec<DomainSchema> {
    // first-appearance order is kept; it is the order domains are offered to the detector
    let mut schemas: Vec<DomainSchema> = Vec::new();
    for svc in services {
        let domain = flavor.domain(&svc.service_name);
        let idx = match schemas.iter().position(|s| s.name == domain) {
            Some(i) => i,
            None => {
                schemas.push(DomainSchema::new(domain.clone(), svc.description.clone()));
                schemas.len() - 1
            }
        };
        let schema = &mut schemas[idx];
        for raw in svc.slots {
            let name = flavor.slot(&domain, &raw.name).to_lowercase();
            if schema.slot(&name).is_some() {
                continue;
            }
            let mut spec = SlotSpec::new(name.clone(), raw.description);
            let values: Vec<String> = raw
                .possible_values
                .into_iter()
                .filter(|v| !is_dontcare(v))
                .collect();
            if raw.is_categorical && !values.is_empty() {
                spec.values = Some(values);
            }
            if flavor == Flavor::MultiWoz {
                spec.booking = name.starts_with("book");
                if REQUEST_ONLY.contains(&name.as_str()) {
                    spec.informable = false;
                    spec.requestable = true;
                }
            }
            schema.slots.push(spec);
        }
    }
    schemas
}

fn char_to_byte(text: &str, idx: usize) -> Option<usize> {
    if idx == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(idx).map(|(b, _)| b)
}

/// Replaces annotated character spans with placeholders. Overlapping or
/// out-of-range spans are skipped.
fn delex_spans(text: &str, spans: &[(usize, usize, String)]) -> String {
    let mut spans: Vec<_> = spans
        .iter()
        .filter_map(|(s, e, p)| Some((char_to_byte(text, *s)?, char_to_byte(text, *e)?, p)))
        .filter(|(s, e, _)| s < e)
        .collect();
    spans.sort_by_key(|(s, e, _)| (*s, *e));
    let mut out = String::new();
    let mut pos = 0;
    for (s, e, p) in spans {
        if s < pos {
            continue;
        }
        out.push_str(&text[pos..s]);
        out.push_str(p);
        pos = e;
    }
    out.push_str(&text[pos..]);
    out
}

/// Replaces whole-word, case-insensitive occurrences of each value by its
/// placeholder, longest value first.
pub fn delexicalize_values(text: &str, values: &[(String, String)]) -> String {
    let mut pairs: Vec<&(String, String)> = values.iter().filter(|(_, v)| v.trim().len() > 1).collect();
    pairs.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
    let mut out = text.to_string();
    for (placeholder, value) in pairs {
        let needle = value.to_lowercase();
        let lower = out.to_lowercase();
        // lowercasing can change byte lengths outside ASCII; skip such texts
        if lower.len() != out.len() {
            continue;
        }
        let mut result = String::new();
        let mut pos = 0;
        let mut from = 0;
        while let Some(off) = lower[from..].find(&needle) {
            let i = from + off;
            let end = i + needle.len();
            let before_ok = out[..i].chars().next_back().is_none_or(|c| !c.is_alphanumeric() && c != '_');
            let after_ok = out[end..].chars().next().is_none_or(|c| !c.is_alphanumeric() && c != '_');
            let in_placeholder = out[..i].rfind('[') > out[..i].rfind(']');
            if before_ok && after_ok && !in_placeholder {
                result.push_str(&out[pos..i]);
                result.push_str(placeholder);
                pos = end;
            }
            from = end;
        }
        result.push_str(&out[pos..]);
        out = result;
    }
    out
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

struct Ctx<'a> {
    flavor: Flavor,
    schemas: &'a [DomainSchema],
    db: Option<&'a Database>,
    warnings: &'a mut Vec<String>,
}

fn convert_dialogue(raw: RawDialogue, split: &str, ctx: &mut Ctx<'_>) -> Result<Dialogue, IngestError> {
    let id = raw.dialogue_id.trim_end_matches(".json").to_string();
    let err = |message: String| IngestError::Dialogue {
        id: id.clone(),
        message,
    };
    let mut domains: Vec<String> = Vec::new();
    for s in &raw.services {
        let d = ctx.flavor.domain(s);
        if !domains.contains(&d) {
            domains.push(d);
        }
    }
    let mut turns = Vec::new();
    let mut prev_state = BeliefState::new();
    let mut prev_domain: Option<String> = None;
    let mut iter = raw.turns.into_iter().peekable();
    while let Some(user) = iter.next() {
        if !user.speaker.eq_ignore_ascii_case("user") {
            return Err(err(format!("expected a USER turn, found {}", user.speaker)));
        }
        let system = match iter.peek() {
            Some(t) if t.speaker.eq_ignore_ascii_case("system") => iter.next(),
            _ => None,
        };

        let mut state = BeliefState::new();
        let mut active: Vec<String> = Vec::new();
        let mut changed: Vec<String> = Vec::new();
        let mut requested: Vec<(String, Vec<String>)> = Vec::new();
        for frame in &user.frames {
            let domain = ctx.flavor.domain(&frame.service);
            let Some(fs) = &frame.state else { continue };
            let schema = crate::schema::find(ctx.schemas, &domain);
            for (full, values) in &fs.slot_values {
                let slot = ctx.flavor.slot(&domain, full).to_lowercase();
                if schema.is_none_or(|s| s.slot(&slot).is_none()) {
                    ctx.warnings.push(format!("{id}: unknown slot {domain}.{slot} skipped"));
                    continue;
                }
                if let Some(v) = values.first() {
                    state.insert(&domain, &slot, v);
                }
            }
            if !fs.active_intent.is_empty() && !fs.active_intent.eq_ignore_ascii_case("none") {
                active.push(domain.clone());
            }
            let reqs = fs
                .requested_slots
                .iter()
                .map(|r| ctx.flavor.slot(&domain, r).to_lowercase())
                .collect();
            requested.push((domain.clone(), reqs));
            if !domains.contains(&domain) && (state.domain(&domain).is_some() || active.contains(&domain)) {
                domains.push(domain.clone());
            }
        }
        // a service without a frame in this turn keeps its earlier state
        let framed: BTreeSet<String> = user.frames.iter().map(|f| ctx.flavor.domain(&f.service)).collect();
        for (d, slot, v) in prev_state.triples() {
            if !framed.contains(d) {
                state.insert(d, slot, v);
            }
        }
        for d in state.domains().chain(prev_state.domains()) {
            if state.domain(d) != prev_state.domain(d) && !changed.iter().any(|c| c == d) {
                changed.push(d.to_string());
            }
        }
        let gold_domain = match active.len() {
            1 => Some(active[0].clone()),
            n if n > 1 => active
                .iter()
                .find(|d| changed.contains(d))
                .or_else(|| active.iter().find(|d| Some(*d) == prev_domain.as_ref()))
                .or(active.first())
                .cloned(),
            _ => changed.first().cloned().or_else(|| prev_domain.clone()),
        }
        .or_else(|| domains.first().cloned());

        let mut turn = Turn::new(user.utterance);
        turn.gold_state = Some(state.clone());
        turn.gold_domain = gold_domain.clone();
        if let Some(d) = &gold_domain {
            let mut seen = BTreeSet::new();
            turn.requested_slots = requested
                .iter()
                .filter(|(rd, _)| rd == d)
                .flat_map(|(_, r)| r.iter().cloned())
                .filter(|r| seen.insert(r.clone()))
                .collect();
        }

        if let Some(sys) = &system {
            turn.system_response = Some(sys.utterance.clone());
            let mut spans = Vec::new();
            for frame in &sys.frames {
                let domain = ctx.flavor.domain(&frame.service);
                for s in &frame.slots {
                    if let (Some(a), Some(b)) = (s.start, s.exclusive_end) {
                        let slot = ctx.flavor.slot(&domain, &s.slot).to_lowercase();
                        spans.push((a, b, ctx.flavor.placeholder(&domain, &slot)));
                    }
                }
            }
            let delex = if !spans.is_empty() {
                delex_spans(&sys.utterance, &spans)
            } else {
                fallback_delex(&sys.utterance, gold_domain.as_deref(), &state, sys, ctx)
            };
            turn.system_response_delex = Some(delex);
        }
        if ctx.flavor == Flavor::Sgd {
            let records = system
                .iter()
                .flat_map(|s| &s.frames)
                .filter(|f| Some(ctx.flavor.domain(&f.service)) == gold_domain)
                .filter_map(|f| f.service_results.as_ref())
                .flatten()
                .map(|r| {
                    r.iter()
                        .filter_map(|(k, v)| Some((k.to_lowercase(), scalar_text(v)?)))
                        .collect()
                })
                .collect();
            turn.provided_results = Some(ProvidedResults { records });
        }
        prev_state = state;
        prev_domain = gold_domain;
        turns.push(turn);
    }
    Ok(Dialogue {
        id,
        split: split.to_string(),
        domains,
        goal: None,
        turns,
    })
}

fn fallback_delex(text: &str, domain: Option<&str>, state: &BeliefState, sys: &RawTurn, ctx: &Ctx<'_>) -> String {
    let Some(domain) = domain else {
        return text.to_string();
    };
    let mut values: Vec<(String, String)> = Vec::new();
    match ctx.flavor {
        Flavor::MultiWoz => {
            let Some(db) = ctx.db.filter(|db| db.has_domain(domain)) else {
                return text.to_string();
            };
            let schema = crate::schema::find(ctx.schemas, domain);
            if let Ok(result) = db.query(domain, state, schema, crate::fuzzy::DEFAULT_THRESHOLD) {
                for e in result.entities.iter().take(5) {
                    for attr in DELEX_ATTRIBUTES {
                        if let Some(v) = e.get(attr) {
                            values.push((ctx.flavor.placeholder(domain, attr), v.to_string()));
                        }
                    }
                }
            }
        }
        Flavor::Sgd => {
            for f in &sys.frames {
                if let Some(first) = f.service_results.as_ref().and_then(|r| r.first()) {
                    for (k, v) in first {
                        if let Some(v) = scalar_text(v) {
                            values.push((ctx.flavor.placeholder(domain, &k.to_lowercase()), v));
                        }
                    }
                }
            }
        }
    }
    delexicalize_values(text, &values)
}

#[derive(Debug, Deserialize)]
struct RawGoalDomain {
    #[serde(default)]
    info: BTreeMap<String, Value>,
    #[serde(default)]
    reqt: Vec<String>,
    #[serde(default)]
    book: BTreeMap<String, Value>,
}

fn strip_tags(s: &str) -> String {
    let mut out = String::new();
    let mut in_tag = false;
    for c in s.chars() {
        match c {
            '<' => in_tag = true,
            '>' => in_tag = false,
            c if !in_tag => out.push(c),
            _ => {}
        }
    }
    out
}

fn parse_goal(raw: &serde_json::Map<String, Value>) -> GoalSpec {
    let mut goal = GoalSpec::default();
    for (key, value) in raw {
        if key == "message" {
            goal.message = match value {
                Value::String(s) => strip_tags(s),
                Value::Array(parts) => parts
                    .iter()
                    .filter_map(Value::as_str)
                    .map(strip_tags)
                    .collect::<Vec<_>>()
                    .join(" "),
                _ => String::new(),
            };
            continue;
        }
        let Ok(d) = serde_json::from_value::<RawGoalDomain>(value.clone()) else {
            continue;
        };
        if d.info.is_empty() && d.reqt.is_empty() && d.book.is_empty() {
            continue;
        }
        let text_map = |m: &BTreeMap<String, Value>| -> SlotMap {
            m.iter()
                .filter(|(k, _)| k.as_str() != "invalid" && k.as_str() != "pre_invalid")
                .filter_map(|(k, v)| Some((k.to_lowercase(), scalar_text(v)?)))
                .collect()
        };
        goal.domains.insert(
            key.to_lowercase(),
            DomainGoal {
                informable: text_map(&d.info),
                requested: d.reqt.iter().map(|r| r.to_lowercase().replace(' ', "")).collect(),
                book: text_map(&d.book),
            },
        );
    }
    goal
}

fn finish(mut dialogues: Vec<Dialogue>, name: &str, schemas: Vec<DomainSchema>) -> Corpus {
    dialogues.sort_by(|a, b| a.id.cmp(&b.id));
    let mut corpus = Corpus {
        name: name.to_string(),
        dialogues,
        schemas,
    };
    derive_gold_updates(&mut corpus);
    corpus
}

fn load_dialogue_files(
    dir: &Path,
    split: &str,
    skip: &[&str],
    ctx: &mut Ctx<'_>,
    out: &mut Vec<Dialogue>,
) -> Result<(), IngestError> {
    for file in json_files(dir, skip)? {
        let raw: Vec<RawDialogue> = read_json(&file)?;
        for d in raw {
            out.push(convert_dialogue(d, split, ctx)?);
        }
    }
    Ok(())
}

/// Loads a MultiWOZ 2.2 directory (see module docs for the layout).
pub fn load_multiwoz(root: &Path) -> Result<LoadedCorpus, IngestError> {
    let schema_path = root.join("schema.json");
    if !schema_path.exists() {
        return Err(IngestError::Layout(format!("{} not found", schema_path.display())));
    }
    let schemas = build_schemas(read_json(&schema_path)?, Flavor::MultiWoz);
    let db_dir = root.join("db");
    let database = if db_dir.is_dir() {
        Some(Database::load_dir(&db_dir).map_err(|e| IngestError::Layout(e.to_string()))?)
    } else {
        None
    };
    let mut warnings = Vec::new();
    let mut dialogues = Vec::new();
    {
        let mut ctx = Ctx {
            flavor: Flavor::MultiWoz,
            schemas: &schemas,
            db: database.as_ref(),
            warnings: &mut warnings,
        };
        for split in SPLITS {
            let dir = root.join(split);
            if dir.is_dir() {
                load_dialogue_files(&dir, split, &[], &mut ctx, &mut dialogues)?;
            }
        }
    }
    let goals_path = root.join("goals.json");
    if goals_path.exists() {
        let goals: BTreeMap<String, serde_json::Map<String, Value>> = read_json(&goals_path)?;
        for d in &mut dialogues {
            let raw = goals.get(&d.id).or_else(|| goals.get(&format!("{}.json", d.id)));
            if let Some(raw) = raw {
                d.goal = Some(parse_goal(raw));
            }
        }
    }
    Ok(LoadedCorpus {
        corpus: finish(dialogues, "multiwoz", schemas),
        database,
        warnings,
    })
}

/// Loads an SGD directory (see module docs for the layout).
pub fn load_sgd(root: &Path) -> Result<LoadedCorpus, IngestError> {
    let mut services = Vec::new();
    let mut present = Vec::new();
    for split in SPLITS {
        let dir = root.join(split);
        if dir.join("schema.json").exists() {
            services.extend(read_json::<Vec<RawService>>(&dir.join("schema.json"))?);
            present.push(*split);
        }
    }
    if present.is_empty() {
        return Err(IngestError::Layout(format!(
            "no <split>/schema.json under {}",
            root.display()
        )));
    }
    let schemas = build_schemas(services, Flavor::Sgd);
    let mut warnings = Vec::new();
    let mut dialogues = Vec::new();
    {
        let mut ctx = Ctx {
            flavor: Flavor::Sgd,
            schemas: &schemas,
            db: None,
            warnings: &mut warnings,
        };
        for split in present {
            load_dialogue_files(&root.join(split), split, &["schema.json"], &mut ctx, &mut dialogues)?;
        }
    }
    Ok(LoadedCorpus {
        corpus: finish(dialogues, "sgd", schemas),
        database: None,
        warnings,
    })
}

/// Sets each turn's gold updates to the diff against the previous turn's
/// gold state. Turns without a gold state are left untouched.
pub fn derive_gold_updates(corpus: &mut Corpus) {
    for d in &mut corpus.dialogues {
        let mut prev = BeliefState::new();
        for t in &mut d.turns {
            if let Some(state) = &t.gold_state {
                t.gold_updates = Some(diff_states(&prev, state));
                prev = state.clone();
            }
        }
    }
}

/// Context-store candidates from one split, with context keys built over
/// gold history. Only turns with a gold domain and a delexicalized reply
/// are used.
pub fn snippets(corpus: &Corpus, split: &str, window: usize) -> Vec<ExampleSnippet> {
    let mut out = Vec::new();
    for d in corpus.split(split) {
        let mut history = DialogueHistory::new();
        for (i, t) in d.turns.iter().enumerate() {
            if let (Some(domain), Some(delex), Some(state)) = (&t.gold_domain, &t.system_response_delex, &t.gold_state) {
                let update = t
                    .gold_updates
                    .iter()
                    .flatten()
                    .find(|u| &u.domain == domain)
                    .cloned()
                    .unwrap_or_else(|| StateUpdate::new(domain.clone()));
                out.push(ExampleSnippet {
                    dialogue_id: d.id.clone(),
                    turn_index: i,
                    dialogue_domains: d.domains.clone(),
                    domain: domain.clone(),
                    context_key: make_context_key(&history, &t.user_utterance, window),
                    gold_update: update,
                    gold_state: state.clone(),
                    gold_response_delex: delex.clone(),
                });
            }
            history.push_exchange(t.user_utterance.clone(), t.system_response.clone().unwrap_or_default());
        }
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    name: String,
    dialogues: usize,
}

/// Writes `meta.json`, `schemas.json`, `dialogues.jsonl` and, when present,
/// `database.json` into `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus, database: Option<&Database>) -> Result<(), IngestError> {
    let io = |p: &Path, e: &dyn std::fmt::Display| IngestError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    fs::create_dir_all(dir).map_err(|e| io(dir, &e))?;
    let write = |name: &str, text: String| -> Result<(), IngestError> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| io(&p, &e))
    };
    let meta = CacheMeta {
        name: corpus.name.clone(),
        dialogues: corpus.dialogues.len(),
    };
    write("meta.json", serde_json::to_string_pretty(&meta).expect("meta serializes"))?;
    write(
        "schemas.json",
        serde_json::to_string_pretty(&corpus.schemas).expect("schemas serialize"),
    )?;
    let mut lines = String::new();
    for d in &corpus.dialogues {
        lines.push_str(&serde_json::to_string(d).expect("dialogue serializes"));
        lines.push('\n');
    }
    write("dialogues.jsonl", lines)?;
    if let Some(db) = database {
        write("database.json", serde_json::to_string(db).expect("database serializes"))?;
    }
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<(Corpus, Option<Database>), IngestError> {
    let meta: CacheMeta = read_json(&dir.join("meta.json"))?;
    let schemas: Vec<DomainSchema> = read_json(&dir.join("schemas.json"))?;
    let path = dir.join("dialogues.jsonl");
    let mut dialogues = Vec::new();
    for (n, line) in read(&path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        dialogues.push(serde_json::from_str(line).map_err(|e| IngestError::Json {
            path: format!("{}:{}", path.display(), n + 1),
            message: e.to_string(),
        })?);
    }
    let db_path = dir.join("database.json");
    let database = if db_path.exists() { Some(read_json(&db_path)?) } else { None };
    Ok((
        Corpus {
            name: meta.name,
            dialogues,
            schemas,
        },
        database,
    ))
}

/// Loads either a prepared corpus cache or a raw MultiWOZ/SGD directory.
pub fn load_any(path: &Path) -> Result<LoadedCorpus, IngestError> {
    if path.join("dialogues.jsonl").exists() {
        let (corpus, database) = load_corpus(path)?;
        return Ok(LoadedCorpus {
            corpus,
            database,
            warnings: Vec::new(),
        });
    }
    if path.join("schema.json").exists() {
        return load_multiwoz(path);
    }
    load_sgd(path)
}
