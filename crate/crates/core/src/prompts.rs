//! Prompt templates and rendering for the three per-turn calls.
//!
//! Templates are plain text with `{placeholder}` markers. A template set is
//! a directory holding one global `domain_detect.txt`, default
//! `state.txt`/`response.txt`, and optional per-domain overrides named
//! `state.<domain>.txt` / `response.<domain>.txt`. Multi-line segments are
//! newline-terminated when non-empty and render to nothing when empty, so a
//! template reads `{history}Customer: ...` without dangling separators.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context_store::StoredExample;
use crate::database::DbResult;
use crate::dialogue::DialogueHistory;
use crate::parsing::format_pairs;
use crate::schema::DomainSchema;
use crate::state::BeliefState;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template {file}: unknown placeholder `{{{name}}}`")]
    UnknownPlaceholder { file: String, name: String },
    #[error("no {kind} template for domain `{domain}` and no default")]
    Missing { kind: PromptKind, domain: String },
    #[error("domain detection templates are global; found `{0}`")]
    DomainSpecificDetector(String),
    #[error("unknown built-in template set `{0}`")]
    UnknownBuiltin(String),
    #[error("reading templates: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    DomainDetect,
    State,
    Response,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::DomainDetect => "domain_detect",
            PromptKind::State => "state",
            PromptKind::Response => "response",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Placeholder {
    Domain,
    DomainList,
    DomainDescription,
    SlotList,
    RetrievedPositiveExamples,
    RetrievedNegativeExamples,
    History,
    UserUtterance,
    BeliefState,
    DbResults,
}

impl Placeholder {
    pub const ALL: [Placeholder; 10] = [
        Placeholder::Domain,
        Placeholder::DomainList,
        Placeholder::DomainDescription,
        Placeholder::SlotList,
        Placeholder::RetrievedPositiveExamples,
        Placeholder::RetrievedNegativeExamples,
        Placeholder::History,
        Placeholder::UserUtterance,
        Placeholder::BeliefState,
        Placeholder::DbResults,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Placeholder::Domain => "domain",
            Placeholder::DomainList => "domain_list",
            Placeholder::DomainDescription => "domain_description",
            Placeholder::SlotList => "slot_list",
            Placeholder::RetrievedPositiveExamples => "retrieved_positive_examples",
            Placeholder::RetrievedNegativeExamples => "retrieved_negative_examples",
            Placeholder::History => "history",
            Placeholder::UserUtterance => "user_utterance",
            Placeholder::BeliefState => "belief_state",
            Placeholder::DbResults => "db_results",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\{([a-z_]+)\}").unwrap());

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    /// `None` for global templates.
    pub domain: Option<String>,
    segments: Vec<Segment>,
    source: String,
}

impl PromptTemplate {
    /// Parses template text. Braces that do not enclose a lowercase
    /// identifier are literal; an identifier that is not a known
    /// placeholder is an error.
    pub fn parse(
        kind: PromptKind,
        domain: Option<String>,
        text: &str,
        file: &str,
    ) -> Result<Self, TemplateError> {
        let text = text.strip_suffix('\n').unwrap_or(text);
        let mut segments = Vec::new();
        let mut cursor = 0;
        for cap in MARKER.captures_iter(text) {
            let whole = cap.get(0).unwrap();
            let Some(p) = Placeholder::from_name(&cap[1]) else {
                return Err(TemplateError::UnknownPlaceholder {
                    file: file.to_string(),
                    name: cap[1].to_string(),
                });
            };
            if whole.start() > cursor {
                segments.push(Segment::Literal(text[cursor..whole.start()].to_string()));
            }
            segments.push(Segment::Slot(p));
            cursor = whole.end();
        }
        if cursor < text.len() {
            segments.push(Segment::Literal(text[cursor..].to_string()));
        }
        Ok(Self {
            kind,
            domain,
            segments,
            source: text.to_string(),
        })
    }

    pub fn placeholders(&self) -> impl Iterator<Item = Placeholder> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(p) => Some(*p),
            Segment::Literal(_) => None,
        })
    }

    /// Substitutes values; unbound placeholders render empty.
    pub fn render(&self, values: &BTreeMap<Placeholder, String>) -> String {
        let mut out = String::new();
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(p) => {
                    if let Some(v) = values.get(p) {
                        out.push_str(v);
                    }
                }
            }
        }
        out
    }

    pub fn source(&self) -> &str {
        &self.source
    }
}

/// Placeholder markers left in rendered text.
pub fn unresolved_placeholders(text: &str) -> Vec<String> {
    MARKER
        .captures_iter(text)
        .filter(|c| Placeholder::from_name(&c[1]).is_some())
        .map(|c| c[1].to_string())
        .collect()
}

macro_rules! builtin {
    ($set:literal, [$($file:literal),* $(,)?]) => {
        &[$(($file, include_str!(concat!("../templates/", $set, "/", $file)))),*]
    };
}

const MULTIWOZ: &[(&str, &str)] = builtin!(
    "multiwoz",
    [
        "domain_detect.txt",
        "state.txt",
        "response.txt",
        "response.hotel.txt",
        "response.restaurant.txt",
        "response.attraction.txt",
        "response.train.txt",
        "response.taxi.txt",
        "response.police.txt",
        "response.hospital.txt",
    ]
);

const SGD: &[(&str, &str)] = builtin!("sgd", ["domain_detect.txt", "state.txt", "response.txt"]);

#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<(PromptKind, Option<String>), PromptTemplate>,
    hash: String,
}

impl TemplateSet {
    /// Builds a set from `(file name, content)` pairs.
    pub fn from_files<'a, I>(files: I) -> Result<Self, TemplateError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut files: Vec<(&str, &str)> = files.into_iter().collect();
        files.sort();
        let mut hasher = Sha256::new();
        let mut templates = BTreeMap::new();
        for (name, content) in files {
            let Some(stem) = name.strip_suffix(".txt") else {
                continue;
            };
            let (kind_str, domain) = match stem.split_once('.') {
                Some((k, d)) => (k, Some(d.to_string())),
                None => (stem, None),
            };
            let kind = match kind_str {
                "domain_detect" => PromptKind::DomainDetect,
                "state" => PromptKind::State,
                "response" => PromptKind::Response,
                _ => continue,
            };
            if kind == PromptKind::DomainDetect && domain.is_some() {
                return Err(TemplateError::DomainSpecificDetector(name.to_string()));
            }
            hasher.update(name.as_bytes());
            hasher.update([0]);
            hasher.update(content.as_bytes());
            hasher.update([0]);
            let t = PromptTemplate::parse(kind, domain.clone(), content, name)?;
            templates.insert((kind, domain), t);
        }
        Ok(Self {
            templates,
            hash: hex::encode(hasher.finalize()),
        })
    }

    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut files = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            if entry.file_type()?.is_file() {
                let name = entry.file_name().to_string_lossy().into_owned();
                files.push((name, fs::read_to_string(entry.path())?));
            }
        }
        Self::from_files(files.iter().map(|(n, c)| (n.as_str(), c.as_str())))
    }

    /// Shipped template sets: `multiwoz` or `sgd`.
    pub fn builtin(name: &str) -> Result<Self, TemplateError> {
        match name {
            "multiwoz" => Self::from_files(MULTIWOZ.iter().copied()),
            "sgd" => Self::from_files(SGD.iter().copied()),
            other => Err(TemplateError::UnknownBuiltin(other.to_string())),
        }
    }

    /// Per-domain template, falling back to the kind's default.
    pub fn get(&self, kind: PromptKind, domain: Option<&str>) -> Result<&PromptTemplate, TemplateError> {
        domain
            .and_then(|d| self.templates.get(&(kind, Some(d.to_string()))))
            .or_else(|| self.templates.get(&(kind, None)))
            .ok_or_else(|| TemplateError::Missing {
                kind,
                domain: domain.unwrap_or("*").to_string(),
            })
    }

    /// SHA-256 over all file names and contents.
    pub fn content_hash(&self) -> &str {
        &self.hash
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub text: String,
    /// Ids of the stored examples included in the prompt.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

/// How DB results appear in response prompts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DbRendering {
    #[default]
    CountOnly,
    CountAndTopEntity,
}

/// Retrieved examples for one prompt. Empty in zero-shot mode.
#[derive(Debug, Clone, Copy, Default)]
pub struct FewShot<'a> {
    pub positives: &'a [StoredExample],
    pub negatives: &'a [StoredExample],
}

impl FewShot<'_> {
    pub fn is_empty(&self) -> bool {
        self.positives.is_empty() && self.negatives.is_empty()
    }
}

const BLOCK_END: &str = "-----------\n";

fn block_header(label: &str, index: usize) -> String {
    format!("------- {label} {index}: --------\n")
}

fn quoted_pairs(slots: Option<&crate::state::SlotMap>) -> String {
    match slots {
        None => String::new(),
        Some(m) => m
            .iter()
            .map(|(k, v)| format!("{k}: \"{v}\""))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

/// `hotel { pricerange: "cheap"}`; empty when the domain holds no values.
pub fn render_belief(state: &BeliefState, domain: &str) -> String {
    match state.domain(domain) {
        None => String::new(),
        Some(slots) => format!("{domain} {{ {}}}", quoted_pairs(Some(slots))),
    }
}

/// `hotels: 23`, optionally followed by the first match or the provided records.
pub fn render_db(db: Option<&DbResult>, label: &str, mode: DbRendering) -> String {
    let Some(db) = db else {
        return String::new();
    };
    let mut out = format!("{label}: {}", db.count);
    if db.provided_externally {
        for e in &db.entities {
            out.push_str(&format!("\n- {}", quoted_pairs(Some(&e.attributes))));
        }
    } else if mode == DbRendering::CountAndTopEntity {
        if let Some(e) = db.entities.first() {
            out.push_str(&format!("; first match: {{ {}}}", quoted_pairs(Some(&e.attributes))));
        }
    }
    out
}

fn history_segment(history: &DialogueHistory, window: Option<usize>) -> String {
    history.render(window)
}

fn state_examples(few_shot: &FewShot<'_>) -> (String, String) {
    let mut pos = String::new();
    for (i, ex) in few_shot.positives.iter().enumerate() {
        pos.push_str(&block_header("Example", i + 1));
        pos.push_str(&ex.context_key);
        pos.push('\n');
        pos.push_str(&format!("Output: {}\n", format_pairs(&ex.gold_update.pairs)));
    }
    let mut neg = String::new();
    for (i, ex) in few_shot.negatives.iter().enumerate() {
        neg.push_str(&block_header("Incorrect example", i + 1));
        neg.push_str(&ex.context_key);
        neg.push('\n');
        neg.push_str(&format!("Incorrect: {}\n", format_pairs(&ex.gold_update.pairs)));
    }
    if !few_shot.is_empty() {
        if neg.is_empty() {
            pos.push_str(BLOCK_END);
        } else {
            neg.push_str(BLOCK_END);
        }
    }
    (pos, neg)
}

fn response_examples(positives: &[StoredExample]) -> String {
    let mut out = String::new();
    for (i, ex) in positives.iter().enumerate() {
        out.push_str(&block_header("Example", i + 1));
        out.push_str(&ex.context_key);
        out.push('\n');
        out.push_str(&format!("State: {}\n", render_belief(&ex.gold_state, &ex.domain)));
        out.push_str(&format!("Response: {}\n", ex.gold_response_delex));
    }
    if !out.is_empty() {
        out.push_str(BLOCK_END);
    }
    out
}

pub fn render_domain_prompt<S: AsRef<str>>(
    templates: &TemplateSet,
    history: &DialogueHistory,
    utterance: &str,
    domains: &[S],
    history_window: Option<usize>,
) -> Result<RenderedPrompt, TemplateError> {
    let t = templates.get(PromptKind::DomainDetect, None)?;
    let list = domains.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", ");
    let mut values = BTreeMap::new();
    values.insert(Placeholder::DomainList, list);
    values.insert(Placeholder::History, history_segment(history, history_window));
    values.insert(Placeholder::UserUtterance, utterance.to_string());
    Ok(RenderedPrompt {
        kind: PromptKind::DomainDetect,
        text: t.render(&values),
        provenance: Vec::new(),
    })
}

fn schema_values(schema: &DomainSchema) -> BTreeMap<Placeholder, String> {
    let mut values = BTreeMap::new();
    values.insert(Placeholder::Domain, schema.name.clone());
    values.insert(Placeholder::DomainDescription, schema.description.clone());
    values
}

pub fn render_state_prompt(
    templates: &TemplateSet,
    schema: &DomainSchema,
    history: &DialogueHistory,
    utterance: &str,
    few_shot: FewShot<'_>,
    history_window: Option<usize>,
) -> Result<RenderedPrompt, TemplateError> {
    let t = templates.get(PromptKind::State, Some(&schema.name))?;
    let mut values = schema_values(schema);
    let slot_list: String = schema
        .slots
        .iter()
        .filter(|s| s.informable)
        .map(|s| s.prompt_line() + "\n")
        .collect();
    values.insert(Placeholder::SlotList, slot_list);
    let (pos, neg) = state_examples(&few_shot);
    values.insert(Placeholder::RetrievedPositiveExamples, pos);
    values.insert(Placeholder::RetrievedNegativeExamples, neg);
    values.insert(Placeholder::History, history_segment(history, history_window));
    values.insert(Placeholder::UserUtterance, utterance.to_string());
    Ok(RenderedPrompt {
        kind: PromptKind::State,
        text: t.render(&values),
        provenance: few_shot.positives.iter().map(|e| e.id.clone()).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
pub fn render_response_prompt(
    templates: &TemplateSet,
    schema: &DomainSchema,
    history: &DialogueHistory,
    utterance: &str,
    state: &BeliefState,
    db: Option<&DbResult>,
    positives: &[StoredExample],
    history_window: Option<usize>,
    db_rendering: DbRendering,
) -> Result<RenderedPrompt, TemplateError> {
    let t = templates.get(PromptKind::Response, Some(&schema.name))?;
    let mut values = schema_values(schema);
    values.insert(Placeholder::RetrievedPositiveExamples, response_examples(positives));
    values.insert(Placeholder::History, history_segment(history, history_window));
    values.insert(Placeholder::UserUtterance, utterance.to_string());
    values.insert(Placeholder::BeliefState, render_belief(state, &schema.name));
    values.insert(
        Placeholder::DbResults,
        render_db(db, &schema.db_label(), db_rendering),
    );
    Ok(RenderedPrompt {
        kind: PromptKind::Response,
        text: t.render(&values),
        provenance: positives.iter().map(|e| e.id.clone()).collect(),
    })
}
