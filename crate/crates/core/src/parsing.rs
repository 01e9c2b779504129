//! Tolerant parsers for raw model completions.
//!
//! Every parser is total: any input yields a [`ParseOutcome`], and anything
//! that deviates from the requested format is reported as a warning instead
//! of an error.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::fuzzy::{canonicalize_value, DEFAULT_THRESHOLD};
use crate::schema::DomainSchema;
use crate::state::{SlotMap, StateUpdate};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "kebab-case")]
pub enum ParseWarning {
    InvalidStructure,
    /// A structured object that needed lenient repair to read.
    RepairedStructure,
    UnknownSlotDropped(String),
    ExtraContentTruncated,
    /// Case, quoting, separators or role labels differed from the format.
    Normalized,
    NoDomainFound,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseWarning::InvalidStructure => f.write_str("invalid-structure"),
            ParseWarning::RepairedStructure => f.write_str("repaired-structure"),
            ParseWarning::UnknownSlotDropped(s) => write!(f, "unknown-slot-dropped:{s}"),
            ParseWarning::ExtraContentTruncated => f.write_str("extra-content-truncated"),
            ParseWarning::Normalized => f.write_str("normalized"),
            ParseWarning::NoDomainFound => f.write_str("no-domain-found"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseOutcome<T> {
    pub value: T,
    pub warnings: Vec<ParseWarning>,
}

impl<T> ParseOutcome<T> {
    fn new(value: T, warnings: Vec<ParseWarning>) -> Self {
        Self { value, warnings }
    }

    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }

    pub fn warning_tags(&self) -> Vec<String> {
        self.warnings.iter().map(ToString::to_string).collect()
    }
}

fn push_unique(warnings: &mut Vec<ParseWarning>, w: ParseWarning) {
    if !warnings.contains(&w) {
        warnings.push(w);
    }
}

/// Renders pairs in the hyphen-separated `slot:"value"` format.
pub fn format_pairs(pairs: &SlotMap) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{k}:\"{v}\""))
        .collect::<Vec<_>>()
        .join("-")
}

/// Renders pairs as a JSON object.
pub fn format_json(pairs: &SlotMap) -> String {
    serde_json::to_string(pairs).expect("string map serializes")
}

static QUOTED_PAIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"([A-Za-z][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*?)(\s*):(\s*)"([^"\n]*)""#).unwrap()
});
static BARE_PAIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"([A-Za-z][A-Za-z0-9_]*(?:-[A-Za-z0-9_]+)*?)\s*:\s*([^\-\n,;"{}]*)"#).unwrap()
});
static PLACEHOLDER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[([A-Za-z][A-Za-z0-9_]*)\]").unwrap());
static SPEAKER_MARKER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(?:^|[\s\p{P}])(customer|assistant|user|system)\s*:").unwrap()
});
static LEADING_LABEL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(assistant|system|response|answer)\s*:").unwrap());

/// Resolves a raw key to a schema slot name, or `None` when unknown.
fn resolve_slot(raw_key: &str, schema: &DomainSchema) -> Option<String> {
    let key = raw_key.trim().trim_matches(|c| c == '"' || c == '\'').to_lowercase();
    if schema.slot(&key).is_some() {
        return Some(key);
    }
    for sep in ['-', '_', '.'] {
        if let Some(rest) = key.strip_prefix(&format!("{}{sep}", schema.name)) {
            if schema.slot(rest).is_some() {
                return Some(rest.to_string());
            }
        }
    }
    None
}

/// Accumulates raw pairs into an update: resolves names, canonicalizes
/// values and drops empties.
struct PairSink<'a> {
    schema: &'a DomainSchema,
    threshold: f64,
    update: StateUpdate,
    warnings: Vec<ParseWarning>,
}

impl<'a> PairSink<'a> {
    fn new(schema: &'a DomainSchema, threshold: f64) -> Self {
        Self {
            schema,
            threshold,
            update: StateUpdate::new(schema.name.clone()),
            warnings: Vec::new(),
        }
    }

    fn add(&mut self, raw_key: &str, raw_value: &str) {
        let Some(slot) = resolve_slot(raw_key, self.schema) else {
            let key = raw_key.trim().to_lowercase();
            push_unique(&mut self.warnings, ParseWarning::UnknownSlotDropped(key));
            return;
        };
        let spec = self.schema.slot(&slot).expect("resolved slot exists");
        let value = canonicalize_value(raw_value, spec, self.threshold);
        if value.is_empty() {
            return;
        }
        self.update.pairs.insert(slot, value);
    }

    fn finish(mut self, extra: Vec<ParseWarning>) -> ParseOutcome<StateUpdate> {
        for w in extra {
            push_unique(&mut self.warnings, w);
        }
        self.update.warnings = self.warnings.iter().map(ToString::to_string).collect();
        ParseOutcome::new(self.update, self.warnings)
    }
}

/// Byte span of the first balanced `{...}` block, ignoring braces in strings.
fn brace_span(text: &str) -> Option<(usize, usize)> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                '\\' if !escaped => escaped = true,
                '"' if !escaped => in_str = false,
                _ => escaped = false,
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((start, start + i + 1));
                }
            }
            _ => {}
        }
    }
    None
}

fn scalar_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "yes" } else { "no" }.to_string()),
        Value::Array(items) => items.first().and_then(scalar_text),
        Value::Null | Value::Object(_) => None,
    }
}

fn parse_structured(
    text: &str,
    schema: &DomainSchema,
    threshold: f64,
) -> Option<ParseOutcome<StateUpdate>> {
    let trimmed = text.trim();
    let (start, end) = brace_span(trimmed)?;
    let block = &trimmed[start..end];
    let mut extra = Vec::new();
    if start > 0 || end < trimmed.len() {
        extra.push(ParseWarning::ExtraContentTruncated);
    }
    let mut sink = PairSink::new(schema, threshold);

    if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(block) {
        // `{"hotel": {...}}` wraps the pairs in the domain name.
        let mut entries: Vec<(String, Value)> = map.into_iter().collect();
        if entries.len() == 1 && entries[0].1.is_object() {
            let (key, inner) = entries.remove(0);
            if key.to_lowercase() != schema.name {
                sink.warnings
                    .push(ParseWarning::UnknownSlotDropped(key.to_lowercase()));
            }
            extra.push(ParseWarning::Normalized);
            if let Value::Object(inner) = inner {
                entries = inner.into_iter().collect();
            }
        }
        for (k, v) in entries {
            match v {
                Value::String(s) => sink.add(&k, &s),
                other => {
                    extra.push(ParseWarning::Normalized);
                    if let Some(s) = scalar_text(&other) {
                        sink.add(&k, &s);
                    }
                }
            }
        }
        return Some(sink.finish(extra));
    }

    // Not valid JSON: read `key: value` entries separated by commas/newlines.
    let inner = &block[1..block.len() - 1];
    let mut found = false;
    for part in split_outside_quotes(inner) {
        if let Some((k, v)) = part.split_once(':') {
            let k = k.trim();
            if k.is_empty() {
                continue;
            }
            found = true;
            sink.add(k, v.trim().trim_end_matches(','));
        }
    }
    if !found && !inner.trim().is_empty() {
        return None;
    }
    extra.push(ParseWarning::RepairedStructure);
    Some(sink.finish(extra))
}

fn split_outside_quotes(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut in_str = false;
    let mut last = 0;
    for (i, c) in s.char_indices() {
        match c {
            '"' => in_str = !in_str,
            ',' | '\n' | ';' if !in_str => {
                parts.push(&s[last..i]);
                last = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[last..]);
    parts
}

fn gap_warning(gap: &str, between: bool) -> Option<ParseWarning> {
    if between && gap == "-" {
        return None;
    }
    if gap.chars().all(|c| c == '-' || c == ',' || c == ';' || c.is_whitespace()) {
        if gap.is_empty() && !between {
            None
        } else {
            Some(ParseWarning::Normalized)
        }
    } else {
        Some(ParseWarning::ExtraContentTruncated)
    }
}

fn parse_pairs(text: &str, schema: &DomainSchema, threshold: f64) -> ParseOutcome<StateUpdate> {
    let trimmed = text.trim();
    let mut sink = PairSink::new(schema, threshold);
    let mut extra = Vec::new();

    let quoted: Vec<_> = QUOTED_PAIR.captures_iter(trimmed).collect();
    if !quoted.is_empty() {
        let mut cursor = 0;
        for (i, cap) in quoted.iter().enumerate() {
            let whole = cap.get(0).unwrap();
            if let Some(w) = gap_warning(&trimmed[cursor..whole.start()], i > 0) {
                push_unique(&mut extra, w);
            }
            if !cap[2].is_empty() || !cap[3].is_empty() {
                push_unique(&mut extra, ParseWarning::Normalized);
            }
            sink.add(&cap[1], &cap[4]);
            cursor = whole.end();
        }
        if let Some(w) = gap_warning(&trimmed[cursor..], false) {
            push_unique(&mut extra, w);
        }
        return sink.finish(extra);
    }

    let mut found = false;
    for cap in BARE_PAIR.captures_iter(trimmed) {
        found = true;
        sink.add(&cap[1], cap[2].trim());
    }
    if found {
        extra.push(ParseWarning::Normalized);
        return sink.finish(extra);
    }
    if trimmed.is_empty() {
        return sink.finish(extra);
    }
    let lowered = trimmed.to_lowercase();
    if matches!(lowered.trim_end_matches('.'), "none" | "n/a" | "nothing" | "-") {
        extra.push(ParseWarning::Normalized);
    } else {
        extra.push(ParseWarning::InvalidStructure);
    }
    sink.finish(extra)
}

/// Parses a state-tracking completion into a turn-level update.
///
/// Tries a brace-delimited structured object first, then the
/// hyphen-separated `slot:"value"` list.
pub fn parse_state_output(text: &str, schema: &DomainSchema) -> ParseOutcome<StateUpdate> {
    parse_state_output_with(text, schema, DEFAULT_THRESHOLD)
}

pub fn parse_state_output_with(
    text: &str,
    schema: &DomainSchema,
    threshold: f64,
) -> ParseOutcome<StateUpdate> {
    if let Some(outcome) = parse_structured(text, schema, threshold) {
        return outcome;
    }
    parse_pairs(text, schema, threshold)
}

/// Picks the first listed domain that occurs as a token of the completion.
///
/// Falls back to `previous`, then to the first domain, with a
/// `no-domain-found` warning.
pub fn parse_domain_output<S: AsRef<str>>(
    text: &str,
    domains: &[S],
    previous: Option<&str>,
) -> ParseOutcome<String> {
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|t| !t.is_empty())
        .collect();
    for d in domains {
        let d = d.as_ref();
        if tokens.contains(&d) {
            let warnings = if text == d {
                Vec::new()
            } else {
                vec![ParseWarning::Normalized]
            };
            return ParseOutcome::new(d.to_string(), warnings);
        }
    }
    let fallback = previous
        .map(str::to_string)
        .or_else(|| domains.first().map(|d| d.as_ref().to_string()))
        .unwrap_or_default();
    ParseOutcome::new(fallback, vec![ParseWarning::NoDomainFound])
}

fn strip_outer_quotes(s: &str) -> Option<&str> {
    let pairs = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}')];
    for (open, close) in pairs {
        if let Some(inner) = s.strip_prefix(open).and_then(|t| t.strip_suffix(close)) {
            return Some(inner);
        }
    }
    None
}

fn sanitize_once(text: &str, warnings: &mut Vec<ParseWarning>) -> String {
    let mut s = text.trim().to_string();
    loop {
        if let Some(m) = LEADING_LABEL.find(&s) {
            s = s[m.end()..].trim().to_string();
        } else if let Some(inner) = strip_outer_quotes(&s) {
            s = inner.trim().to_string();
        } else {
            break;
        }
        push_unique(warnings, ParseWarning::Normalized);
    }
    if let Some(cap) = SPEAKER_MARKER.captures(&s) {
        let cut = cap.get(1).expect("group 1 always participates").start();
        s = s[..cut].trim().to_string();
        push_unique(warnings, ParseWarning::ExtraContentTruncated);
    }
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed != s {
        push_unique(warnings, ParseWarning::Normalized);
    }
    collapsed
}

/// Cleans a generated system reply: drops hallucinated further turns, role
/// labels and wrapping quotes, and collapses whitespace. Bracketed
/// placeholders are left as they are.
pub fn sanitize_response(text: &str) -> ParseOutcome<String> {
    let mut warnings = Vec::new();
    let mut current = text.to_string();
    loop {
        let next = sanitize_once(&current, &mut warnings);
        if next == current {
            break;
        }
        current = next;
    }
    if current != text && warnings.is_empty() {
        warnings.push(ParseWarning::Normalized);
    }
    ParseOutcome::new(current, warnings)
}

/// `[name]` placeholders in order of appearance, lowercased.
pub fn extract_placeholders(text: &str) -> Vec<String> {
    PLACEHOLDER
        .captures_iter(text)
        .map(|c| c[1].to_lowercase())
        .collect()
}
