//! Shared fixture helpers for the integration tests.
//!
//! `rule_completion` is a small keyword-driven stand-in for a language
//! model. It only exists to produce the shipped replay cassettes; regular
//! test runs replay those cassettes in strict mode. Set
//! `TOD_REGENERATE_FIXTURES=1` to re-record cassettes and golden files.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use tod_core::backends::{CompletionBackend, CompletionRequest, ReplayBackend};
use tod_core::config::PipelineConfig;
use tod_core::context_store::{build_store, Embedder, HashingEmbedder};
use tod_core::database::Database;
use tod_core::dialogue::Corpus;
use tod_core::ingest::{load_multiwoz, load_sgd, snippets, LoadedCorpus};
use tod_core::pipeline::Pipeline;
use tod_core::prompts::{PromptKind, TemplateSet};

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

pub fn regenerate() -> bool {
    std::env::var("TOD_REGENERATE_FIXTURES").is_ok_and(|v| v == "1")
}

pub fn multiwoz() -> &'static LoadedCorpus {
    static CELL: OnceLock<LoadedCorpus> = OnceLock::new();
    CELL.get_or_init(|| load_multiwoz(&fixture("multiwoz")).expect("multiwoz fixture"))
}

pub fn sgd() -> &'static LoadedCorpus {
    static CELL: OnceLock<LoadedCorpus> = OnceLock::new();
    CELL.get_or_init(|| load_sgd(&fixture("sgd")).expect("sgd fixture"))
}

/// zs-gbs, zs-obs, fs-gbs, fs-obs and the oracle-domain zs-gbs run.
pub fn variants() -> Vec<PipelineConfig> {
    let mut out = Vec::new();
    for few_shot in [false, true] {
        for oracle_state in [false, true] {
            out.push(PipelineConfig {
                few_shot,
                oracle_state,
                ..PipelineConfig::default()
            });
        }
    }
    out.push(PipelineConfig {
        oracle_domain: true,
        ..PipelineConfig::default()
    });
    out
}

pub fn variant(label: &str) -> PipelineConfig {
    variants()
        .into_iter()
        .find(|c| c.variant_label() == label)
        .unwrap_or_else(|| panic!("no variant {label}"))
}

pub fn templates_for(corpus: &Corpus) -> TemplateSet {
    TemplateSet::builtin(&corpus.name).expect("builtin templates")
}

pub fn pipeline(loaded: &LoadedCorpus, config: PipelineConfig, backend: Arc<dyn CompletionBackend>) -> Pipeline {
    let corpus = &loaded.corpus;
    let store = if config.few_shot {
        let embedder: Arc<dyn Embedder> = Arc::new(HashingEmbedder::default());
        let snips = snippets(corpus, "train", config.context_window_utterances);
        Some(Arc::new(
            build_store(&snips, config.pool_size_per_domain, embedder, config.seed).expect("store"),
        ))
    } else {
        None
    };
    Pipeline {
        config,
        templates: Arc::new(templates_for(corpus)),
        schemas: Arc::new(corpus.schemas.clone()),
        backend,
        store,
        database: loaded.database.clone().map(Arc::new),
    }
}

pub fn cassette_path(corpus: &str) -> PathBuf {
    fixture(&format!("cassettes/{corpus}.jsonl"))
}

pub fn replay(corpus: &str) -> Arc<dyn CompletionBackend> {
    Arc::new(ReplayBackend::load(&cassette_path(corpus), true).expect("cassette"))
}

pub fn database(loaded: &LoadedCorpus) -> Option<&Database> {
    loaded.database.as_ref()
}

// ---------------------------------------------------------------------------
// rule backend

fn re(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("valid regex"))
}

fn last_customer_line(prompt: &str) -> String {
    let line = prompt
        .lines()
        .rev()
        .find(|l| l.starts_with("Customer: "))
        .unwrap_or("");
    line.trim_start_matches("Customer: ").trim_matches('"').to_string()
}

fn has_word(text: &str, word: &str) -> bool {
    let lower = text.to_lowercase();
    lower.match_indices(word).any(|(i, _)| {
        let before = lower[..i].chars().next_back();
        let after = lower[i + word.len()..].chars().next();
        before.is_none_or(|c| !c.is_alphanumeric()) && after.is_none_or(|c| !c.is_alphanumeric() || c == 's')
    })
}

const DOMAIN_KEYWORDS: &[(&str, &[&str])] = &[
    ("hotel", &["hotel", "place to stay", "guesthouse", "guest house"]),
    ("restaurant", &["restaurant", "food", "place to eat", "table"]),
    ("restaurants", &["restaurant", "food", "place to eat", "hungry"]),
    ("attraction", &["museum", "attraction", "college", "theatre", "entrance fee"]),
    ("train", &["train"]),
    ("taxi", &["taxi"]),
    ("police", &["police", "robbed"]),
    ("hospital", &["hospital"]),
    ("weather", &["weather", "rain", "windy", "humidity"]),
];

fn detect(prompt: &str) -> String {
    static LIST: OnceLock<Regex> = OnceLock::new();
    let list = re(&LIST, r"(?m)^Choose exactly one domain from this list: (.*)$")
        .captures(prompt)
        .map(|c| c[1].split(", ").map(str::to_string).collect::<Vec<_>>())
        .unwrap_or_default();
    let utterance = last_customer_line(prompt).to_lowercase();
    let mut best: Option<(usize, &str)> = None;
    for (domain, words) in DOMAIN_KEYWORDS {
        if !list.iter().any(|d| d == domain) {
            continue;
        }
        for w in *words {
            if let Some(i) = utterance.find(w) {
                if best.is_none_or(|(j, _)| i < j) {
                    best = Some((i, domain));
                }
            }
        }
    }
    best.map(|(_, d)| d.to_string()).unwrap_or_default()
}

const CUISINES: &[&str] = &["italian", "indian", "chinese", "british", "mexican", "sushi"];
const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"];
const AREAS: &[&str] = &["north", "east", "west", "south", "centre"];

fn slot_value(slot: &str, utt: &str) -> Option<String> {
    static TIME: OnceLock<Regex> = OnceLock::new();
    static PEOPLE: OnceLock<Regex> = OnceLock::new();
    static NIGHTS: OnceLock<Regex> = OnceLock::new();
    static ROUTE: OnceLock<Regex> = OnceLock::new();
    static CITY: OnceLock<Regex> = OnceLock::new();
    static NAME: OnceLock<Regex> = OnceLock::new();
    let lower = utt.to_lowercase();
    let time = || re(&TIME, r"\b(\d\d:\d\d)\b").captures(utt).map(|c| c[1].to_string());
    let route = || re(&ROUTE, r"from (.+?) to (.+?)(?: on |[.?,]|$)").captures(&lower);
    match slot {
        "pricerange" | "price_range" => ["cheap", "moderate", "expensive"]
            .iter()
            .find(|w| has_word(&lower, w))
            .map(|w| w.to_string()),
        "area" => AREAS.iter().find(|w| has_word(&lower, w)).map(|w| w.to_string()),
        "food" | "cuisine" => CUISINES.iter().find(|w| has_word(&lower, w)).map(|w| w.to_string()),
        "parking" => has_word(&lower, "parking").then(|| "yes".into()),
        "internet" => (has_word(&lower, "internet") || has_word(&lower, "wifi")).then(|| "yes".into()),
        "type" => ["guesthouse", "museum", "college", "theatre", "park"]
            .iter()
            .find(|w| has_word(&lower, w))
            .map(|w| w.to_string()),
        "day" | "bookday" => DAYS.iter().find(|w| has_word(&lower, w)).map(|w| w.to_string()),
        "bookpeople" | "party_size" => re(&PEOPLE, r"for (\d+)")
            .captures(&lower)
            .map(|c| c[1].to_string())
            .or_else(|| has_word(&lower, "one seat").then(|| "1".into())),
        "bookstay" => re(&NIGHTS, r"(\d+) nights").captures(&lower).map(|c| c[1].to_string()),
        "booktime" | "leaveat" | "time" => time(),
        "departure" => route().map(|c| c[1].to_string()),
        "destination" => route().map(|c| c[2].to_string()),
        "city" => re(&CITY, r"in ([A-Z][a-z]+(?: [A-Z][a-z]+)?)").captures(utt).map(|c| c[1].to_string()),
        "date" => ["tomorrow", "today"]
            .iter()
            .find(|w| has_word(&lower, w))
            .map(|w| w.to_string()),
        "name" | "restaurant_name" => re(&NAME, r"^(.+?) sounds good").captures(&lower).map(|c| c[1].to_string()),
        _ => None,
    }
}

fn track(prompt: &str) -> String {
    static SLOT: OnceLock<Regex> = OnceLock::new();
    let slot_re = re(&SLOT, r#"^- "([a-z_]+)""#);
    let mut slots = Vec::new();
    for line in prompt.lines() {
        if line.starts_with("-------") {
            break;
        }
        if let Some(c) = slot_re.captures(line) {
            slots.push(c[1].to_string());
        }
    }
    let utt = last_customer_line(prompt);
    slots
        .iter()
        .filter_map(|s| slot_value(s, &utt).map(|v| format!("{s}:\"{v}\"")))
        .collect::<Vec<_>>()
        .join("-")
}

const ASKED: &[(&str, &str, &str)] = &[
    // (keyword, multiwoz slot, sgd slot)
    ("phone", "phone", "phone_number"),
    ("contact number", "phone", "phone_number"),
    ("address", "address", "street_address"),
    ("where are they", "address", "street_address"),
    ("postcode", "postcode", "postcode"),
    ("entrance fee", "entrancefee", "entrancefee"),
    ("windy", "wind", "wind"),
    ("humidity", "humidity", "humidity"),
    ("live music", "has_live_music", "has_live_music"),
    ("alcohol", "serves_alcohol", "serves_alcohol"),
];

fn respond(prompt: &str) -> String {
    static SGD: OnceLock<Regex> = OnceLock::new();
    static MWZ: OnceLock<Regex> = OnceLock::new();
    static DB: OnceLock<Regex> = OnceLock::new();
    let (domain, sgd) = match re(&SGD, r"helps people with the (\w+) service").captures(prompt) {
        Some(c) => (c[1].to_string(), true),
        None => (
            re(&MWZ, r"\[([a-z]+)_[a-z]+\]")
                .captures(prompt)
                .map(|c| c[1].to_string())
                .unwrap_or_default(),
            false,
        ),
    };
    let ph = |slot: &str| {
        if sgd {
            format!("[{slot}]")
        } else {
            format!("[{domain}_{slot}]")
        }
    };
    let name = if sgd && domain == "restaurants" {
        "[restaurant_name]".to_string()
    } else {
        ph("name")
    };
    let count = prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Database: "))
        .and_then(|rest| re(&DB, r": (\d+)").captures(rest).map(|c| c[1].parse::<usize>().unwrap_or(0)));
    let utt = last_customer_line(prompt).to_lowercase();

    let asked: Vec<String> = ASKED
        .iter()
        .filter(|(k, _, _)| utt.contains(k))
        .map(|(_, m, s)| ph(if sgd { s } else { m }))
        .fold(Vec::new(), |mut acc, p| {
            if !acc.contains(&p) {
                acc.push(p);
            }
            acc
        });
    if utt.contains("book") {
        return "Your booking is confirmed. The reference number is [reference].".into();
    }
    if !asked.is_empty() {
        return format!("Sure, {name} has {}.", asked.join(" and "));
    }
    if domain == "weather" {
        return "It will be [temperature] degrees with a [precipitation] percent chance of rain.".into();
    }
    match count {
        None if domain == "taxi" => "What time would you like to leave?".into(),
        None => "Could you tell me a bit more about what you are looking for?".into(),
        Some(0) => "I am sorry, nothing matches your request. Would you like to change something?".into(),
        Some(1) => format!("{name} matches your request. Would you like more information?"),
        Some(_) => format!("There are several options, for example {name}. Do you have any other preference?"),
    }
}

/// Deterministic keyword-rule completion used to record cassettes.
pub fn rule_completion(request: &CompletionRequest) -> String {
    match request.tag {
        PromptKind::DomainDetect => detect(&request.prompt),
        PromptKind::State => track(&request.prompt),
        PromptKind::Response => respond(&request.prompt),
    }
}
