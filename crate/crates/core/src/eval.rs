//! Automatic metrics and human-annotation aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::database::{attribute_matches, Database};
use crate::dialogue::{Corpus, Dialogue, GoalSpec};
use crate::fuzzy::fuzzy_equal;
use crate::parsing::extract_placeholders;
use crate::pipeline::Prediction;
use crate::state::BeliefState;

/// Domains without goal semantics, skipped by MultiWOZ success by default.
pub const SUCCESS_EXCLUDED: &[&str] = &["police", "hospital"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("no turns to evaluate")]
    Empty,
    #[error("{candidates} candidates but {references} references")]
    Misaligned { candidates: usize, references: usize },
}

pub fn domain_accuracy<S: AsRef<str>>(pairs: &[(S, S)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = pairs.iter().filter(|(p, g)| p.as_ref() == g.as_ref()).count();
    Ok(hits as f64 / pairs.len() as f64)
}

/// Every gold triple matched fuzzily; unless `lenient`, no extra predicted
/// (domain, slot) pairs either.
pub fn joint_match(pred: &BeliefState, gold: &BeliefState, threshold: f64, lenient: bool) -> bool {
    let covered = gold
        .triples()
        .all(|(d, s, v)| pred.get(d, s).is_some_and(|p| fuzzy_equal(p, v, threshold)));
    covered && (lenient || pred.triples().all(|(d, s, _)| gold.get(d, s).is_some()))
}

pub fn joint_goal_accuracy(pairs: &[(&BeliefState, &BeliefState)], threshold: f64, lenient: bool) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = pairs
        .iter()
        .filter(|(p, g)| joint_match(p, g, threshold, lenient))
        .count();
    Ok(hits as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
}

impl SlotCounts {
    pub fn add(&mut self, other: SlotCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.r#fn += other.r#fn;
    }

    /// (precision, recall, f1); all ones when there is nothing on either side.
    pub fn prf(&self) -> (f64, f64, f64) {
        if self.tp + self.fp + self.r#fn == 0 {
            return (1.0, 1.0, 1.0);
        }
        let p = if self.tp + self.fp == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let r = if self.tp + self.r#fn == 0 { 0.0 } else { self.tp as f64 / (self.tp + self.r#fn) as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

/// Per-turn counts; a predicted triple can only match the gold triple of
/// the same (domain, slot).
pub fn slot_counts(pred: &BeliefState, gold: &BeliefState, threshold: f64) -> SlotCounts {
    let mut c = SlotCounts::default();
    for (d, s, v) in pred.triples() {
        match gold.get(d, s) {
            Some(g) if fuzzy_equal(v, g, threshold) => c.tp += 1,
            _ => c.fp += 1,
        }
    }
    c.r#fn = gold.len() - c.tp;
    c
}

pub fn slot_micro_f1(pairs: &[(&BeliefState, &BeliefState)], threshold: f64) -> (f64, f64, f64) {
    let mut total = SlotCounts::default();
    for (p, g) in pairs {
        total.add(slot_counts(p, g, threshold));
    }
    total.prf()
}

static TOKEN: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[[^\]]+\]|\w+|[^\w\s]").unwrap());

/// Lowercased word/punctuation tokens; bracketed placeholders stay whole.
pub fn tokenize(text: &str) -> Vec<String> {
    TOKEN
        .find_iter(&text.to_lowercase())
        .map(|m| m.as_str().to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 on a 0–100 scale with one reference per candidate.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus; each sentence contributes at least 1 to every order's total.
/// Orders 2–4 add one to numerator and denominator; no unigram match gives
/// 0. The brevity penalty uses total candidate and reference lengths.
pub fn bleu<S: AsRef<str>>(candidates: &[S], references: &[S]) -> Result<f64, EvalError> {
    if candidates.len() != references.len() {
        return Err(EvalError::Misaligned {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut num = [0usize; 4];
    let mut den = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let c = tokenize(c.as_ref());
        let r = tokenize(r.as_ref());
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let cc = ngram_counts(&c, n);
            let rc = ngram_counts(&r, n);
            num[n - 1] += cc.iter().map(|(g, k)| (*k).min(*rc.get(g).unwrap_or(&0))).sum::<usize>();
            den[n - 1] += c.len().saturating_sub(n - 1).max(1);
        }
    }
    if num[0] == 0 || c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = (num[0] as f64 / den[0] as f64).ln();
    for n in 1..4 {
        log_sum += ((num[n] + 1) as f64 / (den[n] + 1) as f64).ln();
    }
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / 4.0).exp())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessOutcome {
    pub success: bool,
    pub domains: BTreeMap<String, bool>,
}

fn requested_key(slot: &str) -> String {
    let s: String = slot.to_lowercase().chars().filter(|c| !c.is_whitespace()).collect();
    match s.as_str() {
        "ref" | "bookreference" => "reference".into(),
        _ => s,
    }
}

fn turn_has_placeholder(placeholders: &[String], domain: &str, slot: &str) -> bool {
    let prefixed = format!("{domain}_{slot}");
    placeholders.iter().any(|p| p == slot || *p == prefixed)
}

const OFFER_SLOTS: &[&str] = &["name", "choice", "trainid", "id"];
/// Time constraints are bounds (leave after, arrive by), not equalities.
const TIME_SLOTS: &[&str] = &["leaveat", "arriveby"];

/// Success of one MultiWOZ dialogue against its goal.
///
/// Per goal domain (excluding `excluded`):
/// * inform: when the domain has a DB table and the goal informable
///   constraints, some turn of that domain mentions a name/choice/train-id
///   placeholder while its top DB match satisfies every goal constraint the
///   entity has an attribute for (time bounds are not compared);
/// * request: every requested slot, plus `reference` when the goal books,
///   appears as `[slot]` or `[domain_slot]` in some turn of that domain.
///
/// Returns `None` when no goal domain is left to evaluate.
pub fn multiwoz_success(
    records: &[&Prediction],
    goal: &GoalSpec,
    db: Option<&Database>,
    threshold: f64,
    excluded: &[&str],
) -> Option<SuccessOutcome> {
    let mut domains = BTreeMap::new();
    for (domain, dg) in &goal.domains {
        if excluded.contains(&domain.as_str()) {
            continue;
        }
        let turns: Vec<(&Prediction, Vec<String>)> = records
            .iter()
            .filter(|r| &r.domain == domain)
            .map(|r| (*r, extract_placeholders(&r.response)))
            .collect();
        let has_table = db.is_some_and(|db| db.has_domain(domain));
        let inform = !has_table
            || dg.informable.is_empty()
            || turns.iter().any(|(r, ph)| {
                let offered = OFFER_SLOTS.iter().any(|s| turn_has_placeholder(ph, domain, s));
                offered
                    && r.db_top.as_ref().is_some_and(|e| {
                        dg.informable.iter().filter(|(slot, _)| !TIME_SLOTS.contains(&slot.as_str())).all(|(slot, v)| match e.get(slot) {
                            Some(a) => attribute_matches(slot, a, v, threshold),
                            None => true,
                        })
                    })
            });
        let mut wanted: BTreeSet<String> = dg.requested.iter().map(|s| requested_key(s)).collect();
        if !dg.book.is_empty() {
            wanted.insert("reference".into());
        }
        let request = wanted
            .iter()
            .all(|slot| turns.iter().any(|(_, ph)| turn_has_placeholder(ph, domain, slot)));
        domains.insert(domain.clone(), inform && request);
    }
    if domains.is_empty() {
        return None;
    }
    Some(SuccessOutcome {
        success: domains.values().all(|v| *v),
        domains,
    })
}

/// SGD success: the final belief matches the final gold state and every
/// annotated requested slot surfaces as a placeholder in some response.
pub fn sgd_success(records: &[&Prediction], dialogue: &Dialogue, threshold: f64) -> bool {
    let final_gold = dialogue.turns.iter().rev().find_map(|t| t.gold_state.as_ref());
    let final_pred = records.last().map(|r| &r.belief);
    let captured = match (final_pred, final_gold) {
        (Some(p), Some(g)) => joint_match(p, g, threshold, false),
        (None, Some(g)) => g.is_empty(),
        (_, None) => true,
    };
    let placeholders: Vec<(String, Vec<String>)> = records
        .iter()
        .map(|r| (r.domain.clone(), extract_placeholders(&r.response)))
        .collect();
    let provided = dialogue
        .turns
        .iter()
        .flat_map(|t| &t.requested_slots)
        .all(|slot| {
            let slot = slot.to_lowercase();
            placeholders.iter().any(|(d, ph)| turn_has_placeholder(ph, d, &slot))
        });
    captured && provided
}

/// Answers to the three post-dialogue questions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub q1_successful_subdialogues: usize,
    #[serde(default)]
    pub q1_domain_flags: BTreeMap<String, bool>,
    pub q2_clarifications: u32,
    pub q3_all_captured: bool,
    #[serde(default)]
    pub note: String,
}

/// An annotation together with the number of goal domains it judged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDialogue {
    pub session_id: String,
    pub subdialogues: usize,
    pub annotation: AnnotationRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HumanEvalTable {
    pub dialogues: usize,
    pub subdialogues: usize,
    pub clarifications: u64,
    pub successful_subdialogues: usize,
    pub successful_dialogues: usize,
    pub captured_dialogues: usize,
    pub clarify_per_dialogue: f64,
    pub successful_subdialogue_rate: f64,
    pub successful_dialogue_rate: f64,
    pub captured_rate: f64,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

pub fn aggregate_annotations(items: &[AnnotatedDialogue]) -> HumanEvalTable {
    let mut t = HumanEvalTable {
        dialogues: items.len(),
        ..Default::default()
    };
    for item in items {
        let a = &item.annotation;
        t.subdialogues += item.subdialogues;
        t.clarifications += u64::from(a.q2_clarifications);
        t.successful_subdialogues += a.q1_successful_subdialogues;
        if item.subdialogues > 0 && a.q1_successful_subdialogues == item.subdialogues {
            t.successful_dialogues += 1;
        }
        if a.q3_all_captured {
            t.captured_dialogues += 1;
        }
    }
    t.clarify_per_dialogue = ratio(t.clarifications as f64, t.dialogues as f64);
    t.successful_subdialogue_rate = ratio(t.successful_subdialogues as f64, t.subdialogues as f64);
    t.successful_dialogue_rate = ratio(t.successful_dialogues as f64, t.dialogues as f64);
    t.captured_rate = ratio(t.captured_dialogues as f64, t.dialogues as f64);
    t
}

impl HumanEvalTable {
    pub fn render(&self) -> String {
        let pct = |r: f64| format!("{:.0}%", r * 100.0);
        let rows = [
            ("dialogues", self.dialogues.to_string()),
            ("subdialogues", self.subdialogues.to_string()),
            ("clarify / dial", format!("{:.2}", self.clarify_per_dialogue)),
            ("successful subdialogues", pct(self.successful_subdialogue_rate)),
            ("successful dialogues", pct(self.successful_dialogue_rate)),
            ("correctly captured", pct(self.captured_rate)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<24} {v:>6}");
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DomainBreakdown {
    pub turns: usize,
    pub domain_accuracy: f64,
    pub jga: f64,
    pub slot_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialogues: usize,
    pub turns: usize,
    pub domain_accuracy: f64,
    pub jga: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub bleu: f64,
    /// `None` when no dialogue could be judged.
    pub success: Option<f64>,
    pub success_dialogues: usize,
    pub per_domain: BTreeMap<String, DomainBreakdown>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub fuzzy_threshold: f64,
    pub lenient_jga: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fuzzy_threshold: crate::fuzzy::DEFAULT_THRESHOLD,
            lenient_jga: false,
        }
    }
}

/// Full metric suite over a prediction file. Success uses goals when the
/// corpus is MultiWOZ-like (dialogues carry goals) and the SGD rule
/// otherwise.
pub fn evaluate(
    predictions: &[Prediction],
    corpus: &Corpus,
    db: Option<&Database>,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::Empty);
    }
    let th = options.fuzzy_threshold;
    let mut report = EvalReport {
        turns: predictions.len(),
        ..Default::default()
    };
    let domain_pairs: Vec<(&str, &str)> = predictions
        .iter()
        .filter_map(|p| Some((p.domain.as_str(), p.gold_domain.as_deref()?)))
        .collect();
    report.domain_accuracy = domain_accuracy(&domain_pairs).unwrap_or(0.0);
    let state_pairs: Vec<(&BeliefState, &BeliefState)> = predictions
        .iter()
        .filter_map(|p| Some((&p.belief, p.gold_state.as_ref()?)))
        .collect();
    report.jga = joint_goal_accuracy(&state_pairs, th, options.lenient_jga).unwrap_or(0.0);
    (report.slot_precision, report.slot_recall, report.slot_f1) = slot_micro_f1(&state_pairs, th);
    let (cands, refs): (Vec<&str>, Vec<&str>) = predictions
        .iter()
        .filter_map(|p| Some((p.response.as_str(), p.gold_response.as_deref()?)))
        .unzip();
    report.bleu = bleu(&cands, &refs).unwrap_or(0.0);

    let mut by_domain: BTreeMap<&str, Vec<&Prediction>> = BTreeMap::new();
    for p in predictions {
        if let Some(g) = &p.gold_domain {
            by_domain.entry(g.as_str()).or_default().push(p);
        }
    }
    for (domain, preds) in by_domain {
        let dp: Vec<(&str, &str)> = preds
            .iter()
            .map(|p| (p.domain.as_str(), p.gold_domain.as_deref().unwrap_or("")))
            .collect();
        let sp: Vec<(&BeliefState, &BeliefState)> = preds
            .iter()
            .filter_map(|p| Some((&p.belief, p.gold_state.as_ref()?)))
            .collect();
        report.per_domain.insert(
            domain.to_string(),
            DomainBreakdown {
                turns: preds.len(),
                domain_accuracy: domain_accuracy(&dp).unwrap_or(0.0),
                jga: joint_goal_accuracy(&sp, th, options.lenient_jga).unwrap_or(0.0),
                slot_f1: slot_micro_f1(&sp, th).2,
            },
        );
    }

    let mut dialogue_ids: Vec<&str> = predictions.iter().map(|p| p.dialogue_id.as_str()).collect();
    dialogue_ids.dedup();
    let unique: BTreeSet<&str> = dialogue_ids.iter().copied().collect();
    report.dialogues = unique.len();
    let mut judged = 0usize;
    let mut successes = 0usize;
    for id in unique {
        let records: Vec<&Prediction> = predictions.iter().filter(|p| p.dialogue_id == id).collect();
        let Some(dialogue) = corpus.dialogue(id) else {
            report.warnings.push(format!("{id}: not in corpus, excluded from success"));
            continue;
        };
        let outcome = match &dialogue.goal {
            Some(goal) => multiwoz_success(&records, goal, db, th, SUCCESS_EXCLUDED).map(|o| o.success),
            None if corpus.dialogues.iter().any(|d| d.goal.is_some()) || corpus.name == "multiwoz" => {
                report.warnings.push(format!("{id}: no goal, excluded from success"));
                None
            }
            None => Some(sgd_success(&records, dialogue, th)),
        };
        if let Some(ok) = outcome {
            judged += 1;
            successes += usize::from(ok);
        }
    }
    report.success_dialogues = judged;
    report.success = (judged > 0).then(|| successes as f64 / judged as f64);
    Ok(report)
}

impl EvalReport {
    /// Table with BLEU, JGA, Slot-F1 and Success columns, followed by
    /// domain accuracy and counts.
    pub fn render(&self, label: &str, per_domain: bool) -> String {
        let mut out = String::new();
        let success = self
            .success
            .map(|s| format!("{:.4}", s))
            .unwrap_or_else(|| "n/a".into());
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>8} {:>8}", "variant", "BLEU", "JGA", "Slot-F1", "Success");
        let _ = writeln!(
            out,
            "{:<16} {:>8.2} {:>8.4} {:>8.4} {:>8}",
            label, self.bleu, self.jga, self.slot_f1, success
        );
        let _ = writeln!(
            out,
            "domain accuracy {:.4}; {} dialogues, {} turns",
            self.domain_accuracy, self.dialogues, self.turns
        );
        if per_domain && !self.per_domain.is_empty() {
            let _ = writeln!(out, "\n{:<16} {:>6} {:>8} {:>8} {:>8}", "domain", "turns", "DomAcc", "JGA", "Slot-F1");
            for (d, b) in &self.per_domain {
                let _ = writeln!(
                    out,
                    "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4}",
                    d, b.turns, b.domain_accuracy, b.jga, b.slot_f1
                );
            }
        }
        out
    }
}
