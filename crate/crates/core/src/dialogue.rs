//! Unified dialogue model shared by both corpus formats.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::schema::DomainSchema;
use crate::state::{BeliefState, SlotMap, StateUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Customer,
    Assistant,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::Customer => "Customer",
            Speaker::Assistant => "Assistant",
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// Alternating customer/assistant utterances, customer first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DialogueHistory(Vec<Utterance>);

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends one exchange; keeps the alternation invariant by construction.
    pub fn push_exchange(&mut self, customer: impl Into<String>, assistant: impl Into<String>) {
        self.0.push(Utterance {
            speaker: Speaker::Customer,
            text: customer.into(),
        });
        self.0.push(Utterance {
            speaker: Speaker::Assistant,
            text: assistant.into(),
        });
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The last `n` utterances (all of them when `n` is `None`).
    pub fn window(&self, n: Option<usize>) -> &[Utterance] {
        match n {
            Some(n) if n < self.0.len() => &self.0[self.0.len() - n..],
            _ => &self.0,
        }
    }

    /// `Speaker: text` lines, each newline-terminated.
    pub fn render(&self, n: Option<usize>) -> String {
        let mut out = String::new();
        for u in self.window(n) {
            out.push_str(u.speaker.label());
            out.push_str(": ");
            out.push_str(&u.text);
            out.push('\n');
        }
        out
    }
}

/// A database result supplied by the dataset (SGD service results).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvidedResults {
    pub records: Vec<BTreeMap<String, String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user_utterance: String,
    /// Gold system reply as spoken.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_response: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_response_delex: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_state: Option<BeliefState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_domain: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requested_slots: Vec<String>,
    /// Turn-level gold updates, filled by `ingest::derive_gold_updates`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_updates: Option<Vec<StateUpdate>>,
    /// Dataset-provided DB results; `None` when the dataset has a real DB.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provided_results: Option<ProvidedResults>,
}

impl Turn {
    pub fn new(user_utterance: impl Into<String>) -> Self {
        Self {
            user_utterance: user_utterance.into(),
            system_response: None,
            system_response_delex: None,
            gold_state: None,
            gold_domain: None,
            requested_slots: Vec::new(),
            gold_updates: None,
            provided_results: None,
        }
    }
}

/// Constraints and requests for one domain of a user goal.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGoal {
    #[serde(default)]
    pub informable: SlotMap,
    #[serde(default)]
    pub requested: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub book: SlotMap,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalSpec {
    pub domains: BTreeMap<String, DomainGoal>,
    /// Instructions shown to human annotators.
    #[serde(default)]
    pub message: String,
}

impl GoalSpec {
    /// A readable goal text, falling back to a rendering of the constraints.
    pub fn annotator_text(&self) -> String {
        if !self.message.trim().is_empty() {
            return self.message.clone();
        }
        let mut parts = Vec::new();
        for (domain, goal) in &self.domains {
            let mut s = format!("Find a {domain}");
            if !goal.informable.is_empty() {
                let c: Vec<String> = goal
                    .informable
                    .iter()
                    .map(|(k, v)| format!("{k} = {v}"))
                    .collect();
                s.push_str(&format!(" with {}", c.join(", ")));
            }
            if !goal.requested.is_empty() {
                s.push_str(&format!(" and ask for its {}", goal.requested.join(", ")));
            }
            parts.push(s + ".");
        }
        parts.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default)]
    pub split: String,
    pub domains: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<GoalSpec>,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn is_single_domain(&self) -> bool {
        self.domains.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub dialogues: Vec<Dialogue>,
    pub schemas: Vec<DomainSchema>,
}

impl Corpus {
    pub fn domain_names(&self) -> Vec<String> {
        self.schemas.iter().map(|s| s.name.clone()).collect()
    }

    pub fn dialogue(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id == id)
    }

    /// Dialogues of one split; `"all"` selects everything.
    pub fn split<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a Dialogue> + 'a {
        self.dialogues
            .iter()
            .filter(move |d| split == "all" || d.split == split)
    }
}
