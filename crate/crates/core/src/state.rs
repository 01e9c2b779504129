//! Belief state and turn-level state updates.
//!
//! The tracker never emits the full state. Each turn produces a
//! [`StateUpdate`] holding only the pairs that changed, and the accumulated
//! [`BeliefState`] is the fold of those updates. There is no deletion
//! channel: pairs are only added or overwritten.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slot name → value map for a single domain.
pub type SlotMap = BTreeMap<String, String>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StateError {
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
}

/// Accumulated per-domain slot values.
///
/// Inner maps are never empty; a domain only appears once it holds a value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BeliefState(BTreeMap<String, SlotMap>);

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a state from nested maps, dropping empty domains and empty values.
    pub fn from_map(map: BTreeMap<String, SlotMap>) -> Self {
        let mut state = BTreeMap::new();
        for (domain, slots) in map {
            let slots: SlotMap = slots.into_iter().filter(|(_, v)| !v.is_empty()).collect();
            if !slots.is_empty() {
                state.insert(domain, slots);
            }
        }
        Self(state)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn domain(&self, domain: &str) -> Option<&SlotMap> {
        self.0.get(domain)
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.0.get(domain).and_then(|m| m.get(slot)).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SlotMap)> {
        self.0.iter()
    }

    /// All `(domain, slot, value)` triples in deterministic order.
    pub fn triples(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.0.iter().flat_map(|(d, slots)| {
            slots
                .iter()
                .map(move |(s, v)| (d.as_str(), s.as_str(), v.as_str()))
        })
    }

    pub fn len(&self) -> usize {
        self.0.values().map(BTreeMap::len).sum()
    }

    /// Restricts the state to a single domain.
    pub fn restrict(&self, domain: &str) -> BeliefState {
        let mut out = BTreeMap::new();
        if let Some(slots) = self.0.get(domain) {
            out.insert(domain.to_string(), slots.clone());
        }
        BeliefState(out)
    }

    pub fn as_map(&self) -> &BTreeMap<String, SlotMap> {
        &self.0
    }

    /// Sets a single value in place. Empty values are ignored.
    pub fn insert(&mut self, domain: &str, slot: &str, value: &str) {
        if value.is_empty() {
            return;
        }
        self.0
            .entry(domain.to_string())
            .or_default()
            .insert(slot.to_string(), value.to_string());
    }
}

/// Slot-value pairs that changed in one turn for one domain.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub domain: String,
    pub pairs: SlotMap,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StateUpdate {
    pub fn new(domain: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            pairs: SlotMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn with_pair(mut self, slot: impl Into<String>, value: impl Into<String>) -> Self {
        self.pairs.insert(slot.into(), value.into());
        self
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

impl fmt::Display for StateUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{{", self.domain)?;
        for (i, (s, v)) in self.pairs.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{s}:{v:?}")?;
        }
        f.write_str("}")
    }
}

/// Merges `update` into a copy of `state`, last write wins.
///
/// `known_domains` is the dataset's domain list; updates for any other
/// domain are rejected.
pub fn apply_state_update<S: AsRef<str>>(
    state: &BeliefState,
    update: &StateUpdate,
    known_domains: &[S],
) -> Result<BeliefState, StateError> {
    if !known_domains.iter().any(|d| d.as_ref() == update.domain) {
        return Err(StateError::UnknownDomain(update.domain.clone()));
    }
    let mut next = state.clone();
    for (slot, value) in &update.pairs {
        next.insert(&update.domain, slot, value);
    }
    Ok(next)
}

/// Turn-level updates that take `prev` to `next`, one per changed domain.
///
/// Pairs present in `prev` but missing from `next` are ignored.
pub fn diff_states(prev: &BeliefState, next: &BeliefState) -> Vec<StateUpdate> {
    let mut updates = Vec::new();
    for (domain, slots) in next.iter() {
        let old = prev.domain(domain);
        let mut update = StateUpdate::new(domain.clone());
        for (slot, value) in slots {
            if old.and_then(|m| m.get(slot)) != Some(value) {
                update.pairs.insert(slot.clone(), value.clone());
            }
        }
        if !update.is_empty() {
            updates.push(update);
        }
    }
    updates
}
