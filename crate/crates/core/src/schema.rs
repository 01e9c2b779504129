//! Domain schemas: the slot inventory each prompt and parser works against.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("domain `{domain}` declares slot `{slot}` twice")]
    DuplicateSlot { domain: String, slot: String },
    #[error("slot `{domain}.{slot}` has an empty value enumeration")]
    EmptyEnumeration { domain: String, slot: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Canonical values for categorical slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub informable: bool,
    #[serde(default)]
    pub requestable: bool,
    /// Booking-only slots (people, stay, ...) never constrain DB queries.
    #[serde(default)]
    pub booking: bool,
}

fn yes() -> bool {
    true
}

impl SlotSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            values: None,
            informable: true,
            requestable: false,
            booking: false,
        }
    }

    pub fn with_values<I, S>(mut self, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.values = Some(values.into_iter().map(Into::into).collect());
        self
    }

    pub fn booking(mut self) -> Self {
        self.booking = true;
        self
    }

    /// Line used in state-tracking prompts: `- "name": description`, or
    /// `- "name" that specifies ...` when the description reads as a clause.
    pub fn prompt_line(&self) -> String {
        if self.description.is_empty() {
            format!("- \"{}\"", self.name)
        } else if self.description.starts_with("that ") {
            format!("- \"{}\" {}", self.name, self.description)
        } else {
            format!("- \"{}\": {}", self.name, self.description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub slots: Vec<SlotSpec>,
    /// Label used in the `Database:` prompt line; defaults to `<name>s`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db_label: Option<String>,
}

impl DomainSchema {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
            slots: Vec::new(),
            db_label: None,
        }
    }

    pub fn with_slot(mut self, slot: SlotSpec) -> Self {
        self.slots.push(slot);
        self
    }

    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn db_label(&self) -> String {
        self.db_label
            .clone()
            .unwrap_or_else(|| format!("{}s", self.name))
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = BTreeSet::new();
        for slot in &self.slots {
            if !seen.insert(slot.name.as_str()) {
                return Err(SchemaError::DuplicateSlot {
                    domain: self.name.clone(),
                    slot: slot.name.clone(),
                });
            }
            if matches!(&slot.values, Some(v) if v.is_empty()) {
                return Err(SchemaError::EmptyEnumeration {
                    domain: self.name.clone(),
                    slot: slot.name.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Finds the schema for `domain` in a list.
pub fn find<'a>(schemas: &'a [DomainSchema], domain: &str) -> Option<&'a DomainSchema> {
    schemas.iter().find(|s| s.name == domain)
}
