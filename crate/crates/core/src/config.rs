use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fuzzy::DEFAULT_THRESHOLD;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("fuzzy_threshold must lie in [0, 1], got {0}")]
    Threshold(f64),
    #[error("pool_size_per_domain ({pool}) must be at least retrieval_k ({k}) in few-shot mode")]
    PoolSmallerThanK { pool: usize, k: usize },
    #[error("context_window_utterances must be at least 1")]
    ZeroWindow,
    #[error("max_tokens must be positive")]
    ZeroMaxTokens,
    #[error("config overrides: {0}")]
    Override(String),
}

/// Token budgets per call kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaxTokens {
    pub domain_detect: u32,
    pub state: u32,
    pub response: u32,
}

impl Default for MaxTokens {
    fn default() -> Self {
        Self {
            domain_detect: 8,
            state: 128,
            response: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub few_shot: bool,
    pub oracle_state: bool,
    pub oracle_domain: bool,
    pub retrieval_k: usize,
    pub negatives_per_example: usize,
    pub pool_size_per_domain: usize,
    /// Utterances making up a context-store key, current user turn included.
    pub context_window_utterances: usize,
    pub fuzzy_threshold: f64,
    /// Utterances of history rendered into prompts; `None` is the whole dialogue.
    pub history_window: Option<usize>,
    /// Feed gold system replies into the history instead of generated ones.
    pub gold_history: bool,
    /// Render the first DB match next to the count in response prompts.
    pub db_include_top_entity: bool,
    pub temperature: f64,
    pub max_tokens: MaxTokens,
    pub seed: u64,
    /// Domains offered to the detector, in order; empty means every schema domain.
    pub domains: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            few_shot: false,
            oracle_state: false,
            oracle_domain: false,
            retrieval_k: 2,
            negatives_per_example: 1,
            pool_size_per_domain: 10,
            context_window_utterances: 2,
            fuzzy_threshold: DEFAULT_THRESHOLD,
            history_window: None,
            gold_history: false,
            db_include_top_entity: false,
            temperature: 0.0,
            max_tokens: MaxTokens::default(),
            seed: 0,
            domains: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.fuzzy_threshold) {
            return Err(ConfigError::Threshold(self.fuzzy_threshold));
        }
        if self.few_shot && self.pool_size_per_domain < self.retrieval_k {
            return Err(ConfigError::PoolSmallerThanK {
                pool: self.pool_size_per_domain,
                k: self.retrieval_k,
            });
        }
        if self.context_window_utterances == 0 {
            return Err(ConfigError::ZeroWindow);
        }
        let t = &self.max_tokens;
        if t.domain_detect == 0 || t.state == 0 || t.response == 0 {
            return Err(ConfigError::ZeroMaxTokens);
        }
        Ok(())
    }

    /// `zs-gbs`, `fs-obs`, ... with `-od` appended for oracle domains.
    pub fn variant_label(&self) -> String {
        let mut label = format!(
            "{}-{}",
            if self.few_shot { "fs" } else { "zs" },
            if self.oracle_state { "obs" } else { "gbs" }
        );
        if self.oracle_domain {
            label.push_str("-od");
        }
        label
    }

    /// Applies a partial configuration given as a JSON object of field names.
    /// Nested tables such as `max_tokens` merge field by field; unknown
    /// fields are rejected. The result is validated.
    pub fn with_overrides(&self, overrides: &serde_json::Value) -> Result<Self, ConfigError> {
        use serde_json::Value;
        let err = |m: String| ConfigError::Override(m);
        let Value::Object(fields) = overrides else {
            return Err(err("expected a table of fields".into()));
        };
        let mut merged = serde_json::to_value(self).map_err(|e| err(e.to_string()))?;
        let Value::Object(target) = &mut merged else {
            return Err(err("configuration is not a table".into()));
        };
        for (key, value) in fields {
            match (target.get_mut(key), value) {
                (Some(Value::Object(inner)), Value::Object(updates)) => {
                    for (k, v) in updates {
                        if !inner.contains_key(k) {
                            return Err(err(format!("unknown field `{key}.{k}`")));
                        }
                        inner.insert(k.clone(), v.clone());
                    }
                }
                (Some(slot), _) => *slot = value.clone(),
                (None, _) => return Err(err(format!("unknown field `{key}`"))),
            }
        }
        let config: Self = serde_json::from_value(merged).map_err(|e| err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Backend calls per turn under this configuration.
    pub fn calls_per_turn(&self) -> usize {
        3 - usize::from(self.oracle_domain) - usize::from(self.oracle_state)
    }
}
