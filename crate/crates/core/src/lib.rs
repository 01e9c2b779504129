//! Task-oriented dialogue on top of prompted language models.
//!
//! Each user turn goes through domain detection, state-update tracking,
//! a database query and delexicalized response generation, optionally with
//! few-shot examples retrieved from a small context store.

pub mod backends;
pub mod config;
pub mod context_store;
pub mod database;
pub mod dialogue;
pub mod eval;
pub mod fuzzy;
pub mod ingest;
pub mod parsing;
pub mod pipeline;
pub mod prompts;
pub mod schema;
pub mod state;
