//! Token-frugal automated program repair driven by a chat model.
//!
//! The engine asks a model for many candidate patches per call, summarizes
//! failed attempts instead of replaying whole conversations, restarts from
//! scratch when a line of attack stalls, and, once one patch passes the
//! tests, asks a few more times for alternatives. Every model exchange and
//! test run can be recorded and replayed offline.

pub mod bundle;
pub mod config;
pub mod domain;
pub mod harness;
pub mod llm;
pub mod orchestrator;
pub mod prompts;
pub mod report;
pub mod store;
pub mod templates;
pub mod tokenizer;

pub use bundle::load_bundle;
pub use config::load_config;
pub use domain::{
    BugBundle, PatchCandidate, PatchStatus, PromptKind, RepairConfig, RepairOutcome, Step,
    TerminalState, TestFailure,
};
pub use harness::{PatchEvaluator, ShellHarness};
pub use llm::{Client, Sampler};
pub use orchestrator::{repair, RepairError};
pub use store::{CacheMode, Store};
