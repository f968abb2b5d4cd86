//! storydistill — knowledge internalization for language models.
//!
//! The pipeline represents a knowledge edit as a background story, generates
//! multi-hop training questions that depend on the edit, samples teacher
//! responses with the story in context, and distills them into a student
//! adapter that never reliably sees the context. An evaluation harness
//! measures factual accuracy, locality, and portability of the edit, and a
//! deterministic synthetic world makes the whole pipeline testable without
//! any external model.
//!
//! Start with the runnable examples (`cargo run --example <name>`):
//!
//! - `synthetic_world` — knowledge graph, edits, and the traversal oracle
//! - `segment_format` — the segment-tagged training record grammar
//! - `context_dropout` — student views and teacher/student token alignment
//! - `distillation_training` — the KL objective on a closed-form model
//! - `evaluate_edit` — metric suites and reports
//! - `generation_client` — backend presets, caching, and retries
//! - `pipeline_end_to_end` — every stage against the scripted world

pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod genclient;
pub mod prompts;
pub mod records;
pub mod synthesis;
pub mod synthworld;
pub mod trainer;

pub use error::{Error, Result};

/// CLI entry point used by the `storydistill` binary; returns the exit code.
pub fn run_cli() -> i32 {
    // The pipeline module provides the real implementation once built.
    eprintln!("pipeline CLI not yet wired");
    1
}
