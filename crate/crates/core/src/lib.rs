//! Cascaded multi-agent engine for mixed-source multi-modal misinformation
//! detection.
//!
//! Three modality-specific detection agents (text, image, cross-modal) run
//! in a conditionally activated cascade. A lightweight planning agent routes
//! each sample to either a single forward pass or critique-aware best-of-N
//! reasoning, where candidates are scored by an external reward model plus
//! modality-specific critique agents and ranked with a Top-m Average Gap
//! early-stopping rule. Everything runs against pluggable chat/reward/tool
//! backends, with a deterministic scripted mock for offline runs and tests.
//!
//! Module map:
//! - [`types`]: domain types, label algebra, trace/ledger schema
//! - [`backends`]: chat + reward contracts, scripted mock, HTTP adapters
//! - [`tools`]: web search, logic check, forgery detection, image analysis
//! - [`agents`]: prompt templates, parsers, agent runners
//! - [`bon`]: best-of-N scoring, early stopping, selection
//! - [`cascade`]: per-sample orchestration and batch driver
//! - [`evalkit`]: datasets, metrics, cost reports
//! - [`demo`]: scripted end-to-end scenarios

pub mod agents;
pub mod backends;
pub mod bon;
pub mod cascade;
pub mod demo;
pub mod error;
pub mod evalkit;
pub mod tools;
pub mod types;

mod util;

pub use cascade::{run_batch, run_pipeline, Deps, PipelineConfig, RoutingPolicy, RunRecord};
pub use types::{Label, PipelineTrace, Sample, Stage, Verdict};
