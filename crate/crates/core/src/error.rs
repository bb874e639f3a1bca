//! Error types shared across the engine.

use thiserror::Error;

use crate::types::{CostLedger, Stage, StageTrace};

/// A caller broke a documented precondition.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("contract violation: {message}")]
pub struct ContractViolation {
    pub message: String,
}

impl ContractViolation {
    pub fn new(message: impl Into<String>) -> Self {
        ContractViolation { message: message.into() }
    }
}

/// Failures raised by chat and reward backends.
#[derive(Debug, Clone, Error)]
pub enum BackendError {
    /// Transport-level failure that survived the bounded retry policy.
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    /// The server answered, but not in the wire schema we speak.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Scripted mock has no record for the requested key.
    #[error("missing fixture for {0}")]
    MissingFixture(String),
    /// Reward service unreachable after retries.
    #[error("reward backend unavailable: {0}")]
    RewardBackendUnavailable(String),
    #[error(transparent)]
    Contract(#[from] ContractViolation),
}

/// Failures raised by the auxiliary tools. Transport outages are *not*
/// errors at this level; they degrade into `ToolStatus::Unavailable`
/// observations so the pipeline can proceed.
#[derive(Debug, Clone, Error)]
pub enum ToolError {
    #[error("empty tool input: {0}")]
    EmptyInput(String),
    #[error("unresolvable image: {0}")]
    UnresolvableImage(String),
}

/// Failures raised while driving an agent (prompt render, backend call,
/// response parse).
#[derive(Debug, Clone, Error)]
pub enum AgentError {
    #[error("template {template_id}: {message}")]
    Template { template_id: String, message: String },
    #[error("could not parse {role} response after retry; last raw response: {raw:?}")]
    Parse { role: String, raw: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// A detection stage could not produce any verdict.
#[derive(Debug, Error)]
#[error("{stage} stage failed: {message}")]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
    /// Whatever the stage recorded before failing.
    pub partial: StageTrace,
    /// Calls issued before the failure, for ledger accounting.
    pub counters: crate::bon::BonCounters,
}

/// A pipeline run that could not reach a final label. Carries the partial
/// trace so failures stay auditable.
#[derive(Debug, Error)]
#[error("pipeline failed on sample {sample_id}{}: {message}", stage.map(|s| format!(" at {s} stage")).unwrap_or_default())]
pub struct PipelineFailure {
    pub sample_id: String,
    pub stage: Option<Stage>,
    pub message: String,
    pub stage_traces: Vec<StageTrace>,
    pub cost: CostLedger,
    pub warnings: Vec<String>,
}

/// Dataset ingestion failures, always naming the offending line.
#[derive(Debug, Clone, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Record { path: String, line: usize, message: String },
    #[error("{path}:{line}: duplicate sample id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
}
