//! Dataset ingestion, classification metrics, cost aggregation, and report
//! emission.
//!
//! Precision, recall, and F1 are macro-averaged over the four classes;
//! classes with zero support or zero predictions contribute 0 to their
//! undefined components. Cost means are computed from exact integer sums
//! with a single final division.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ContractViolation, DatasetError};
use crate::types::{ImageRef, Label, PipelineTrace, PlanLevel, Sample, Stage};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
}

/// Load a JSONL dataset: one record per line, ids unique, labels (when
/// present) drawn case-insensitively from {original, tvd, vvd, cmm}.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let display = path.display().to_string();
    let body = fs::read_to_string(path)
        .map_err(|e| DatasetError::Io { path: display.clone(), message: e.to_string() })?;
    let mut samples = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in body.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(line).map_err(|e| {
            DatasetError::Record { path: display.clone(), line: line_no, message: e.to_string() }
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: display.clone(),
                line: line_no,
                id: record.id,
            });
        }
        let gold_label = match &record.label {
            Some(raw) => Some(Label::parse_name(raw).ok_or_else(|| DatasetError::Record {
                path: display.clone(),
                line: line_no,
                message: format!("unknown label {raw:?}"),
            })?),
            None => None,
        };
        let image_ref = match record.image.as_deref() {
            Some(raw) => ImageRef::infer(raw),
            None => ImageRef::Absent,
        };
        let sample =
            Sample::new(record.id, record.text, image_ref, gold_label).map_err(|e| {
                DatasetError::Record { path: display.clone(), line: line_no, message: e.to_string() }
            })?;
        samples.push(sample);
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<PerClassMetrics>,
    /// Rows are gold labels, columns are predictions, both in code order.
    pub confusion_matrix: [[u64; 4]; 4],
}

/// Standard multi-class metrics over aligned prediction/gold lists.
pub fn compute_metrics(
    predictions: &[Label],
    golds: &[Label],
) -> Result<MetricsReport, ContractViolation> {
    if predictions.len() != golds.len() {
        return Err(ContractViolation::new(format!(
            "length mismatch: {} predictions vs {} golds",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(ContractViolation::new("cannot compute metrics over zero samples"));
    }

    let mut confusion = [[0u64; 4]; 4];
    for (pred, gold) in predictions.iter().zip(golds) {
        confusion[gold.code() as usize][pred.code() as usize] += 1;
    }

    let total = predictions.len() as u64;
    let correct: u64 = (0..4).map(|i| confusion[i][i]).sum();
    let accuracy = correct as f64 / total as f64;

    let mut per_class = Vec::with_capacity(4);
    for label in Label::ALL {
        let k = label.code() as usize;
        let tp = confusion[k][k];
        let support: u64 = confusion[k].iter().sum();
        let predicted: u64 = (0..4).map(|g| confusion[g][k]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(PerClassMetrics { label, precision, recall, f1, support });
    }

    let macro_precision = per_class.iter().map(|c| c.precision).sum::<f64>() / 4.0;
    let macro_recall = per_class.iter().map(|c| c.recall).sum::<f64>() / 4.0;
    let macro_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / 4.0;

    Ok(MetricsReport {
        accuracy,
        macro_precision,
        macro_recall,
        macro_f1,
        per_class,
        confusion_matrix: confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMeans {
    pub text: f64,
    pub image: f64,
    pub cross: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub samples: u64,
    pub mean_chat_calls: f64,
    pub mean_tool_calls: f64,
    pub mean_reward_calls: f64,
    pub mean_critique_calls: f64,
    pub mean_candidates_per_stage: StageMeans,
    /// Fraction of samples the planner escalated to best-of-N.
    pub bon_activation_ratio: f64,
    pub mean_wall_time_ms: f64,
}

/// Aggregate per-run ledgers into batch-level means.
pub fn aggregate_costs(traces: &[PipelineTrace]) -> Result<CostReport, ContractViolation> {
    if traces.is_empty() {
        return Err(ContractViolation::new("cannot aggregate zero traces"));
    }
    let n = traces.len() as u64;
    let mut chat = 0u64;
    let mut tool = 0u64;
    let mut reward = 0u64;
    let mut critique = 0u64;
    let mut candidates = [0u64; 3];
    let mut level1 = 0u64;
    let mut wall = 0u64;
    for trace in traces {
        let total = trace.cost.total();
        chat += total.chat_calls;
        tool += total.tool_calls;
        reward += total.reward_calls;
        critique += total.critique_calls;
        for (i, stage) in Stage::CASCADE.iter().enumerate() {
            candidates[i] += trace.cost.stage(*stage).candidates_generated;
        }
        if trace.plan_level == PlanLevel::Level1 {
            level1 += 1;
        }
        wall += trace.wall_time_ms;
    }
    let mean = |sum: u64| sum as f64 / n as f64;
    Ok(CostReport {
        samples: n,
        mean_chat_calls: mean(chat),
        mean_tool_calls: mean(tool),
        mean_reward_calls: mean(reward),
        mean_critique_calls: mean(critique),
        mean_candidates_per_stage: StageMeans {
            text: mean(candidates[0]),
            image: mean(candidates[1]),
            cross: mean(candidates[2]),
        },
        bon_activation_ratio: level1 as f64 / n as f64,
        mean_wall_time_ms: mean(wall),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSampleRow {
    pub id: String,
    pub gold: Option<Label>,
    pub predicted: Option<Label>,
    pub correct: Option<bool>,
    pub plan_level: Option<PlanLevel>,
    pub failed: bool,
}

/// The evaluation report document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub metrics: MetricsReport,
    pub costs: CostReport,
    pub config_echo: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<PerSampleRow>>,
}

/// Write the report as pretty JSON. Refuses to clobber an existing file
/// unless `overwrite` is set.
pub fn emit_report(report: &Report, path: &Path, overwrite: bool) -> std::io::Result<()> {
    if path.exists() && !overwrite {
        return Err(std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            format!("{} exists; pass overwrite to replace it", path.display()),
        ));
    }
    let mut body = serde_json::to_string_pretty(report)?;
    body.push('\n');
    fs::write(path, body)
}
