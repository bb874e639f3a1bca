//! Human-readable rendering of trace files.

use std::path::Path;

use m3d_core::cascade::RunRecord;
use m3d_core::types::{Candidate, Stage, StageMode, StageTrace};

use crate::CliError;

pub(crate) fn cmd_inspect(path: &Path, stage_filter: Option<Stage>) -> Result<(), CliError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;

    // A single (possibly pretty-printed) document, or JSONL with one record
    // per line.
    let records: Vec<RunRecord> = match serde_json::from_str::<RunRecord>(&body) {
        Ok(record) => vec![record],
        Err(_) => {
            let mut parsed = Vec::new();
            for (idx, line) in body.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record = serde_json::from_str(line).map_err(|e| {
                    CliError::Runtime(format!(
                        "{}:{}: malformed trace record: {e}",
                        path.display(),
                        idx + 1
                    ))
                })?;
                parsed.push(record);
            }
            if parsed.is_empty() {
                return Err(CliError::Runtime(format!(
                    "{}: no trace records found",
                    path.display()
                )));
            }
            parsed
        }
    };

    for record in &records {
        match record {
            RunRecord::Trace(trace) => {
                println!(
                    "sample {}: {}  plan={}  wall={}ms",
                    trace.sample_id,
                    trace.final_label.name().to_ascii_uppercase(),
                    level_name(trace.plan_level),
                    trace.wall_time_ms
                );
                for stage_trace in &trace.stage_traces {
                    render_stage(stage_trace, stage_filter);
                }
                let total = trace.cost.total();
                println!(
                    "  cost: chat={} tool={} reward={} critique={} candidates={}",
                    total.chat_calls,
                    total.tool_calls,
                    total.reward_calls,
                    total.critique_calls,
                    total.candidates_generated
                );
                for warning in &trace.warnings {
                    println!("  warning: {warning}");
                }
            }
            RunRecord::Failure(failure) => {
                println!(
                    "sample {}: FAILED at {} stage: {}",
                    failure.sample_id,
                    failure.stage.map(|s| s.name()).unwrap_or("pipeline"),
                    failure.error
                );
                for stage_trace in &failure.stage_traces {
                    render_stage(stage_trace, stage_filter);
                }
            }
        }
    }
    Ok(())
}

fn level_name(level: m3d_core::types::PlanLevel) -> &'static str {
    match level {
        m3d_core::types::PlanLevel::Level0 => "level0",
        m3d_core::types::PlanLevel::Level1 => "level1",
    }
}

fn render_stage(stage_trace: &StageTrace, stage_filter: Option<Stage>) {
    if stage_filter.is_some_and(|s| s != stage_trace.stage) {
        return;
    }
    if !stage_trace.activated {
        println!("  {:<5} skipped", stage_trace.stage);
        return;
    }
    let mode = match stage_trace.mode {
        StageMode::Standard => "standard",
        StageMode::Bon => "bon",
    };
    let stopping = stage_trace.stopping_prefix.map(|m| format!("  m*={m}")).unwrap_or_default();
    let selected = stage_trace
        .selected_index
        .map(|i| format!("  selected=#{}", stage_trace.candidates[i].index))
        .unwrap_or_default();
    println!("  {:<5} [{mode}]{stopping}{selected}", stage_trace.stage);
    for candidate in &stage_trace.candidates {
        render_candidate(candidate, stage_trace.selected_index, stage_trace);
    }
    for warning in &stage_trace.warnings {
        println!("    warning: {warning}");
    }
}

fn render_candidate(candidate: &Candidate, selected: Option<usize>, stage_trace: &StageTrace) {
    let marker = if selected
        .is_some_and(|i| std::ptr::eq(&stage_trace.candidates[i], candidate))
    {
        "*"
    } else {
        " "
    };
    let critique = candidate.critique.map(|q| format!(" q={q:.3}")).unwrap_or_default();
    let verdict = if candidate.verdict.is_distorted { "distorted" } else { "original" };
    println!(
        "   {marker}#{} raw={:.3} norm={:.3}{critique} s={:.3} {verdict} :: {}",
        candidate.index,
        candidate.reward_raw,
        candidate.reward_norm,
        candidate.fused,
        oneline(&candidate.verdict.reasoning)
    );
}

fn oneline(text: &str) -> String {
    let flat = text.replace('\n', " ");
    let mut out: String = flat.chars().take(100).collect();
    if flat.chars().count() > 100 {
        out.push('…');
    }
    out
}
