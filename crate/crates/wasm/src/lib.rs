//! Browser demo bindings: parameter exploration for the best-of-N scoring
//! machinery and an in-browser run of the full mock pipeline.
//!
//! Every export takes and returns JSON strings so the page stays framework
//! free; errors come back as `{"error": "..."}` objects instead of thrown
//! exceptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use m3d_core::agents::TemplateSet;
use m3d_core::backends::mock::FixtureSet;
use m3d_core::bon::{boltzmann_weights, stopping_index, top_m_average_gap, BonMode, Selection};
use m3d_core::cascade::{run_pipeline, Deps, PipelineConfig, RoutingPolicy};
use m3d_core::demo::add_scenario;
use m3d_core::types::{Label, PlanLevel};

fn err(message: impl std::fmt::Display) -> String {
    json!({"error": message.to_string()}).to_string()
}

fn parse_scores(scores_json: &str) -> Result<Vec<f64>, String> {
    let scores: Vec<f64> = serde_json::from_str(scores_json)
        .map_err(|e| format!("scores must be a JSON array of numbers: {e}"))?;
    if scores.is_empty() {
        return Err("need at least one score".to_string());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err("scores must be finite".to_string());
    }
    Ok(scores)
}

/// Early-stopping explorer: sort the scores, compute every Top-m Average
/// Gap, and report the ranking horizon m* for the given threshold.
#[wasm_bindgen]
pub fn explore_stopping(scores_json: &str, tau: f64) -> String {
    let scores = match parse_scores(scores_json) {
        Ok(s) => s,
        Err(e) => return err(e),
    };
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| scores[i]).collect();
    let gaps: Vec<serde_json::Value> = (2..=sorted.len())
        .map(|m| {
            let delta = top_m_average_gap(&sorted, m).expect("m in range");
            json!({"m": m, "delta": delta, "exceeds": delta > tau})
        })
        .collect();
    let m_star = stopping_index(&scores, tau);
    json!({
        "order": order,
        "sorted": sorted,
        "gaps": gaps,
        "m_star": m_star,
        "tau": tau,
        "selected_input_index": order[0],
    })
    .to_string()
}

/// Boltzmann selection explorer: softmax weights over the scores plus an
/// empirical histogram of seeded draws.
#[wasm_bindgen]
pub fn boltzmann_explore(scores_json: &str, beta: f64, seed: u32, draws: u32) -> String {
    let scores = match parse_scores(scores_json) {
        Ok(s) => s,
        Err(e) => return err(e),
    };
    let weights = match boltzmann_weights(&scores, beta) {
        Ok(w) => w,
        Err(e) => return err(e),
    };
    let draws = draws.min(100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let mut counts = vec![0u32; scores.len()];
    for _ in 0..draws {
        let u: f64 = rng.gen();
        let mut cumulative = 0.0;
        let mut picked = scores.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            cumulative += w;
            if u < cumulative {
                picked = i;
                break;
            }
        }
        counts[picked] += 1;
    }
    json!({
        "weights": weights,
        "counts": counts,
        "draws": draws,
        "beta": beta,
    })
    .to_string()
}

/// Run the full scripted pipeline in the browser and return the trace.
///
/// `class` is one of original/tvd/vvd/cmm; `routing` one of
/// planner/standard/bon; `mode` incremental/faithful; `selection`
/// argmax/boltzmann.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn run_demo_pipeline(
    class: &str,
    routing: &str,
    n: u32,
    tau: f64,
    mode: &str,
    selection: &str,
    beta: f64,
    seed: u32,
) -> String {
    let Some(class) = Label::parse_name(class) else {
        return err(format!("unknown class {class:?}"));
    };
    let routing = match routing {
        "planner" => RoutingPolicy::Planner,
        "standard" => RoutingPolicy::AlwaysStandard,
        "bon" => RoutingPolicy::AlwaysBon,
        other => return err(format!("unknown routing {other:?}")),
    };
    let mode = match mode {
        "incremental" => BonMode::Incremental,
        "faithful" => BonMode::Faithful,
        other => return err(format!("unknown bon mode {other:?}")),
    };
    let selection = match selection {
        "argmax" => Selection::Argmax,
        "boltzmann" => Selection::Boltzmann { beta },
        other => return err(format!("unknown selection {other:?}")),
    };
    let n = (n as usize).clamp(1, m3d_core::demo::MAX_SCRIPTED_CANDIDATES);

    let mut fx = FixtureSet::new();
    let scenario =
        add_scenario(&mut fx, &format!("demo-{}", class.name()), class, PlanLevel::Level1);
    let deps = Deps::mock(std::sync::Arc::new(fx), TemplateSet::defaults(), 2_000);

    let mut cfg = PipelineConfig { routing, seed: seed as u64, ..PipelineConfig::default() };
    cfg.bon.n_candidates = n;
    cfg.bon.tau = tau;
    cfg.bon.mode = mode;
    cfg.bon.selection = selection;
    // Single-threaded target: keep generation inline.
    cfg.bon.concurrency_limit = 1;

    match run_pipeline(&scenario.sample, &cfg, &deps) {
        Ok(trace) => match serde_json::to_string(&trace) {
            Ok(body) => body,
            Err(e) => err(e),
        },
        Err(failure) => err(failure),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stopping_explorer_reports_hand_case() {
        let out = explore_stopping("[0.9, 0.5, 0.4, 0.3, 0.2]", 0.3);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["m_star"], 2);
        assert_eq!(v["selected_input_index"], 0);
        assert_eq!(v["gaps"][0]["m"], 2);
        assert!(v["gaps"][0]["exceeds"].as_bool().unwrap());

        let out = explore_stopping("[0.9, 0.5, 0.4, 0.3, 0.2]", 0.5);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["m_star"], 5);
    }

    #[test]
    fn stopping_explorer_rejects_bad_input() {
        let v: serde_json::Value = serde_json::from_str(&explore_stopping("[]", 0.1)).unwrap();
        assert!(v["error"].is_string());
        let v: serde_json::Value = serde_json::from_str(&explore_stopping("nope", 0.1)).unwrap();
        assert!(v["error"].is_string());
    }

    #[test]
    fn boltzmann_explorer_weights_and_draws() {
        let out = boltzmann_explore("[1.0, 0.0]", 1.0, 7, 2000);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        let w0 = v["weights"][0].as_f64().unwrap();
        let e = std::f64::consts::E;
        assert!((w0 - e / (e + 1.0)).abs() < 1e-12);
        let counts: Vec<u64> =
            v["counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
        assert_eq!(counts.iter().sum::<u64>(), 2000);
        // Seeded draws are reproducible.
        assert_eq!(out, boltzmann_explore("[1.0, 0.0]", 1.0, 7, 2000));
    }

    #[test]
    fn demo_pipeline_runs_each_class() {
        for class in ["original", "tvd", "vvd", "cmm"] {
            let out = run_demo_pipeline(class, "planner", 5, 0.3, "incremental", "argmax", 1.0, 0);
            let v: serde_json::Value = serde_json::from_str(&out).unwrap();
            assert!(v.get("error").is_none(), "class {class}: {out}");
            assert_eq!(v["final_label"]["name"], class);
            assert_eq!(v["stage_traces"].as_array().unwrap().len(), 3);
        }
    }

    #[test]
    fn demo_pipeline_honors_routing_and_selection() {
        let out = run_demo_pipeline("cmm", "standard", 5, 0.3, "incremental", "argmax", 1.0, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["plan_level"], "level0");
        assert_eq!(v["cost"]["total"]["reward_calls"], 0);

        let out = run_demo_pipeline("cmm", "bon", 5, 0.3, "faithful", "boltzmann", 5.0, 3);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["plan_level"], "level1");
        assert!(v["cost"]["total"]["reward_calls"].as_u64().unwrap() > 0);
        // Same seed, same trace.
        assert_eq!(out, run_demo_pipeline("cmm", "bon", 5, 0.3, "faithful", "boltzmann", 5.0, 3));

        let v: serde_json::Value = serde_json::from_str(&run_demo_pipeline(
            "nope",
            "planner",
            5,
            0.3,
            "incremental",
            "argmax",
            1.0,
            0,
        ))
        .unwrap();
        assert!(v["error"].is_string());
    }
}
