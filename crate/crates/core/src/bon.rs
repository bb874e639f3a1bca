//! Critique-aware best-of-N engine: candidate generation, reward
//! normalization, score fusion, Top-m Average Gap early stopping, and
//! candidate selection.
//!
//! Two execution modes are provided. `Faithful` generates and scores all N
//! candidates, ranks them, and then applies the early-stopping rule to pick
//! the selection horizon m*. `Incremental` grows the candidate set from a
//! prefix of two and stops generating as soon as the gap rule fires on the
//! prefix, which is the reading under which early stopping actually saves
//! computation. `Faithful` is kept as the reference implementation for
//! oracle tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::CritiqueOutcome;
use crate::error::{AgentError, BackendError, ContractViolation, StageFailure};
use crate::types::{Candidate, Stage, StageMode, StageTrace, Verdict};

/// How a BoN stage schedules generation and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BonMode {
    /// Generate and score all N candidates, then rank.
    Faithful,
    /// Generate one candidate at a time and stop once the gap rule fires.
    Incremental,
}

/// Candidate selection strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    /// Highest fused score, ties broken by smallest generation index.
    Argmax,
    /// Sample with probability proportional to `exp(beta * fused)`.
    Boltzmann { beta: f64 },
}

/// Knobs for one best-of-N stage run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BonConfig {
    /// Candidate budget N.
    pub n_candidates: usize,
    /// Early-stopping confidence threshold τ.
    pub tau: f64,
    pub mode: BonMode,
    pub selection: Selection,
    /// In-flight cap for concurrent candidate generation.
    pub concurrency_limit: usize,
    /// Sampling temperature for candidate generation.
    pub temperature: f64,
}

impl Default for BonConfig {
    fn default() -> Self {
        BonConfig {
            n_candidates: 5,
            tau: 0.3,
            mode: BonMode::Incremental,
            selection: Selection::Argmax,
            concurrency_limit: 4,
            temperature: 0.7,
        }
    }
}

impl BonConfig {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        if self.n_candidates < 1 {
            return Err(ContractViolation::new("n_candidates must be >= 1"));
        }
        if self.concurrency_limit < 1 {
            return Err(ContractViolation::new("concurrency_limit must be >= 1"));
        }
        if self.temperature < 0.0 {
            return Err(ContractViolation::new("temperature must be >= 0"));
        }
        if self.tau.is_nan() {
            return Err(ContractViolation::new("tau must not be NaN"));
        }
        if let Selection::Boltzmann { beta } = self.selection {
            if !(beta > 0.0) || !beta.is_finite() {
                return Err(ContractViolation::new("boltzmann beta must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Which scoring signals a stage fuses. Critique applies to the text and
/// image stages only; the cross stage ranks on reward alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageScoringPlan {
    pub stage: Stage,
    pub use_critique: bool,
}

impl StageScoringPlan {
    pub fn new(stage: Stage, use_critique: bool) -> Result<Self, ContractViolation> {
        if use_critique && stage == Stage::Cross {
            return Err(ContractViolation::new("the cross stage does not use a critique agent"));
        }
        Ok(StageScoringPlan { stage, use_critique })
    }

    pub fn for_stage(stage: Stage) -> Self {
        StageScoringPlan { stage, use_critique: stage != Stage::Cross }
    }
}

// ---------------------------------------------------------------------------
// Scoring primitives
// ---------------------------------------------------------------------------

/// Min-max normalize a reward batch into [0, 1], preserving order. A
/// degenerate batch (max == min, including singletons) maps to all 0.5.
pub fn normalize_rewards(raw: &[f64]) -> Result<Vec<f64>, ContractViolation> {
    if raw.is_empty() {
        return Err(ContractViolation::new("cannot normalize an empty reward batch"));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.5; raw.len()]);
    }
    Ok(raw.iter().map(|&x| (x - min) / (max - min)).collect())
}

/// Fuse a normalized reward with an optional critique score: the sum when a
/// critique is present, the reward alone otherwise.
pub fn fuse_score(reward_norm: f64, critique: Option<f64>) -> Result<f64, ContractViolation> {
    if !(0.0..=1.0).contains(&reward_norm) {
        return Err(ContractViolation::new(format!(
            "reward_norm {reward_norm} out of [0,1]"
        )));
    }
    if let Some(q) = critique {
        if !(0.0..=1.0).contains(&q) {
            return Err(ContractViolation::new(format!("critique {q} out of [0,1]")));
        }
        Ok(reward_norm + q)
    } else {
        Ok(reward_norm)
    }
}

/// Δ_m: the top sorted score minus the mean of ranks 2..=m. Input must be
/// sorted descending; 2 <= m <= len.
pub fn top_m_average_gap(scores_desc: &[f64], m: usize) -> Result<f64, ContractViolation> {
    if m < 2 || m > scores_desc.len() {
        return Err(ContractViolation::new(format!(
            "m={m} out of range 2..={}",
            scores_desc.len()
        )));
    }
    debug_assert!(
        scores_desc.windows(2).all(|w| w[0] >= w[1]),
        "scores must be sorted descending"
    );
    let runner_up_mean: f64 =
        scores_desc[1..m].iter().sum::<f64>() / (m - 1) as f64;
    Ok(scores_desc[0] - runner_up_mean)
}

/// Smallest m in 2..=len whose gap exceeds tau, on a descending-sorted list.
fn first_gap_index(scores_desc: &[f64], tau: f64) -> Option<usize> {
    (2..=scores_desc.len()).find(|&m| {
        top_m_average_gap(scores_desc, m).expect("m in range") > tau
    })
}

/// The ranking horizon m*: the smallest m in 2..=N with Δ_m > τ, else N.
/// Lists shorter than two cannot be ranked and yield 1.
pub fn stopping_index(scores: &[f64], tau: f64) -> usize {
    if scores.len() < 2 {
        return 1;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    first_gap_index(&sorted, tau).unwrap_or(scores.len())
}

/// Index of the maximum fused score; ties go to the smallest generation
/// index. `None` on an empty list.
pub fn select_argmax(fused: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in fused.iter().enumerate() {
        match best {
            Some((_, current)) if s <= current => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Softmax weights `exp(beta * s)`, computed with max-subtraction for
/// numerical stability. Weights sum to 1.
pub fn boltzmann_weights(fused: &[f64], beta: f64) -> Result<Vec<f64>, ContractViolation> {
    if fused.is_empty() {
        return Err(ContractViolation::new("cannot weight an empty candidate set"));
    }
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(ContractViolation::new("boltzmann beta must be finite and > 0"));
    }
    let max = fused.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = fused.iter().map(|&s| (beta * (s - max)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Sample an index with probability proportional to `exp(beta * fused)`.
pub fn select_boltzmann<R: Rng + ?Sized>(
    fused: &[f64],
    beta: f64,
    rng: &mut R,
) -> Result<usize, ContractViolation> {
    let weights = boltzmann_weights(fused, beta)?;
    let draw: f64 = rng.gen();
    let mut cumulative = 0.0;
    for (i, w) in weights.iter().enumerate() {
        cumulative += w;
        if draw < cumulative {
            return Ok(i);
        }
    }
    Ok(weights.len() - 1)
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

/// Supplies candidates and their scores for one stage run. Implementations
/// must be safe to call from multiple generation workers.
pub trait CandidateSource: Sync {
    fn generate(&self, index: usize) -> Result<Verdict, AgentError>;
    fn reward(&self, verdict: &Verdict, index: usize) -> Result<f64, BackendError>;
    fn critique(&self, verdict: &Verdict, index: usize) -> Result<CritiqueOutcome, AgentError>;
}

/// Logical call counts produced by one stage run, applied to the cost
/// ledger by the orchestrator. Counts are per logical call: semantic and
/// transport retries never double-count.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BonCounters {
    pub generation_calls: u64,
    pub reward_calls: u64,
    pub critique_calls: u64,
}

#[derive(Debug)]
pub struct BonStageResult {
    pub trace: StageTrace,
    pub counters: BonCounters,
}

/// A scored candidate under construction.
struct Entry {
    index: usize,
    verdict: Verdict,
    reward_raw: f64,
    critique: Option<f64>,
}

fn fuse_entries(entries: &[Entry]) -> (Vec<f64>, Vec<f64>) {
    let raws: Vec<f64> = entries.iter().map(|e| e.reward_raw).collect();
    let norms = normalize_rewards(&raws).expect("entries non-empty");
    let fused: Vec<f64> = norms
        .iter()
        .zip(entries.iter())
        .map(|(&n, e)| fuse_score(n, e.critique).expect("scores validated at parse"))
        .collect();
    (norms, fused)
}

/// Candidates sorted by (fused desc, generation index asc); returns
/// positions into the entries slice.
fn ranking(entries: &[Entry], fused: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        fused[b].total_cmp(&fused[a]).then(entries[a].index.cmp(&entries[b].index))
    });
    order
}

fn build_candidates(entries: &[Entry], norms: &[f64], fused: &[f64]) -> Vec<Candidate> {
    entries
        .iter()
        .enumerate()
        .map(|(pos, e)| Candidate {
            index: e.index,
            verdict: e.verdict.clone(),
            reward_raw: e.reward_raw,
            reward_norm: norms[pos],
            critique: e.critique,
            fused: fused[pos],
        })
        .collect()
}

/// Candidate for the unscored single-pass path: the degenerate batch rule
/// puts the normalized reward at 0.5 without any reward call.
pub(crate) fn unscored_candidate(index: usize, verdict: Verdict) -> Candidate {
    Candidate { index, verdict, reward_raw: 0.0, reward_norm: 0.5, critique: None, fused: 0.5 }
}

/// Generate the given candidate indices, fanning out up to `limit`
/// concurrent calls. Results come back in index order regardless of
/// completion order.
fn generate_batch(
    source: &dyn CandidateSource,
    indices: std::ops::Range<usize>,
    limit: usize,
) -> Vec<(usize, Result<Verdict, AgentError>)> {
    let todo: Vec<usize> = indices.collect();
    if limit <= 1 || todo.len() <= 1 {
        return todo.into_iter().map(|i| (i, source.generate(i))).collect();
    }
    let cursor = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<Verdict, AgentError>>>> =
        todo.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..limit.min(todo.len()) {
            scope.spawn(|| loop {
                let slot = cursor.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(&index) = todo.get(slot) else { break };
                let outcome = source.generate(index);
                *results[slot].lock().expect("result slot poisoned") = Some(outcome);
            });
        }
    });
    todo.into_iter()
        .zip(results)
        .map(|(i, slot)| (i, slot.into_inner().expect("slot poisoned").expect("slot filled")))
        .collect()
}

fn stage_failure(
    stage: Stage,
    message: String,
    warnings: Vec<String>,
    counters: BonCounters,
) -> StageFailure {
    StageFailure {
        stage,
        message,
        partial: StageTrace {
            stage,
            activated: true,
            mode: StageMode::Bon,
            candidates: Vec::new(),
            selected_index: None,
            stopping_prefix: None,
            verdict: None,
            warnings,
        },
        counters,
    }
}

/// Generate candidate `index` and score it per the plan. `Ok(None)` means
/// the candidate was dropped (with a warning pushed); hard failures never
/// surface here because drops are the defined degradation.
fn produce_entry(
    source: &dyn CandidateSource,
    plan: &StageScoringPlan,
    index: usize,
    generated: Result<Verdict, AgentError>,
    counters: &mut BonCounters,
    warnings: &mut Vec<String>,
) -> Option<Entry> {
    let verdict = match generated {
        Ok(v) => v,
        Err(e) => {
            warnings.push(format!("candidate {index} generation failed: {e}"));
            return None;
        }
    };
    counters.reward_calls += 1;
    let reward_raw = match source.reward(&verdict, index) {
        Ok(u) if u.is_finite() => u,
        Ok(u) => {
            warnings.push(format!("candidate {index} reward {u} is not finite; dropped"));
            return None;
        }
        Err(e) => {
            warnings.push(format!("candidate {index} reward scoring failed: {e}"));
            return None;
        }
    };
    let critique = if plan.use_critique {
        counters.critique_calls += 1;
        match source.critique(&verdict, index) {
            Ok(outcome) => {
                if let Some(w) = outcome.warning {
                    warnings.push(format!("candidate {index}: {w}"));
                }
                Some(outcome.score)
            }
            Err(e) => {
                warnings.push(format!("candidate {index} critique failed: {e}"));
                return None;
            }
        }
    } else {
        None
    };
    Some(Entry { index, verdict, reward_raw, critique })
}

/// Run one best-of-N stage end to end and assemble its trace.
pub fn run_bon_stage<R: Rng + ?Sized>(
    plan: &StageScoringPlan,
    cfg: &BonConfig,
    source: &dyn CandidateSource,
    rng: &mut R,
) -> Result<BonStageResult, StageFailure> {
    cfg.validate()
        .map_err(|e| stage_failure(plan.stage, e.to_string(), Vec::new(), BonCounters::default()))?;
    let n = cfg.n_candidates;
    let mut counters = BonCounters::default();
    let mut warnings = Vec::new();

    // Degenerate single-candidate budget: one forward pass, no scoring.
    if n == 1 {
        counters.generation_calls = 1;
        let verdict = source.generate(0).map_err(|e| {
            stage_failure(
                plan.stage,
                format!("candidate 0 generation failed: {e}"),
                Vec::new(),
                counters,
            )
        })?;
        let candidate = unscored_candidate(0, verdict.clone());
        return Ok(BonStageResult {
            trace: StageTrace {
                stage: plan.stage,
                activated: true,
                mode: StageMode::Bon,
                candidates: vec![candidate],
                selected_index: Some(0),
                stopping_prefix: Some(1),
                verdict: Some(verdict),
                warnings,
            },
            counters,
        });
    }

    let mut entries: Vec<Entry> = Vec::with_capacity(n);
    let mut stopped_at: Option<usize> = None;

    match cfg.mode {
        BonMode::Faithful => {
            counters.generation_calls = n as u64;
            for (index, generated) in generate_batch(source, 0..n, cfg.concurrency_limit) {
                if let Some(entry) =
                    produce_entry(source, plan, index, generated, &mut counters, &mut warnings)
                {
                    entries.push(entry);
                }
            }
        }
        BonMode::Incremental => {
            let initial = 2.min(n);
            counters.generation_calls = initial as u64;
            let mut pending = generate_batch(source, 0..initial, cfg.concurrency_limit);
            loop {
                for (index, generated) in pending.drain(..) {
                    if let Some(entry) =
                        produce_entry(source, plan, index, generated, &mut counters, &mut warnings)
                    {
                        entries.push(entry);
                    }
                }
                if entries.len() >= 2 {
                    let (_, fused) = fuse_entries(&entries);
                    let mut sorted = fused.clone();
                    sorted.sort_by(|a, b| b.total_cmp(a));
                    if let Some(m) = first_gap_index(&sorted, cfg.tau) {
                        stopped_at = Some(m);
                        break;
                    }
                }
                let next = counters.generation_calls as usize;
                if next >= n {
                    break;
                }
                counters.generation_calls += 1;
                pending.push((next, source.generate(next)));
            }
        }
    }

    if entries.is_empty() {
        return Err(stage_failure(
            plan.stage,
            "no candidate survived generation and scoring".to_string(),
            warnings,
            counters,
        ));
    }

    let (norms, fused) = fuse_entries(&entries);
    let candidates = build_candidates(&entries, &norms, &fused);
    let order = ranking(&entries, &fused);
    let m_star = match (cfg.mode, stopped_at) {
        (_, Some(m)) => m,
        (BonMode::Faithful, None) if entries.len() >= 2 => {
            let sorted: Vec<f64> = order.iter().map(|&p| fused[p]).collect();
            first_gap_index(&sorted, cfg.tau).unwrap_or(entries.len())
        }
        _ => entries.len().max(1),
    };

    // Faithful mode selects within the ranked top-m* prefix; incremental
    // mode selects over everything it generated.
    let pool: Vec<usize> = match cfg.mode {
        BonMode::Faithful => order[..m_star.min(order.len())].to_vec(),
        BonMode::Incremental => (0..entries.len()).collect(),
    };
    let selected_pos = match cfg.selection {
        Selection::Argmax => {
            // Both pool orders make the first maximum the lowest generation
            // index: the ranking breaks ties that way, and entries are
            // stored in generation order.
            let pool_scores: Vec<f64> = pool.iter().map(|&p| fused[p]).collect();
            pool[select_argmax(&pool_scores).expect("pool non-empty")]
        }
        Selection::Boltzmann { beta } => {
            let pool_scores: Vec<f64> = pool.iter().map(|&p| fused[p]).collect();
            let drawn = select_boltzmann(&pool_scores, beta, rng)
                .map_err(|e| stage_failure(plan.stage, e.to_string(), warnings.clone(), counters))?;
            pool[drawn]
        }
    };

    let verdict = entries[selected_pos].verdict.clone();
    Ok(BonStageResult {
        trace: StageTrace {
            stage: plan.stage,
            activated: true,
            mode: StageMode::Bon,
            candidates,
            selected_index: Some(selected_pos),
            stopping_prefix: Some(m_star),
            verdict: Some(verdict),
            warnings,
        },
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn verdict(stage: Stage, index: usize) -> Verdict {
        Verdict {
            stage,
            is_distorted: false,
            reasoning: format!("reasoning {index}"),
            raw_response: format!("raw {index}"),
        }
    }

    /// Scripted source: fixed rewards and critiques, optional generation
    /// failures.
    struct Scripted {
        stage: Stage,
        rewards: Vec<f64>,
        critiques: Vec<f64>,
        fail_generation: HashSet<usize>,
    }

    impl Scripted {
        fn new(stage: Stage, rewards: Vec<f64>, critiques: Vec<f64>) -> Self {
            Scripted { stage, rewards, critiques, fail_generation: HashSet::new() }
        }
    }

    impl CandidateSource for Scripted {
        fn generate(&self, index: usize) -> Result<Verdict, AgentError> {
            if self.fail_generation.contains(&index) {
                return Err(AgentError::Parse { role: "test".into(), raw: "junk".into() });
            }
            Ok(verdict(self.stage, index))
        }

        fn reward(&self, _verdict: &Verdict, index: usize) -> Result<f64, BackendError> {
            Ok(self.rewards[index])
        }

        fn critique(&self, _verdict: &Verdict, index: usize) -> Result<CritiqueOutcome, AgentError> {
            Ok(CritiqueOutcome { score: self.critiques[index], warning: None })
        }
    }

    fn cfg(mode: BonMode, n: usize, tau: f64) -> BonConfig {
        BonConfig { n_candidates: n, tau, mode, ..BonConfig::default() }
    }

    #[test]
    fn normalize_rewards_examples() {
        assert_eq!(normalize_rewards(&[2.0, 1.0, 0.0]).unwrap(), vec![1.0, 0.5, 0.0]);
        assert_eq!(normalize_rewards(&[3.0, 3.0, 3.0]).unwrap(), vec![0.5, 0.5, 0.5]);
        let out = normalize_rewards(&[-1.2, 0.4, 3.0, 0.4]).unwrap();
        let expected_mid = (0.4 - (-1.2)) / (3.0 - (-1.2));
        assert_eq!(out[0], 0.0);
        assert_eq!(out[1], expected_mid);
        assert_eq!(out[2], 1.0);
        assert_eq!(out[3], expected_mid);
        assert!(normalize_rewards(&[]).is_err());
    }

    #[test]
    fn fuse_score_examples() {
        assert_eq!(fuse_score(0.8, Some(0.6)).unwrap(), 1.4);
        assert_eq!(fuse_score(0.7, None).unwrap(), 0.7);
        assert_eq!(fuse_score(0.0, Some(0.0)).unwrap(), 0.0);
        assert!(fuse_score(1.2, None).is_err());
        assert!(fuse_score(0.5, Some(-0.1)).is_err());
    }

    #[test]
    fn top_m_average_gap_examples() {
        let scores = [0.9, 0.5, 0.4, 0.3, 0.2];
        assert!((top_m_average_gap(&scores, 2).unwrap() - 0.4).abs() < 1e-15);
        assert!((top_m_average_gap(&scores, 3).unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(top_m_average_gap(&[1.0, 1.0, 1.0, 1.0], 4).unwrap(), 0.0);
        assert!(top_m_average_gap(&scores, 1).is_err());
        assert!(top_m_average_gap(&scores, 6).is_err());
    }

    #[test]
    fn stopping_index_hand_cases() {
        let scores = [0.9, 0.5, 0.4, 0.3, 0.2];
        assert_eq!(stopping_index(&scores, 0.3), 2);
        // Δ2=0.4, Δ3=0.45, Δ4=0.5 are not > 0.5; Δ5=0.55 is.
        assert_eq!(stopping_index(&scores, 0.5), 5);
        assert_eq!(stopping_index(&scores, f64::INFINITY), 5);
        assert_eq!(stopping_index(&[1.0], 0.0), 1);
        // Unsorted input is sorted internally.
        assert_eq!(stopping_index(&[0.2, 0.9, 0.5, 0.4, 0.3], 0.3), 2);
    }

    #[test]
    fn select_argmax_examples() {
        assert_eq!(select_argmax(&[1.2, 1.5, 1.5]), Some(1));
        assert_eq!(select_argmax(&[0.3]), Some(0));
        assert_eq!(select_argmax(&[0.0, 2.0, 1.9]), Some(1));
        assert_eq!(select_argmax(&[]), None);
    }

    #[test]
    fn boltzmann_weight_examples() {
        let w = boltzmann_weights(&[1.0, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

        // beta -> 0+ approaches uniform.
        let w = boltzmann_weights(&[3.0, 1.0, 2.0], 1e-9).unwrap();
        for weight in &w {
            assert!((weight - 1.0 / 3.0).abs() < 1e-8);
        }

        // Large beta concentrates on the maximum.
        let w = boltzmann_weights(&[0.1, 0.9, 0.5], 1e6).unwrap();
        assert!(w[1] >= 1.0 - 1e-6);

        assert!(boltzmann_weights(&[1.0], 0.0).is_err());
        assert!(boltzmann_weights(&[], 1.0).is_err());
    }

    #[test]
    fn faithful_mode_matches_hand_trace() {
        // Raw rewards [0.2, 0.9, 0.5, 0.4, 0.3], cross stage (no critique):
        // normalized fused = [0, 1, 3/7, 2/7, 1/7]; Δ2 = 4/7 > 0.3 so m* = 2
        // and candidate 1 is selected.
        let source = Scripted::new(Stage::Cross, vec![0.2, 0.9, 0.5, 0.4, 0.3], vec![]);
        let plan = StageScoringPlan::for_stage(Stage::Cross);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result =
            run_bon_stage(&plan, &cfg(BonMode::Faithful, 5, 0.3), &source, &mut rng).unwrap();

        assert_eq!(result.trace.selected_index, Some(1));
        assert_eq!(result.trace.stopping_prefix, Some(2));
        assert_eq!(result.trace.candidates.len(), 5);
        assert_eq!(result.counters.generation_calls, 5);
        assert_eq!(result.counters.reward_calls, 5);
        assert_eq!(result.counters.critique_calls, 0);
        // Candidates are recorded in generation order with fused == norm.
        for (i, c) in result.trace.candidates.iter().enumerate() {
            assert_eq!(c.index, i);
            assert!(c.critique.is_none());
            assert_eq!(c.fused, c.reward_norm);
        }
    }

    #[test]
    fn incremental_mode_stops_on_early_gap() {
        // Prefix of two: rewards [2, 1] normalize to [1, 0]; critiques
        // [0.7, 1.0] give fused [1.7, 1.0]; Δ2 = 0.7 > 0.3 stops generation
        // at two candidates and argmax selects candidate 0.
        let source =
            Scripted::new(Stage::Text, vec![2.0, 1.0, 9.9, 9.9, 9.9], vec![0.7, 1.0, 0.0, 0.0, 0.0]);
        let plan = StageScoringPlan::for_stage(Stage::Text);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result =
            run_bon_stage(&plan, &cfg(BonMode::Incremental, 5, 0.3), &source, &mut rng).unwrap();

        assert_eq!(result.counters.generation_calls, 2);
        assert_eq!(result.trace.candidates.len(), 2);
        assert_eq!(result.trace.selected_index, Some(0));
        assert_eq!(result.trace.stopping_prefix, Some(2));
        assert_eq!(result.counters.critique_calls, 2);
        let fused: Vec<f64> = result.trace.candidates.iter().map(|c| c.fused).collect();
        assert_eq!(fused, vec![1.7, 1.0]);
    }

    #[test]
    fn incremental_identical_scores_generate_all() {
        let source = Scripted::new(Stage::Text, vec![1.0; 5], vec![0.5; 5]);
        let plan = StageScoringPlan::for_stage(Stage::Text);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result =
            run_bon_stage(&plan, &cfg(BonMode::Incremental, 5, 0.0), &source, &mut rng).unwrap();
        assert_eq!(result.counters.generation_calls, 5);
        assert_eq!(result.trace.stopping_prefix, Some(5));
        // Identical fused scores: lowest index wins.
        assert_eq!(result.trace.selected_index, Some(0));
    }

    #[test]
    fn negative_tau_stops_at_two() {
        let source = Scripted::new(Stage::Cross, vec![0.3, 0.1, 0.9, 0.5, 0.2], vec![]);
        let plan = StageScoringPlan::for_stage(Stage::Cross);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result =
            run_bon_stage(&plan, &cfg(BonMode::Incremental, 5, -0.5), &source, &mut rng).unwrap();
        assert_eq!(result.counters.generation_calls, 2);
        assert_eq!(result.trace.stopping_prefix, Some(2));
    }

    #[test]
    fn single_candidate_budget_skips_scoring() {
        let source = Scripted::new(Stage::Text, vec![1.0], vec![0.5]);
        let plan = StageScoringPlan::for_stage(Stage::Text);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result =
            run_bon_stage(&plan, &cfg(BonMode::Faithful, 1, 0.3), &source, &mut rng).unwrap();
        assert_eq!(result.trace.candidates.len(), 1);
        assert_eq!(result.trace.selected_index, Some(0));
        assert_eq!(result.counters.reward_calls, 0);
        assert_eq!(result.counters.critique_calls, 0);
        assert_eq!(result.counters.generation_calls, 1);
    }

    #[test]
    fn partial_generation_failures_shrink_the_batch() {
        let mut source =
            Scripted::new(Stage::Cross, vec![0.1, 0.0, 0.9, 0.4, 0.2], vec![]);
        source.fail_generation.insert(1);
        let plan = StageScoringPlan::for_stage(Stage::Cross);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let result =
            run_bon_stage(&plan, &cfg(BonMode::Faithful, 5, f64::INFINITY), &source, &mut rng)
                .unwrap();
        assert_eq!(result.trace.candidates.len(), 4);
        assert!(result.trace.candidates.iter().all(|c| c.index != 1));
        assert!(!result.trace.warnings.is_empty());
        assert_eq!(result.counters.generation_calls, 5);
        assert_eq!(result.counters.reward_calls, 4);
        // Selected is still the global argmax (generation index 2).
        let selected = &result.trace.candidates[result.trace.selected_index.unwrap()];
        assert_eq!(selected.index, 2);
    }

    #[test]
    fn all_failures_are_a_stage_failure() {
        let mut source = Scripted::new(Stage::Text, vec![0.0; 3], vec![0.5; 3]);
        source.fail_generation.extend([0, 1, 2]);
        let plan = StageScoringPlan::for_stage(Stage::Text);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = run_bon_stage(&plan, &cfg(BonMode::Faithful, 3, 0.3), &source, &mut rng)
            .unwrap_err();
        assert_eq!(err.stage, Stage::Text);
        assert!(err.partial.candidates.is_empty());
        assert_eq!(err.partial.warnings.len(), 3);
    }

    #[test]
    fn concurrent_generation_is_order_deterministic() {
        let source = Scripted::new(Stage::Cross, vec![0.5, 0.1, 0.8, 0.3, 0.9], vec![]);
        let plan = StageScoringPlan::for_stage(Stage::Cross);
        let run = |limit: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut config = cfg(BonMode::Faithful, 5, 0.3);
            config.concurrency_limit = limit;
            run_bon_stage(&plan, &config, &source, &mut rng).unwrap()
        };
        let sequential = run(1);
        let concurrent = run(4);
        assert_eq!(sequential.trace.selected_index, concurrent.trace.selected_index);
        assert_eq!(sequential.trace.stopping_prefix, concurrent.trace.stopping_prefix);
        let seq_fused: Vec<f64> = sequential.trace.candidates.iter().map(|c| c.fused).collect();
        let con_fused: Vec<f64> = concurrent.trace.candidates.iter().map(|c| c.fused).collect();
        assert_eq!(seq_fused, con_fused);
    }

    #[test]
    fn boltzmann_selection_is_seed_deterministic() {
        let source = Scripted::new(Stage::Cross, vec![0.5, 0.1, 0.8], vec![]);
        let plan = StageScoringPlan::for_stage(Stage::Cross);
        let mut config = cfg(BonMode::Faithful, 3, f64::INFINITY);
        config.selection = Selection::Boltzmann { beta: 2.0 };
        let pick = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            run_bon_stage(&plan, &config, &source, &mut rng).unwrap().trace.selected_index
        };
        assert_eq!(pick(3), pick(3));
    }

    proptest! {
        // m* equals a brute-force scan over all m in [2, N].
        #[test]
        fn stopping_index_matches_brute_force(
            scores in proptest::collection::vec(-5.0..5.0f64, 2..9),
            tau in -1.0..2.0f64,
        ) {
            let mut sorted = scores.clone();
            sorted.sort_by(|a: &f64, b: &f64| b.total_cmp(a));
            let mut expected = scores.len();
            for m in 2..=sorted.len() {
                let mean: f64 = sorted[1..m].iter().sum::<f64>() / (m - 1) as f64;
                if sorted[0] - mean > tau {
                    expected = m;
                    break;
                }
            }
            prop_assert_eq!(stopping_index(&scores, tau), expected);
        }

        // τ monotonicity: a harder threshold never stops earlier.
        #[test]
        fn stopping_index_monotone_in_tau(
            scores in proptest::collection::vec(0.0..2.0f64, 2..9),
            tau_low in 0.0..0.5f64,
            bump in 0.0..1.0f64,
        ) {
            let low = stopping_index(&scores, tau_low);
            let high = stopping_index(&scores, tau_low + bump);
            prop_assert!(low <= high);
        }

        // τ < 0 always stops at m = 2 on a list of length >= 2.
        #[test]
        fn negative_tau_gives_two(scores in proptest::collection::vec(-3.0..3.0f64, 2..9)) {
            prop_assert_eq!(stopping_index(&scores, -0.25), 2);
        }

        // Argmax is invariant under min-max normalization (a strictly
        // increasing transform) whenever the batch is non-degenerate.
        #[test]
        fn argmax_invariant_under_normalization(
            raw in proptest::collection::vec(-10.0..10.0f64, 1..9),
        ) {
            let norm = normalize_rewards(&raw).unwrap();
            let spread = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - raw.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 0.0 {
                prop_assert_eq!(select_argmax(&raw), select_argmax(&norm));
            }
        }

        // Boltzmann weights form a distribution and are permutation
        // equivariant.
        #[test]
        fn boltzmann_weights_are_a_distribution(
            fused in proptest::collection::vec(-2.0..4.0f64, 1..9),
            beta in 0.01..20.0f64,
        ) {
            let w = boltzmann_weights(&fused, beta).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);

            let mut reversed = fused.clone();
            reversed.reverse();
            let w_rev = boltzmann_weights(&reversed, beta).unwrap();
            for (a, b) in w.iter().zip(w_rev.iter().rev()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        // In incremental mode the number of generated candidates is
        // non-decreasing in τ for a fixed scripted score set.
        #[test]
        fn incremental_attempts_monotone_in_tau(
            rewards in proptest::collection::vec(0.0..3.0f64, 5),
            critiques in proptest::collection::vec(0.0..1.0f64, 5),
            tau_low in 0.0..0.6f64,
            bump in 0.0..0.8f64,
        ) {
            let source = Scripted::new(Stage::Text, rewards, critiques);
            let plan = StageScoringPlan::for_stage(Stage::Text);
            let attempts = |tau: f64| {
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                run_bon_stage(&plan, &cfg(BonMode::Incremental, 5, tau), &source, &mut rng)
                    .unwrap()
                    .counters
                    .generation_calls
            };
            prop_assert!(attempts(tau_low) <= attempts(tau_low + bump));
        }
    }
}
