//! End-to-end orchestration of one sample: planner routing, conditional
//! stage activation, standard-vs-BoN dispatch, and trace/ledger assembly.

use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentRuntime, CritiqueOutcome, SamplingParams, TemplateSet};
use crate::backends::mock::{FixtureSet, MockChat, MockForgery, MockReward, MockWebSearch};
use crate::backends::{ChatBackend, RewardBackend, RewardRequest};
use crate::bon::{
    run_bon_stage, unscored_candidate, BonConfig, CandidateSource, StageScoringPlan,
};
use crate::error::{AgentError, BackendError, ContractViolation, PipelineFailure};
use crate::tools::{ToolCache, ToolId, ToolObservation, Tools};
use crate::types::{
    assemble_final_label, CostLedger, PipelineTrace, PlanLevel, Sample, Stage, StageMode,
    StageTrace, Verdict,
};
use crate::util::{fnv1a64, mix64};

/// Which inference strategy gate applies to a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingPolicy {
    /// Let the planning agent choose per sample.
    Planner,
    /// Single-pass reasoning everywhere.
    AlwaysStandard,
    /// Best-of-N reasoning everywhere.
    AlwaysBon,
}

/// Optional per-stage overrides of the BoN budget and threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_candidates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOverrides {
    #[serde(default)]
    pub text: StageOverride,
    #[serde(default)]
    pub image: StageOverride,
    #[serde(default)]
    pub cross: StageOverride,
}

impl StageOverrides {
    fn for_stage(&self, stage: Stage) -> StageOverride {
        match stage {
            Stage::Text => self.text,
            Stage::Image => self.image,
            Stage::Cross => self.cross,
        }
    }
}

/// Service endpoints for live runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendEndpoints {
    /// OpenAI-compatible chat completions base URL.
    pub base_url: String,
    pub model: String,
    pub reward_url: String,
    pub forgery_url: String,
    pub web_search_url: String,
    pub max_retries: u32,
    pub timeout_secs: u64,
}

impl Default for BackendEndpoints {
    fn default() -> Self {
        BackendEndpoints {
            base_url: "http://127.0.0.1:8000".to_string(),
            model: "default".to_string(),
            reward_url: "http://127.0.0.1:8001".to_string(),
            forgery_url: "http://127.0.0.2:8002".to_string(),
            web_search_url: "https://en.wikipedia.org/w/api.php".to_string(),
            max_retries: 2,
            timeout_secs: 120,
        }
    }
}

/// Full engine configuration. Serializable so runs can echo it verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub routing: RoutingPolicy,
    pub bon: BonConfig,
    pub stage_overrides: StageOverrides,
    pub endpoints: BackendEndpoints,
    /// Prompt template overrides; defaults are embedded.
    pub templates_dir: Option<PathBuf>,
    /// When set, the engine runs against scripted fixtures instead of live
    /// services.
    pub fixtures_dir: Option<PathBuf>,
    pub seed: u64,
    /// Temperature for single-pass, planner, and critique calls. BoN
    /// candidate generation uses `bon.temperature`.
    pub temperature: f64,
    pub max_tokens: u32,
    pub tool_char_cap: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            routing: RoutingPolicy::Planner,
            bon: BonConfig::default(),
            stage_overrides: StageOverrides::default(),
            endpoints: BackendEndpoints::default(),
            templates_dir: None,
            fixtures_dir: None,
            seed: 0,
            temperature: 0.0,
            max_tokens: 1024,
            tool_char_cap: crate::tools::DEFAULT_TOOL_CHAR_CAP,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        self.bon.validate()?;
        for stage in Stage::CASCADE {
            let ov = self.stage_overrides.for_stage(stage);
            if ov.n_candidates == Some(0) {
                return Err(ContractViolation::new(format!(
                    "{stage} override n_candidates must be >= 1"
                )));
            }
            if ov.tau.is_some_and(f64::is_nan) {
                return Err(ContractViolation::new(format!("{stage} override tau must not be NaN")));
            }
        }
        if self.max_tokens == 0 {
            return Err(ContractViolation::new("max_tokens must be positive"));
        }
        if self.temperature < 0.0 {
            return Err(ContractViolation::new("temperature must be >= 0"));
        }
        Ok(())
    }

    fn stage_bon(&self, stage: Stage) -> BonConfig {
        let ov = self.stage_overrides.for_stage(stage);
        BonConfig {
            n_candidates: ov.n_candidates.unwrap_or(self.bon.n_candidates),
            tau: ov.tau.unwrap_or(self.bon.tau),
            ..self.bon
        }
    }
}

/// Wall-clock source. Mock runs use a fixed value so traces serialize
/// byte-identically across reruns.
#[derive(Debug, Clone, Copy)]
pub enum Clock {
    System,
    Fixed(u64),
}

pub struct ClockStart(Option<std::time::Instant>);

impl Clock {
    pub fn start(&self) -> ClockStart {
        match self {
            Clock::System => ClockStart(Some(std::time::Instant::now())),
            Clock::Fixed(_) => ClockStart(None),
        }
    }

    pub fn elapsed_ms(&self, start: &ClockStart) -> u64 {
        match (self, &start.0) {
            (Clock::Fixed(v), _) => *v,
            (Clock::System, Some(instant)) => instant.elapsed().as_millis() as u64,
            (Clock::System, None) => 0,
        }
    }
}

/// Constructed backends, tools, and templates for a run.
pub struct Deps {
    pub chat: Box<dyn ChatBackend>,
    pub reward: Box<dyn RewardBackend>,
    pub tools: Tools,
    pub templates: TemplateSet,
    pub clock: Clock,
}

impl Deps {
    /// Scripted dependencies over an in-memory fixture set.
    pub fn mock(fixtures: Arc<FixtureSet>, templates: TemplateSet, tool_char_cap: usize) -> Self {
        Deps {
            chat: Box::new(MockChat::new(Arc::clone(&fixtures))),
            reward: Box::new(MockReward::new(Arc::clone(&fixtures))),
            tools: Tools::new(
                Box::new(MockWebSearch::new(Arc::clone(&fixtures))),
                Box::new(MockForgery::new(fixtures)),
            )
            .with_char_cap(tool_char_cap),
            templates,
            clock: Clock::Fixed(0),
        }
    }

    /// Build dependencies from the configuration: scripted when
    /// `fixtures_dir` is set, live HTTP otherwise.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, String> {
        let templates = match &cfg.templates_dir {
            Some(dir) => TemplateSet::load_dir(dir).map_err(|e| e.to_string())?,
            None => TemplateSet::defaults(),
        };
        if let Some(dir) = &cfg.fixtures_dir {
            let fixtures = FixtureSet::load_dir(dir).map_err(|e| e.to_string())?;
            return Ok(Deps::mock(Arc::new(fixtures), templates, cfg.tool_char_cap));
        }
        #[cfg(feature = "http")]
        {
            Ok(Deps::live(&cfg.endpoints, templates, cfg.tool_char_cap))
        }
        #[cfg(not(feature = "http"))]
        {
            Err("no fixtures_dir configured and the http feature is disabled".to_string())
        }
    }

    #[cfg(feature = "http")]
    fn live(endpoints: &BackendEndpoints, templates: TemplateSet, tool_char_cap: usize) -> Self {
        use crate::backends::http::{HttpChatBackend, HttpRewardBackend};
        use crate::tools::http::{HttpForgeryDetector, HttpWebSearch};
        Deps {
            chat: Box::new(HttpChatBackend::new(
                endpoints.base_url.clone(),
                endpoints.model.clone(),
                endpoints.max_retries,
                endpoints.timeout_secs,
            )),
            reward: Box::new(HttpRewardBackend::new(
                endpoints.reward_url.clone(),
                endpoints.max_retries,
                endpoints.timeout_secs,
            )),
            tools: Tools::new(
                Box::new(HttpWebSearch::new(endpoints.web_search_url.clone(), endpoints.timeout_secs)),
                Box::new(HttpForgeryDetector::new(
                    endpoints.forgery_url.clone(),
                    endpoints.timeout_secs,
                )),
            )
            .with_char_cap(tool_char_cap),
            templates,
            clock: Clock::System,
        }
    }
}

/// One line of batch output: a completed trace or a failure record.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RunRecord {
    Trace(PipelineTrace),
    Failure(FailureRecord),
}

impl RunRecord {
    pub fn sample_id(&self) -> &str {
        match self {
            RunRecord::Trace(t) => &t.sample_id,
            RunRecord::Failure(f) => &f.sample_id,
        }
    }

    pub fn trace(&self) -> Option<&PipelineTrace> {
        match self {
            RunRecord::Trace(t) => Some(t),
            RunRecord::Failure(_) => None,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, RunRecord::Trace(_))
    }
}

/// Serialized form of a failed run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    /// Always true; distinguishes failure records from traces in JSONL.
    pub failed: bool,
    pub stage: Option<Stage>,
    pub error: String,
    pub stage_traces: Vec<StageTrace>,
    pub cost: CostLedger,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl From<PipelineFailure> for FailureRecord {
    fn from(f: PipelineFailure) -> Self {
        FailureRecord {
            sample_id: f.sample_id,
            failed: true,
            stage: f.stage,
            error: f.message,
            stage_traces: f.stage_traces,
            cost: f.cost,
            warnings: f.warnings,
        }
    }
}

/// Scoring access for one stage of one sample, wired to the real agents,
/// backends, and tool observations.
struct PipelineSource<'a> {
    runtime: AgentRuntime<'a>,
    reward: &'a dyn RewardBackend,
    sample: &'a Sample,
    stage: Stage,
    stage_obs: &'a ToolObservation,
    critique_obs: Option<&'a ToolObservation>,
    generation_params: SamplingParams,
    critique_params: SamplingParams,
    sample_seed: u64,
}

impl CandidateSource for PipelineSource<'_> {
    fn generate(&self, index: usize) -> Result<Verdict, AgentError> {
        let params = SamplingParams {
            seed: Some(self.sample_seed.wrapping_add(index as u64)),
            ..self.generation_params
        };
        match self.stage {
            Stage::Text => self.runtime.run_text_agent(self.sample, self.stage_obs, params, Some(index)),
            Stage::Image => {
                self.runtime.run_image_agent(self.sample, self.stage_obs, params, Some(index))
            }
            Stage::Cross => {
                self.runtime.run_cross_agent(self.sample, self.stage_obs, params, Some(index))
            }
        }
    }

    fn reward(&self, verdict: &Verdict, index: usize) -> Result<f64, BackendError> {
        let request = RewardRequest {
            context: reward_context(self.stage, self.sample),
            response: crate::agents::detection_record(verdict),
            sample_id: self.sample.id.clone(),
            stage: self.stage,
            candidate_index: index,
        };
        self.reward.score_reward(&request)
    }

    fn critique(&self, verdict: &Verdict, index: usize) -> Result<CritiqueOutcome, AgentError> {
        let obs = self.critique_obs.expect("critique plan requires a tool observation");
        match self.stage {
            Stage::Text => {
                self.runtime.run_text_critique(self.sample, verdict, obs, self.critique_params, index)
            }
            Stage::Image => {
                self.runtime.run_image_critique(self.sample, verdict, obs, self.critique_params, index)
            }
            Stage::Cross => unreachable!("cross stage never critiques"),
        }
    }
}

/// Task framing handed to the reward model alongside the claim.
fn reward_context(stage: Stage, sample: &Sample) -> String {
    let task = match stage {
        Stage::Text => {
            "Assess whether the textual claim of a news item contradicts credible objective evidence."
        }
        Stage::Image => {
            "Assess whether the news image is forged, manipulated, or violates common-sense constraints."
        }
        Stage::Cross => "Assess whether the news caption and the news image are semantically aligned.",
    };
    format!("{task}\nCLAIM: {}", sample.text)
}

struct RunState {
    ledger: CostLedger,
    stage_traces: Vec<StageTrace>,
    warnings: Vec<String>,
}

impl RunState {
    fn fail(self, sample: &Sample, stage: Option<Stage>, message: String) -> PipelineFailure {
        PipelineFailure {
            sample_id: sample.id.clone(),
            stage,
            message,
            stage_traces: self.stage_traces,
            cost: self.ledger,
            warnings: self.warnings,
        }
    }
}

/// Run the full cascade on one sample.
///
/// The planner runs only under `RoutingPolicy::Planner`; Level0 routes every
/// activated stage through a single forward pass, Level1 through best-of-N.
/// Stages execute text → image → cross with conditional activation, and the
/// first distorted verdict ends the cascade.
pub fn run_pipeline(
    sample: &Sample,
    cfg: &PipelineConfig,
    deps: &Deps,
) -> Result<PipelineTrace, PipelineFailure> {
    let mut state =
        RunState { ledger: CostLedger::default(), stage_traces: Vec::new(), warnings: Vec::new() };

    if let Err(e) = cfg.validate() {
        return Err(state.fail(sample, None, e.to_string()));
    }
    if sample.id.trim().is_empty() || sample.text.trim().is_empty() {
        return Err(state.fail(sample, None, "sample id and text must be non-empty".to_string()));
    }

    let started = deps.clock.start();
    let sample_seed = mix64(cfg.seed ^ fnv1a64(sample.id.as_bytes()));
    let runtime = AgentRuntime { chat: deps.chat.as_ref(), templates: &deps.templates };
    let base_params = SamplingParams {
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        seed: Some(sample_seed),
    };

    // Routing.
    let plan_level = match cfg.routing {
        RoutingPolicy::AlwaysStandard => PlanLevel::Level0,
        RoutingPolicy::AlwaysBon => PlanLevel::Level1,
        RoutingPolicy::Planner => {
            if sample.image_ref.is_absent() {
                return Err(state.fail(
                    sample,
                    None,
                    "planner routing requires an image; this sample has none".to_string(),
                ));
            }
            state.ledger.planner.chat_calls += 1;
            match runtime.run_planner(sample, base_params) {
                Ok(outcome) => {
                    if let Some(warning) = outcome.warning {
                        state.warnings.push(warning);
                    }
                    outcome.decision.level
                }
                Err(e) => return Err(state.fail(sample, None, format!("planner failed: {e}"))),
            }
        }
    };
    let planned_mode =
        if plan_level == PlanLevel::Level1 { StageMode::Bon } else { StageMode::Standard };

    let cache = ToolCache::new();
    let mut verdicts: Vec<Verdict> = Vec::new();
    let mut cascade_open = true;

    for stage in Stage::CASCADE {
        if !cascade_open {
            state.stage_traces.push(StageTrace::skipped(stage, planned_mode));
            continue;
        }
        if stage != Stage::Text && sample.image_ref.is_absent() {
            return Err(state.fail(
                sample,
                Some(stage),
                format!("{stage} stage is activated but the sample has no image"),
            ));
        }

        // Stage tool observation (cached per sample: the image description
        // is fetched once and reused by the cross stage).
        let fetched = match stage {
            Stage::Text => cache.get_or_fetch(ToolId::WebSearch, &sample.id, || {
                deps.tools.web_search(&sample.text)
            }),
            Stage::Image | Stage::Cross => cache
                .get_or_fetch(ToolId::ImageAnalyze, &sample.id, || {
                    deps.tools.image_analyze(deps.chat.as_ref(), sample)
                }),
        };
        let stage_obs = match fetched {
            Ok((obs, was_fetched)) => {
                if was_fetched {
                    state.ledger.stage_mut(stage).tool_calls += 1;
                    if stage != Stage::Text {
                        // The image description tool rides the chat backend.
                        state.ledger.stage_mut(stage).chat_calls += 1;
                    }
                }
                obs
            }
            Err(e) => return Err(state.fail(sample, Some(stage), e.to_string())),
        };

        let trace = match planned_mode {
            StageMode::Standard => {
                state.ledger.stage_mut(stage).chat_calls += 1;
                state.ledger.stage_mut(stage).candidates_generated += 1;
                let verdict = match stage {
                    Stage::Text => runtime.run_text_agent(sample, &stage_obs, base_params, None),
                    Stage::Image => runtime.run_image_agent(sample, &stage_obs, base_params, None),
                    Stage::Cross => runtime.run_cross_agent(sample, &stage_obs, base_params, None),
                };
                let verdict = match verdict {
                    Ok(v) => v,
                    Err(e) => {
                        state.stage_traces.push(StageTrace {
                            stage,
                            activated: true,
                            mode: StageMode::Standard,
                            candidates: Vec::new(),
                            selected_index: None,
                            stopping_prefix: None,
                            verdict: None,
                            warnings: Vec::new(),
                        });
                        return Err(state.fail(sample, Some(stage), e.to_string()));
                    }
                };
                StageTrace {
                    stage,
                    activated: true,
                    mode: StageMode::Standard,
                    candidates: vec![unscored_candidate(0, verdict.clone())],
                    selected_index: Some(0),
                    stopping_prefix: None,
                    verdict: Some(verdict),
                    warnings: Vec::new(),
                }
            }
            StageMode::Bon => {
                let plan = StageScoringPlan::for_stage(stage);
                let stage_cfg = cfg.stage_bon(stage);
                // A single-candidate budget degenerates to one forward pass
                // with no scoring, so the critique tool is not needed.
                let critique_obs = if plan.use_critique && stage_cfg.n_candidates > 1 {
                    let fetched = match stage {
                        Stage::Text => cache.get_or_fetch(ToolId::LogicCheck, &sample.id, || {
                            deps.tools.logic_check(deps.chat.as_ref(), &sample.id, &sample.text)
                        }),
                        Stage::Image => cache.get_or_fetch(ToolId::ForgeryDetect, &sample.id, || {
                            deps.tools.forgery_detect(&sample.image_ref)
                        }),
                        Stage::Cross => unreachable!("cross stage never critiques"),
                    };
                    match fetched {
                        Ok((obs, was_fetched)) => {
                            if was_fetched {
                                state.ledger.stage_mut(stage).tool_calls += 1;
                                if stage == Stage::Text {
                                    // Logic checking rides the chat backend.
                                    state.ledger.stage_mut(stage).chat_calls += 1;
                                }
                            }
                            Some(obs)
                        }
                        Err(e) => return Err(state.fail(sample, Some(stage), e.to_string())),
                    }
                } else {
                    None
                };

                let source = PipelineSource {
                    runtime,
                    reward: deps.reward.as_ref(),
                    sample,
                    stage,
                    stage_obs: &stage_obs,
                    critique_obs: critique_obs.as_ref(),
                    generation_params: SamplingParams {
                        temperature: cfg.bon.temperature,
                        max_tokens: cfg.max_tokens,
                        seed: None,
                    },
                    critique_params: base_params,
                    sample_seed,
                };
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(sample_seed ^ (stage as u64 + 1)));
                match run_bon_stage(&plan, &stage_cfg, &source, &mut rng) {
                    Ok(result) => {
                        let bucket = state.ledger.stage_mut(stage);
                        bucket.chat_calls +=
                            result.counters.generation_calls + result.counters.critique_calls;
                        bucket.candidates_generated += result.counters.generation_calls;
                        bucket.reward_calls += result.counters.reward_calls;
                        bucket.critique_calls += result.counters.critique_calls;
                        result.trace
                    }
                    Err(failure) => {
                        let bucket = state.ledger.stage_mut(stage);
                        bucket.chat_calls +=
                            failure.counters.generation_calls + failure.counters.critique_calls;
                        bucket.candidates_generated += failure.counters.generation_calls;
                        bucket.reward_calls += failure.counters.reward_calls;
                        bucket.critique_calls += failure.counters.critique_calls;
                        let message = failure.message.clone();
                        state.stage_traces.push(failure.partial);
                        return Err(state.fail(sample, Some(stage), message));
                    }
                }
            }
        };

        let verdict = trace.verdict.clone().expect("activated stage has a verdict");
        state.stage_traces.push(trace);
        if verdict.is_distorted {
            cascade_open = false;
        }
        verdicts.push(verdict);
    }

    let final_label = match assemble_final_label(&verdicts) {
        Ok(label) => label,
        Err(e) => return Err(state.fail(sample, None, e.to_string())),
    };

    Ok(PipelineTrace {
        sample_id: sample.id.clone(),
        plan_level,
        stage_traces: state.stage_traces,
        final_label,
        cost: state.ledger,
        wall_time_ms: deps.clock.elapsed_ms(&started),
        warnings: state.warnings,
        config_echo: None,
    })
}

/// Run a batch of samples with up to `parallelism` concurrent workers.
/// Results come back in input order; samples are fully independent, so the
/// records are identical to a sequential run.
pub fn run_batch(
    samples: &[Sample],
    cfg: &PipelineConfig,
    deps: &Deps,
    parallelism: usize,
) -> Vec<RunRecord> {
    let to_record = |sample: &Sample| match run_pipeline(sample, cfg, deps) {
        Ok(trace) => RunRecord::Trace(trace),
        Err(failure) => RunRecord::Failure(failure.into()),
    };
    if parallelism <= 1 || samples.len() <= 1 {
        return samples.iter().map(to_record).collect();
    }

    let cursor = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<RunRecord>>> =
        samples.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(samples.len()) {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                let Some(sample) = samples.get(i) else { break };
                *slots[i].lock().expect("slot poisoned") = Some(to_record(sample));
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot poisoned").expect("slot filled"))
        .collect()
}
