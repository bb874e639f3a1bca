//! Prompt assembly and response parsing for the three detection agents, the
//! two critique agents, and the planning agent.
//!
//! Agents ask for a machine-parseable record on top of their task prompt.
//! Parsing is forgiving (a plain-text fallback grammar, code-fence
//! stripping) but bounded: one semantic retry with a format reminder, then
//! a typed error or the documented fallback value.

use serde::Deserialize;

use crate::backends::{ChatBackend, ChatRequest, MessagePart};
use crate::error::AgentError;
use crate::tools::ToolObservation;
use crate::types::{PlanLevel, Sample, Stage, Verdict};

/// The placeholder names a template body may reference.
pub const KNOWN_PLACEHOLDERS: [&str; 4] =
    ["news_caption", "tool_result", "detection_result", "image_description"];

/// Template identifiers, one per agent. These double as the file names
/// (`<id>.txt`) accepted by [`TemplateSet::load_dir`].
pub const TEMPLATE_IDS: [&str; 6] = [
    "text_detect",
    "image_detect",
    "cross_detect",
    "planner",
    "text_critique",
    "image_critique",
];

/// Structured-output instruction appended to every detection prompt.
const VERDICT_FORMAT: &str = "Respond with a single JSON object on one line, in the exact form:\n\
{\"verdict\": \"distorted\" or \"original\", \"reasoning\": \"<one or two sentences>\"}";

const VERDICT_REMINDER: &str = "Reminder: output ONLY the single JSON object \
{\"verdict\": ..., \"reasoning\": ...} with verdict either \"distorted\" or \"original\", \
and nothing else.";

const SCORE_REMINDER: &str =
    "Reminder: output ONLY a single number between 0 and 1, and nothing else.";

const PLAN_REMINDER: &str =
    "Reminder: return ONLY the action in the exact form: [BON level-0] or [BON level-1]";

const DEFAULT_TEXT_DETECT: &str = "\
You are a textual veracity detection agent for news content. Your task is to judge whether \
the news caption makes claims that contradict credible objective evidence or established facts.

News caption is: {news_caption}

Result from the web evidence retrieval tool:

{tool_result}

Judge ONLY the truthfulness of the textual claim itself; ignore any accompanying image. \
Classify the caption as \"distorted\" if it contradicts the evidence or asserts something \
false, or \"original\" if it is consistent with the available evidence.";

const DEFAULT_IMAGE_DETECT: &str = "\
You are a visual veracity detection agent for news content. Your task is to judge whether the \
given news image is forged, digitally manipulated, AI-generated, or violates common-sense \
constraints such as impossible scenes or physical inconsistencies.

Result from the image analysis tool:

{tool_result}

Judge ONLY the authenticity of the image itself; ignore the caption. Classify the image as \
\"distorted\" if it appears manipulated, synthetic, or implausible, or \"original\" if it \
appears authentic.";

const DEFAULT_CROSS_DETECT: &str = "\
You are a cross-modal consistency detection agent for news content. Your task is to judge \
whether the news caption and the news image are semantically aligned: whether they refer to \
the same entities, events, time, and place. Do NOT verify the factual correctness of either \
modality on its own; judge only whether the pairing is consistent.

News caption is: {news_caption}

Grounded description of the image from the image analysis tool:

{image_description}

Classify the pairing as \"distorted\" if the caption and the image mismatch or together form \
a misleading narrative, or \"original\" if they are consistent.";

const DEFAULT_PLANNER: &str = "\
Given a multi-modal misinformation sample, it contains both a news caption and a news image.

News caption is: {news_caption}

Your task is to decide whether this sample should be handled with standard reasoning or \
escalated to a stronger reasoning level using Best-of-N (BON) in later stages. Best-of-N \
(BON) refers to sampling multiple independent detection responses with the same prompt and \
selecting the most reliable one.

Analyze the given news caption and image from the following aspects:

- Whether the relationship between the caption and the image is clearly consistent, clearly \
inconsistent, or ambiguous.

- Whether the caption makes claims that require explicit and concrete visual evidence.

- Whether the image content alone is sufficient to verify those claims.

Based on the analysis, choose ONE action from the following options:

1. [BON level-0]: No Best-of-N scaling is needed.

2. [BON level-1]: Use Best-of-N scaling.

Return ONLY the action in the exact form: [BON level-n]";

const DEFAULT_TEXT_CRITIQUE: &str = "\
Given a news caption, news caption is:

{news_caption}

Your task is to assign a single score between 0 and 1 indicating how convincing the \
DETECTION RESULT is, based ONLY on its own reasoning.

Detection Result:

{detection_result}

Result from logical consistency checking tool:

{tool_result}

Score the detection result from 0 to 1:

- 1.0: fully convincing, logically sound, no over-inference.

- 0.5: partially convincing, some logical gaps or weak support.

- 0.0: unconvincing, logical contradiction or strong over-inference.

Output ONLY the score as a number between 0 and 1.";

const DEFAULT_IMAGE_CRITIQUE: &str = "\
According to the given news image, your task is to assign a single score between 0 and 1 \
indicating how convincing the DETECTION RESULT is, based ONLY on its own reasoning.

Detection Result:

{detection_result}

Result from image forgery detection tool:

{tool_result}

Score the detection result from 0 to 1:

- 1.0: The detection result is strongly supported by the image forensic result, with no \
apparent logical gaps or over-interpretation.

- 0.5: The detection result is partially supported by the image forensic result, but \
contains uncertainty, weak evidence, or mild over-interpretation.

- 0.0: The detection result is not supported by the image forensic result, or shows clear \
logical inconsistency or strong over-interpretation.

Output ONLY the score as a number between 0 and 1.";

fn default_body(id: &str) -> &'static str {
    match id {
        "text_detect" => DEFAULT_TEXT_DETECT,
        "image_detect" => DEFAULT_IMAGE_DETECT,
        "cross_detect" => DEFAULT_CROSS_DETECT,
        "planner" => DEFAULT_PLANNER,
        "text_critique" => DEFAULT_TEXT_CRITIQUE,
        "image_critique" => DEFAULT_IMAGE_CRITIQUE,
        other => panic!("unknown template id {other}"),
    }
}

/// Placeholders that must be bound when rendering each template. Fixed by
/// the engine; file overrides change the body, not the contract.
pub fn required_placeholders(id: &str) -> &'static [&'static str] {
    match id {
        "text_detect" => &["news_caption", "tool_result"],
        "image_detect" => &["tool_result"],
        "cross_detect" => &["news_caption", "image_description"],
        "planner" => &["news_caption"],
        "text_critique" => &["news_caption", "detection_result", "tool_result"],
        "image_critique" => &["detection_result", "tool_result"],
        other => panic!("unknown template id {other}"),
    }
}

/// A prompt template with named `{placeholder}` slots.
#[derive(Debug, Clone)]
pub struct PromptTemplate {
    pub id: String,
    pub body: String,
}

impl PromptTemplate {
    /// Substitute bindings into the body. Fails if a required placeholder is
    /// unbound or if any known placeholder marker survives substitution.
    pub fn render(&self, bindings: &[(&str, &str)]) -> Result<String, AgentError> {
        for required in required_placeholders(&self.id) {
            if !bindings.iter().any(|(name, _)| name == required) {
                return Err(AgentError::Template {
                    template_id: self.id.clone(),
                    message: format!("required placeholder {{{required}}} is unbound"),
                });
            }
        }
        let mut rendered = self.body.clone();
        for (name, value) in bindings {
            rendered = rendered.replace(&format!("{{{name}}}"), value);
        }
        for name in KNOWN_PLACEHOLDERS {
            let marker = format!("{{{name}}}");
            if rendered.contains(&marker) {
                return Err(AgentError::Template {
                    template_id: self.id.clone(),
                    message: format!("residual placeholder marker {marker} after rendering"),
                });
            }
        }
        Ok(rendered)
    }
}

/// The six agent templates, defaults embedded and overridable per-file.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::defaults()
    }
}

impl TemplateSet {
    pub fn defaults() -> Self {
        TemplateSet {
            templates: TEMPLATE_IDS
                .iter()
                .map(|id| PromptTemplate { id: id.to_string(), body: default_body(id).to_string() })
                .collect(),
        }
    }

    /// Defaults with any `<id>.txt` file under `dir` overriding that
    /// template's body. Unrecognized `.txt` files are rejected.
    pub fn load_dir(dir: &std::path::Path) -> Result<Self, AgentError> {
        let mut set = Self::defaults();
        let entries = std::fs::read_dir(dir).map_err(|e| AgentError::Template {
            template_id: "<dir>".to_string(),
            message: format!("cannot read template dir {}: {e}", dir.display()),
        })?;
        for entry in entries {
            let path = entry
                .map_err(|e| AgentError::Template {
                    template_id: "<dir>".to_string(),
                    message: e.to_string(),
                })?
                .path();
            if path.extension().is_none_or(|ext| ext != "txt") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if !TEMPLATE_IDS.contains(&stem.as_str()) {
                return Err(AgentError::Template {
                    template_id: stem,
                    message: format!("{} does not name a known template", path.display()),
                });
            }
            let body = std::fs::read_to_string(&path).map_err(|e| AgentError::Template {
                template_id: stem.clone(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            set.templates
                .iter_mut()
                .find(|t| t.id == stem)
                .expect("all ids present in defaults")
                .body = body;
        }
        Ok(set)
    }

    pub fn get(&self, id: &str) -> &PromptTemplate {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .unwrap_or_else(|| panic!("unknown template id {id}"))
    }
}

// ---------------------------------------------------------------------------
// Response parsing
// ---------------------------------------------------------------------------

/// A response that matched neither the structured record nor the plain-text
/// fallback grammar.
#[derive(Debug, Clone)]
pub struct ParseError {
    pub message: String,
}

#[derive(Deserialize)]
struct VerdictRecord {
    verdict: String,
    reasoning: String,
}

fn strip_code_fence(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(rest) = trimmed.strip_prefix("```") else { return trimmed };
    let Some(rest) = rest.strip_suffix("```") else { return trimmed };
    // Drop an optional language tag on the opening fence.
    match rest.find('\n') {
        Some(pos) => rest[pos + 1..].trim(),
        None => rest.trim(),
    }
}

fn parse_verdict_word(word: &str) -> Option<bool> {
    let cleaned = word
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '.' | ',' | ';' | '!' | '*'))
        .to_ascii_lowercase();
    match cleaned.as_str() {
        "distorted" => Some(true),
        "original" => Some(false),
        _ => None,
    }
}

/// Parse an agent reply into a [`Verdict`].
///
/// Two grammars are accepted: a one-record JSON object with `verdict` and
/// `reasoning` fields, and a plain-text fallback of `VERDICT: ...` /
/// `REASONING: ...` lines. The raw response is preserved verbatim.
pub fn parse_verdict(raw: &str, stage: Stage) -> Result<Verdict, ParseError> {
    let body = strip_code_fence(raw);
    if body.is_empty() {
        return Err(ParseError { message: "empty response".to_string() });
    }

    // Structured record, possibly embedded in surrounding prose.
    let json_slice = match serde_json::from_str::<VerdictRecord>(body) {
        Ok(record) => Some(record),
        Err(_) => body
            .find('{')
            .zip(body.rfind('}'))
            .filter(|(start, end)| start < end)
            .and_then(|(start, end)| serde_json::from_str::<VerdictRecord>(&body[start..=end]).ok()),
    };
    if let Some(record) = json_slice {
        let is_distorted = parse_verdict_word(&record.verdict).ok_or_else(|| ParseError {
            message: format!("verdict field {:?} is neither distorted nor original", record.verdict),
        })?;
        let reasoning = record.reasoning.trim().to_string();
        if reasoning.is_empty() {
            return Err(ParseError { message: "empty reasoning field".to_string() });
        }
        return Ok(Verdict { stage, is_distorted, reasoning, raw_response: raw.to_string() });
    }

    // Fallback grammar: VERDICT / REASONING lines.
    let mut is_distorted = None;
    let mut reasoning_parts: Vec<&str> = Vec::new();
    let mut in_reasoning = false;
    for line in body.lines() {
        let lowered = line.trim_start().to_ascii_lowercase();
        if lowered.starts_with("verdict:") {
            let value = &line.trim_start()["verdict:".len()..];
            is_distorted = parse_verdict_word(value);
            in_reasoning = false;
        } else if lowered.starts_with("reasoning:") {
            reasoning_parts.push(line.trim_start()["reasoning:".len()..].trim());
            in_reasoning = true;
        } else if in_reasoning {
            reasoning_parts.push(line.trim());
        }
    }
    let reasoning = reasoning_parts.join("\n").trim().to_string();
    match (is_distorted, reasoning.is_empty()) {
        (Some(is_distorted), false) => {
            Ok(Verdict { stage, is_distorted, reasoning, raw_response: raw.to_string() })
        }
        _ => Err(ParseError { message: format!("no grammar matched response {raw:?}") }),
    }
}

/// Extract the `[BON level-n]` action tag, case-insensitively and tolerating
/// stray whitespace. Only levels 0 and 1 are defined.
pub fn parse_plan_level(raw: &str) -> Option<PlanLevel> {
    let mut rest = raw;
    while let Some(open) = rest.find('[') {
        let tail = &rest[open + 1..];
        let Some(close) = tail.find(']') else { break };
        let inner = tail[..close].to_ascii_lowercase();
        let tokens: Vec<&str> = inner.split_whitespace().collect();
        match tokens.as_slice() {
            ["bon", "level-0"] => return Some(PlanLevel::Level0),
            ["bon", "level-1"] => return Some(PlanLevel::Level1),
            _ => {}
        }
        rest = &tail[close + 1..];
    }
    None
}

/// Extract the first real number in the response.
pub fn parse_score(raw: &str) -> Option<f64> {
    let bytes = strip_code_fence(raw).as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit()
            || (bytes[i] == b'-' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
            || (bytes[i] == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit))
        {
            let start = i;
            if bytes[i] == b'-' {
                i += 1;
            }
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            let token = std::str::from_utf8(&bytes[start..i]).ok()?;
            return token.parse().ok();
        }
        i += 1;
    }
    None
}

// ---------------------------------------------------------------------------
// Agent runners
// ---------------------------------------------------------------------------

/// Sampling knobs for one chat call.
#[derive(Debug, Clone, Copy)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

/// Shared handles for running agents.
#[derive(Clone, Copy)]
pub struct AgentRuntime<'a> {
    pub chat: &'a dyn ChatBackend,
    pub templates: &'a TemplateSet,
}

/// Planner output.
#[derive(Debug, Clone)]
pub struct PlanDecision {
    pub level: PlanLevel,
    pub raw_response: String,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub decision: PlanDecision,
    pub warning: Option<String>,
}

/// Critique score with an optional fallback warning.
#[derive(Debug, Clone)]
pub struct CritiqueOutcome {
    pub score: f64,
    pub warning: Option<String>,
}

impl<'a> AgentRuntime<'a> {
    fn detect(
        &self,
        role_tag: &str,
        template_id: &str,
        stage: Stage,
        sample: &Sample,
        bindings: &[(&str, &str)],
        attach_image: bool,
        params: SamplingParams,
        candidate_index: Option<usize>,
    ) -> Result<Verdict, AgentError> {
        let task = self.templates.get(template_id).render(bindings)?;
        let mut last_raw = String::new();
        for attempt in 0..2 {
            let suffix = if attempt == 0 { VERDICT_FORMAT } else { VERDICT_REMINDER };
            let mut messages =
                vec![MessagePart::Text { text: format!("{task}\n\n{suffix}") }];
            if attach_image {
                messages.push(MessagePart::Image { image: sample.image_ref.clone() });
            }
            let request = ChatRequest {
                role_tag: role_tag.to_string(),
                sample_id: sample.id.clone(),
                messages,
                temperature: params.temperature,
                seed: params.seed,
                max_tokens: params.max_tokens,
                candidate_index,
            };
            let response = self.chat.chat(&request)?;
            match parse_verdict(&response.text, stage) {
                Ok(verdict) => return Ok(verdict),
                Err(_) => last_raw = response.text,
            }
        }
        Err(AgentError::Parse { role: role_tag.to_string(), raw: last_raw })
    }

    /// Textual veracity detection over the claim plus retrieved evidence.
    pub fn run_text_agent(
        &self,
        sample: &Sample,
        evidence: &ToolObservation,
        params: SamplingParams,
        candidate_index: Option<usize>,
    ) -> Result<Verdict, AgentError> {
        self.detect(
            "text-detect",
            "text_detect",
            Stage::Text,
            sample,
            &[("news_caption", sample.text.as_str()), ("tool_result", &evidence.prompt_text())],
            false,
            params,
            candidate_index,
        )
    }

    /// Visual veracity detection over the image plus its tool description.
    pub fn run_image_agent(
        &self,
        sample: &Sample,
        image_description: &ToolObservation,
        params: SamplingParams,
        candidate_index: Option<usize>,
    ) -> Result<Verdict, AgentError> {
        self.detect(
            "image-detect",
            "image_detect",
            Stage::Image,
            sample,
            &[("tool_result", &image_description.prompt_text())],
            true,
            params,
            candidate_index,
        )
    }

    /// Cross-modal alignment detection. The prompt has no slot for web
    /// evidence: the cross agent judges pairing, not truthfulness.
    pub fn run_cross_agent(
        &self,
        sample: &Sample,
        image_description: &ToolObservation,
        params: SamplingParams,
        candidate_index: Option<usize>,
    ) -> Result<Verdict, AgentError> {
        self.detect(
            "cross-detect",
            "cross_detect",
            Stage::Cross,
            sample,
            &[
                ("news_caption", sample.text.as_str()),
                ("image_description", &image_description.prompt_text()),
            ],
            true,
            params,
            candidate_index,
        )
    }

    /// Difficulty triage. Unparseable replies fall back to the cheap path
    /// (`Level0`) with a warning rather than failing the run.
    pub fn run_planner(
        &self,
        sample: &Sample,
        params: SamplingParams,
    ) -> Result<PlanOutcome, AgentError> {
        let task = self
            .templates
            .get("planner")
            .render(&[("news_caption", sample.text.as_str())])?;
        let mut last_raw = String::new();
        for attempt in 0..2 {
            let text =
                if attempt == 0 { task.clone() } else { format!("{task}\n\n{PLAN_REMINDER}") };
            let request = ChatRequest {
                role_tag: "planner".to_string(),
                sample_id: sample.id.clone(),
                messages: vec![
                    MessagePart::Text { text },
                    MessagePart::Image { image: sample.image_ref.clone() },
                ],
                temperature: params.temperature,
                seed: params.seed,
                max_tokens: params.max_tokens,
                candidate_index: None,
            };
            let response = self.chat.chat(&request)?;
            if let Some(level) = parse_plan_level(&response.text) {
                return Ok(PlanOutcome {
                    decision: PlanDecision { level, raw_response: response.text },
                    warning: None,
                });
            }
            last_raw = response.text;
        }
        Ok(PlanOutcome {
            decision: PlanDecision { level: PlanLevel::Level0, raw_response: last_raw.clone() },
            warning: Some(format!(
                "planner response unparseable after retry; defaulting to level0 (raw: {last_raw:?})"
            )),
        })
    }

    fn critique(
        &self,
        role_tag: &str,
        template_id: &str,
        bindings: &[(&str, &str)],
        sample: &Sample,
        attach_image: bool,
        params: SamplingParams,
        candidate_index: usize,
    ) -> Result<CritiqueOutcome, AgentError> {
        let task = self.templates.get(template_id).render(bindings)?;
        let mut last_raw = String::new();
        for attempt in 0..2 {
            let text =
                if attempt == 0 { task.clone() } else { format!("{task}\n\n{SCORE_REMINDER}") };
            let mut messages = vec![MessagePart::Text { text }];
            if attach_image {
                messages.push(MessagePart::Image { image: sample.image_ref.clone() });
            }
            let request = ChatRequest {
                role_tag: role_tag.to_string(),
                sample_id: sample.id.clone(),
                messages,
                temperature: params.temperature,
                seed: params.seed,
                max_tokens: params.max_tokens,
                candidate_index: Some(candidate_index),
            };
            let response = self.chat.chat(&request)?;
            if let Some(score) = parse_score(&response.text) {
                return Ok(CritiqueOutcome { score: score.clamp(0.0, 1.0), warning: None });
            }
            last_raw = response.text;
        }
        // Neutral midpoint: a broken critique neither promotes nor demotes.
        Ok(CritiqueOutcome {
            score: 0.5,
            warning: Some(format!(
                "{role_tag} response unparseable after retry; using neutral 0.5 (raw: {last_raw:?})"
            )),
        })
    }

    /// Score how convincing a text-stage verdict is, grounded in the logic
    /// checking tool's observation. Clamped to [0, 1].
    pub fn run_text_critique(
        &self,
        sample: &Sample,
        verdict: &Verdict,
        logic_obs: &ToolObservation,
        params: SamplingParams,
        candidate_index: usize,
    ) -> Result<CritiqueOutcome, AgentError> {
        debug_assert_eq!(verdict.stage, Stage::Text);
        self.critique(
            "text-critique",
            "text_critique",
            &[
                ("news_caption", sample.text.as_str()),
                ("detection_result", &detection_record(verdict)),
                ("tool_result", &logic_obs.prompt_text()),
            ],
            sample,
            false,
            params,
            candidate_index,
        )
    }

    /// Score how convincing an image-stage verdict is, grounded in the
    /// forgery detector's observation. Clamped to [0, 1].
    pub fn run_image_critique(
        &self,
        sample: &Sample,
        verdict: &Verdict,
        forgery_obs: &ToolObservation,
        params: SamplingParams,
        candidate_index: usize,
    ) -> Result<CritiqueOutcome, AgentError> {
        debug_assert_eq!(verdict.stage, Stage::Image);
        self.critique(
            "image-critique",
            "image_critique",
            &[
                ("detection_result", &detection_record(verdict)),
                ("tool_result", &forgery_obs.prompt_text()),
            ],
            sample,
            true,
            params,
            candidate_index,
        )
    }
}

/// Canonical JSON record form of a verdict; `parse_verdict` inverts it.
pub fn verdict_record_json(verdict: &Verdict) -> String {
    serde_json::json!({
        "verdict": if verdict.is_distorted { "distorted" } else { "original" },
        "reasoning": verdict.reasoning,
    })
    .to_string()
}

/// Plain-text form used when a verdict is quoted inside another prompt or a
/// reward request.
pub fn detection_record(verdict: &Verdict) -> String {
    format!(
        "VERDICT: {}\nREASONING: {}",
        if verdict.is_distorted { "distorted" } else { "original" },
        verdict.reasoning
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{FixtureSet, MockChat};
    use crate::tools::{ToolId, ToolObservation, ToolStatus};
    use crate::types::ImageRef;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn sample() -> Sample {
        Sample::new("s1", "some claim", ImageRef::Path("img.jpg".into()), None).unwrap()
    }

    fn obs(content: &str) -> ToolObservation {
        ToolObservation {
            tool_id: ToolId::WebSearch,
            content: content.to_string(),
            status: ToolStatus::Ok,
            latency_ms: 0,
        }
    }

    fn params() -> SamplingParams {
        SamplingParams { temperature: 0.0, max_tokens: 256, seed: Some(1) }
    }

    fn runtime_with(fx: FixtureSet) -> (Arc<FixtureSet>, MockChat, TemplateSet) {
        let fx = Arc::new(fx);
        (fx.clone(), MockChat::new(fx), TemplateSet::defaults())
    }

    #[test]
    fn render_fills_placeholders() {
        let templates = TemplateSet::defaults();
        let rendered = templates
            .get("text_detect")
            .render(&[("news_caption", "the claim"), ("tool_result", "the evidence")])
            .unwrap();
        assert!(rendered.contains("the claim"));
        assert!(rendered.contains("the evidence"));
        for marker in KNOWN_PLACEHOLDERS {
            assert!(!rendered.contains(&format!("{{{marker}}}")));
        }
    }

    #[test]
    fn render_rejects_unbound_required_placeholder() {
        let templates = TemplateSet::defaults();
        let err = templates.get("text_detect").render(&[("news_caption", "x")]).unwrap_err();
        assert!(err.to_string().contains("tool_result"), "{err}");
    }

    #[test]
    fn template_dir_overrides_and_rejects_unknown_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("planner.txt"), "custom {news_caption}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.get("planner").body, "custom {news_caption}");
        // Untouched templates keep their defaults.
        assert_eq!(set.get("text_detect").body, DEFAULT_TEXT_DETECT);

        std::fs::write(dir.path().join("tpyo_detect.txt"), "oops").unwrap();
        assert!(TemplateSet::load_dir(dir.path()).is_err());
    }

    #[test]
    fn parse_verdict_structured_record() {
        let v = parse_verdict(
            r#"{"verdict":"distorted","reasoning":"claim contradicts retrieved evidence"}"#,
            Stage::Text,
        )
        .unwrap();
        assert!(v.is_distorted);
        assert_eq!(v.reasoning, "claim contradicts retrieved evidence");
        assert_eq!(v.stage, Stage::Text);

        let v = parse_verdict(r#"{"verdict":"original","reasoning":"checks out"}"#, Stage::Image)
            .unwrap();
        assert!(!v.is_distorted);
    }

    #[test]
    fn parse_verdict_fallback_grammar() {
        let v = parse_verdict("VERDICT: original\nREASONING: consistent with evidence", Stage::Cross)
            .unwrap();
        assert!(!v.is_distorted);
        assert_eq!(v.reasoning, "consistent with evidence");
    }

    #[test]
    fn parse_verdict_tolerates_fences_and_prose() {
        let fenced = "```json\n{\"verdict\": \"distorted\", \"reasoning\": \"x\"}\n```";
        assert!(parse_verdict(fenced, Stage::Text).unwrap().is_distorted);
        let embedded = "Sure, here is my answer:\n{\"verdict\": \"original\", \"reasoning\": \"y\"}";
        assert!(!parse_verdict(embedded, Stage::Text).unwrap().is_distorted);
    }

    #[test]
    fn parse_verdict_rejects_junk() {
        assert!(parse_verdict("", Stage::Text).is_err());
        assert!(parse_verdict("maybe?", Stage::Text).is_err());
        assert!(parse_verdict(r#"{"verdict":"sure","reasoning":"x"}"#, Stage::Text).is_err());
        assert!(parse_verdict(r#"{"verdict":"original","reasoning":"  "}"#, Stage::Text).is_err());
    }

    #[test]
    fn plan_level_parsing() {
        assert_eq!(parse_plan_level("[BON level-1]"), Some(PlanLevel::Level1));
        assert_eq!(parse_plan_level(" [bon LEVEL-0] "), Some(PlanLevel::Level0));
        assert_eq!(parse_plan_level("Action: [Bon level-1]."), Some(PlanLevel::Level1));
        assert_eq!(parse_plan_level("I recommend escalation"), None);
        assert_eq!(parse_plan_level("[BON level-2]"), None);
        assert_eq!(parse_plan_level("[bon]"), None);
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("0.5"), Some(0.5));
        assert_eq!(parse_score("Score: 0.8 because..."), Some(0.8));
        assert_eq!(parse_score("1.2"), Some(1.2));
        assert_eq!(parse_score("-0.3"), Some(-0.3));
        assert_eq!(parse_score(".75"), Some(0.75));
        assert_eq!(parse_score("no idea"), None);
    }

    #[test]
    fn text_agent_parses_mock_verdict() {
        let mut fx = FixtureSet::new();
        fx.add_chat(
            "text-detect",
            "s1",
            0,
            r#"{"verdict":"distorted","reasoning":"claim contradicts retrieved evidence"}"#,
        );
        let (_fx, chat, templates) = runtime_with(fx);
        let rt = AgentRuntime { chat: &chat, templates: &templates };
        let verdict = rt.run_text_agent(&sample(), &obs("evidence"), params(), Some(0)).unwrap();
        assert!(verdict.is_distorted);
        assert_eq!(verdict.stage, Stage::Text);
        assert!(verdict.raw_response.contains("contradicts"));
    }

    #[test]
    fn text_agent_retries_once_then_errors() {
        let mut fx = FixtureSet::new();
        fx.add_chat("text-detect", "s1", 0, "maybe?");
        let (_fx, chat, templates) = runtime_with(fx);
        let rt = AgentRuntime { chat: &chat, templates: &templates };
        let err = rt.run_text_agent(&sample(), &obs("evidence"), params(), Some(0)).unwrap_err();
        match err {
            AgentError::Parse { role, raw } => {
                assert_eq!(role, "text-detect");
                assert_eq!(raw, "maybe?");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn planner_parses_and_falls_back() {
        let mut fx = FixtureSet::new();
        fx.add_chat("planner", "s1", 0, "[BON level-1]");
        let (_fx, chat, templates) = runtime_with(fx);
        let rt = AgentRuntime { chat: &chat, templates: &templates };
        let outcome = rt.run_planner(&sample(), params()).unwrap();
        assert_eq!(outcome.decision.level, PlanLevel::Level1);
        assert!(outcome.warning.is_none());

        let mut fx = FixtureSet::new();
        fx.add_chat("planner", "s1", 0, "I recommend escalation");
        let (_fx, chat, templates) = runtime_with(fx);
        let rt = AgentRuntime { chat: &chat, templates: &templates };
        let outcome = rt.run_planner(&sample(), params()).unwrap();
        assert_eq!(outcome.decision.level, PlanLevel::Level0);
        assert!(outcome.warning.is_some());
    }

    #[test]
    fn critique_parses_clamps_and_falls_back() {
        let verdict = Verdict {
            stage: Stage::Text,
            is_distorted: true,
            reasoning: "r".into(),
            raw_response: "raw".into(),
        };
        let run = |response: &str| {
            let mut fx = FixtureSet::new();
            fx.add_chat("text-critique", "s1", 3, response);
            let (_fx, chat, templates) = runtime_with(fx);
            let rt = AgentRuntime { chat: &chat, templates: &templates };
            rt.run_text_critique(&sample(), &verdict, &obs("logic ok"), params(), 3).unwrap()
        };
        assert_eq!(run("0.5").score, 0.5);
        let clamped = run("1.2");
        assert_eq!(clamped.score, 1.0);
        assert!(clamped.warning.is_none());
        let fallback = run("no idea");
        assert_eq!(fallback.score, 0.5);
        assert!(fallback.warning.is_some());
    }

    #[test]
    fn cross_prompt_never_contains_web_content() {
        // Structural exclusion: the cross template has no {tool_result} slot,
        // so web evidence cannot leak into the rendered prompt.
        let templates = TemplateSet::defaults();
        let rendered = templates
            .get("cross_detect")
            .render(&[("news_caption", "claim"), ("image_description", "a cat on a mat")])
            .unwrap();
        let web_evidence = "WEB-EVIDENCE-SENTINEL";
        assert!(!rendered.contains(web_evidence));
        assert!(!templates.get("cross_detect").body.contains("{tool_result}"));
    }

    proptest! {
        // parse_verdict inverts the canonical JSON record on (is_distorted,
        // reasoning) for any non-blank reasoning.
        #[test]
        fn verdict_json_round_trip(is_distorted in any::<bool>(), reasoning in "\\PC{1,80}") {
            prop_assume!(!reasoning.trim().is_empty());
            let original = Verdict {
                stage: Stage::Image,
                is_distorted,
                reasoning: reasoning.trim().to_string(),
                raw_response: String::new(),
            };
            let parsed = parse_verdict(&verdict_record_json(&original), Stage::Image).unwrap();
            prop_assert_eq!(parsed.is_distorted, original.is_distorted);
            prop_assert_eq!(parsed.reasoning, original.reasoning);
        }

        // Critique scores stay in [0,1] for any backend output.
        #[test]
        fn critique_scores_always_in_unit_interval(response in "\\PC{0,40}") {
            let mut fx = FixtureSet::new();
            fx.add_chat("text-critique", "s1", 0, &response);
            let fx = Arc::new(fx);
            let chat = MockChat::new(fx);
            let templates = TemplateSet::defaults();
            let rt = AgentRuntime { chat: &chat, templates: &templates };
            let verdict = Verdict {
                stage: Stage::Text,
                is_distorted: false,
                reasoning: "r".into(),
                raw_response: String::new(),
            };
            let outcome = rt
                .run_text_critique(
                    &Sample::new("s1", "claim", ImageRef::Absent, None).unwrap(),
                    &verdict,
                    &ToolObservation {
                        tool_id: ToolId::LogicCheck,
                        content: "c".into(),
                        status: ToolStatus::Ok,
                        latency_ms: 0,
                    },
                    SamplingParams { temperature: 0.0, max_tokens: 16, seed: None },
                    0,
                )
                .unwrap();
            prop_assert!((0.0..=1.0).contains(&outcome.score));
        }
    }

    #[test]
    fn detection_record_text_parses_back() {
        let verdict = Verdict {
            stage: Stage::Text,
            is_distorted: true,
            reasoning: "two lines\nof reasoning".into(),
            raw_response: String::new(),
        };
        let parsed = parse_verdict(&detection_record(&verdict), Stage::Text).unwrap();
        assert!(parsed.is_distorted);
        assert_eq!(parsed.reasoning, "two lines\nof reasoning");
    }
}
