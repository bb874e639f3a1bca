//! Domain types shared by every pipeline layer, plus the label algebra that
//! turns per-stage binary verdicts into the final 4-way classification.
//!
//! Everything here is immutable after construction and safe to share across
//! worker threads; the operations are pure functions.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::ContractViolation;

/// The four mutually exclusive output classes.
///
/// `Original` marks trustworthy content; the other three attribute the
/// detected distortion to its source: the text, the image, or the pairing
/// of the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Original = 0,
    /// Textual veracity distortion.
    Tvd = 1,
    /// Visual veracity distortion.
    Vvd = 2,
    /// Cross-modal consistency distortion.
    Cmm = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Original, Label::Tvd, Label::Vvd, Label::Cmm];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, ContractViolation> {
        match code {
            0 => Ok(Label::Original),
            1 => Ok(Label::Tvd),
            2 => Ok(Label::Vvd),
            3 => Ok(Label::Cmm),
            other => Err(ContractViolation::new(format!(
                "label code {other} out of range 0..=3"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Original => "original",
            Label::Tvd => "tvd",
            Label::Vvd => "vvd",
            Label::Cmm => "cmm",
        }
    }

    /// Case-insensitive name lookup ("Original", "TVD", ...).
    pub fn parse_name(name: &str) -> Option<Self> {
        match name.trim().to_ascii_lowercase().as_str() {
            "original" => Some(Label::Original),
            "tvd" => Some(Label::Tvd),
            "vvd" => Some(Label::Vvd),
            "cmm" => Some(Label::Cmm),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// Labels travel through trace files as both integer code and name so that
// downstream consumers can pick whichever is convenient.
impl Serialize for Label {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Label", 2)?;
        s.serialize_field("code", &self.code())?;
        s.serialize_field("name", self.name())?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            code: Option<u8>,
            name: Option<String>,
        }
        let repr = Repr::deserialize(deserializer)?;
        let from_code = repr.code.map(Label::from_code).transpose().map_err(|e| {
            D::Error::custom(e.to_string())
        })?;
        let from_name = match &repr.name {
            Some(name) => Some(
                Label::parse_name(name)
                    .ok_or_else(|| D::Error::custom(format!("unknown label name {name:?}")))?,
            ),
            None => None,
        };
        match (from_code, from_name) {
            (Some(a), Some(b)) if a == b => Ok(a),
            (Some(a), Some(b)) => Err(D::Error::custom(format!(
                "label code/name mismatch: {a} vs {b}"
            ))),
            (Some(a), None) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => Err(D::Error::custom("label needs a code or a name")),
        }
    }
}

/// Locator for the image half of a sample, resolved to bytes only at the
/// wire layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ImageRef {
    Path(String),
    Url(String),
    Base64(String),
    /// Explicitly image-less sample. Stages that need the image reject it.
    Absent,
}

impl ImageRef {
    /// Classify a raw dataset string: URLs by scheme, data/base64 payloads by
    /// prefix, anything else as a filesystem path. Empty means absent.
    pub fn infer(raw: &str) -> Self {
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            ImageRef::Absent
        } else if trimmed.starts_with("http://") || trimmed.starts_with("https://") {
            ImageRef::Url(trimmed.to_string())
        } else if let Some(rest) = trimmed.strip_prefix("base64:") {
            ImageRef::Base64(rest.to_string())
        } else if trimmed.starts_with("data:") {
            ImageRef::Base64(trimmed.to_string())
        } else {
            ImageRef::Path(trimmed.to_string())
        }
    }

    pub fn is_absent(&self) -> bool {
        matches!(self, ImageRef::Absent)
    }

    /// Stable string form used as a mock fixture key.
    pub fn key(&self) -> String {
        match self {
            ImageRef::Path(p) => format!("path:{p}"),
            ImageRef::Url(u) => format!("url:{u}"),
            ImageRef::Base64(b) => format!("base64:{b}"),
            ImageRef::Absent => "absent".to_string(),
        }
    }
}

/// One text-image input, optionally carrying a gold label for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub text: String,
    pub image_ref: ImageRef,
    pub gold_label: Option<Label>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        image_ref: ImageRef,
        gold_label: Option<Label>,
    ) -> Result<Self, ContractViolation> {
        let id = id.into();
        let text = text.into();
        if id.trim().is_empty() {
            return Err(ContractViolation::new("sample id must be non-empty"));
        }
        if text.trim().is_empty() {
            return Err(ContractViolation::new("sample text must be non-empty"));
        }
        Ok(Sample { id, text, image_ref, gold_label })
    }
}

/// The three detection stages, in cascade order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Text,
    Image,
    Cross,
}

impl Stage {
    pub const CASCADE: [Stage; 3] = [Stage::Text, Stage::Image, Stage::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Text => "text",
            Stage::Image => "image",
            Stage::Cross => "cross",
        }
    }

    /// Label emitted when this stage is the first to flag a distortion.
    pub fn distortion_label(self) -> Label {
        match self {
            Stage::Text => Label::Tvd,
            Stage::Image => Label::Vvd,
            Stage::Cross => Label::Cmm,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A stage-level binary decision with its natural-language justification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub stage: Stage,
    pub is_distorted: bool,
    pub reasoning: String,
    /// Backend reply preserved verbatim for auditability.
    pub raw_response: String,
}

/// One best-of-N reasoning trial with its scoring trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Generation order.
    pub index: usize,
    pub verdict: Verdict,
    /// Reward-model scalar before normalization; unbounded.
    pub reward_raw: f64,
    /// Reward after per-batch min-max normalization, in [0, 1].
    pub reward_norm: f64,
    /// Critique-agent score in [0, 1]; absent for the cross stage.
    pub critique: Option<f64>,
    /// `reward_norm + critique` when a critique is present, else `reward_norm`.
    pub fused: f64,
}

/// Whether a stage ran one forward pass or a best-of-N exploration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageMode {
    Standard,
    Bon,
}

/// Planner output: allocate the cheap single-pass path or the scaled one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanLevel {
    Level0,
    Level1,
}

/// Full record of one stage's execution (or its skip).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: Stage,
    pub activated: bool,
    pub mode: StageMode,
    /// Candidates in generation order. Empty when the stage was skipped.
    pub candidates: Vec<Candidate>,
    /// Index into `candidates` of the selected one.
    pub selected_index: Option<usize>,
    /// The ranking horizon m* reached by the early-stopping rule.
    pub stopping_prefix: Option<usize>,
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StageTrace {
    pub fn skipped(stage: Stage, mode: StageMode) -> Self {
        StageTrace {
            stage,
            activated: false,
            mode,
            candidates: Vec::new(),
            selected_index: None,
            stopping_prefix: None,
            verdict: None,
            warnings: Vec::new(),
        }
    }
}

/// Per-stage call counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub chat_calls: u64,
    pub tool_calls: u64,
    pub reward_calls: u64,
    pub critique_calls: u64,
    pub candidates_generated: u64,
}

impl StageCost {
    pub fn is_zero(&self) -> bool {
        *self == StageCost::default()
    }

    fn add(&mut self, other: &StageCost) {
        self.chat_calls += other.chat_calls;
        self.tool_calls += other.tool_calls;
        self.reward_calls += other.reward_calls;
        self.critique_calls += other.critique_calls;
        self.candidates_generated += other.candidates_generated;
    }
}

/// Call accounting for one pipeline run, bucketed by consumer.
///
/// The planner gets its own bucket so that the serialized `total` is always
/// the exact sum of the buckets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CostLedger {
    pub planner: StageCost,
    pub text: StageCost,
    pub image: StageCost,
    pub cross: StageCost,
}

impl CostLedger {
    pub fn stage(&self, stage: Stage) -> &StageCost {
        match stage {
            Stage::Text => &self.text,
            Stage::Image => &self.image,
            Stage::Cross => &self.cross,
        }
    }

    pub fn stage_mut(&mut self, stage: Stage) -> &mut StageCost {
        match stage {
            Stage::Text => &mut self.text,
            Stage::Image => &mut self.image,
            Stage::Cross => &mut self.cross,
        }
    }

    pub fn total(&self) -> StageCost {
        let mut total = StageCost::default();
        total.add(&self.planner);
        total.add(&self.text);
        total.add(&self.image);
        total.add(&self.cross);
        total
    }
}

impl Serialize for CostLedger {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("CostLedger", 5)?;
        s.serialize_field("planner", &self.planner)?;
        s.serialize_field("text", &self.text)?;
        s.serialize_field("image", &self.image)?;
        s.serialize_field("cross", &self.cross)?;
        s.serialize_field("total", &self.total())?;
        s.end()
    }
}

impl<'de> Deserialize<'de> for CostLedger {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            planner: StageCost,
            text: StageCost,
            image: StageCost,
            cross: StageCost,
            total: Option<StageCost>,
        }
        let repr = Repr::deserialize(deserializer)?;
        let ledger = CostLedger {
            planner: repr.planner,
            text: repr.text,
            image: repr.image,
            cross: repr.cross,
        };
        if let Some(total) = repr.total {
            if total != ledger.total() {
                return Err(D::Error::custom("cost ledger total does not match bucket sum"));
            }
        }
        Ok(ledger)
    }
}

/// Complete record of one sample's journey through the pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub sample_id: String,
    pub plan_level: PlanLevel,
    /// Always in cascade order: text, image, cross.
    pub stage_traces: Vec<StageTrace>,
    pub final_label: Label,
    pub cost: CostLedger,
    pub wall_time_ms: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Effective configuration echo, attached by front-ends for
    /// reproducibility.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
}

impl PipelineTrace {
    /// Verdicts of activated stages, in cascade order.
    pub fn activated_verdicts(&self) -> Vec<&Verdict> {
        self.stage_traces
            .iter()
            .filter(|t| t.activated)
            .filter_map(|t| t.verdict.as_ref())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Label algebra
// ---------------------------------------------------------------------------

/// δ(y): 1 when the verdict flags a distortion, else 0.
pub fn distortion_indicator(verdict: &Verdict) -> u8 {
    verdict.is_distorted as u8
}

/// Conditional cascade activation flags `(α_text, α_image, α_cross)`.
///
/// The text stage always runs; the image stage runs only when the text
/// verdict is original; the cross stage only when both upstream verdicts
/// are original. A missing upstream verdict gates everything downstream
/// off.
pub fn activation_flags(
    y_text: Option<&Verdict>,
    y_image: Option<&Verdict>,
) -> Result<(u8, u8, u8), ContractViolation> {
    let alpha_text = 1u8;
    let alpha_image = match y_text {
        Some(v) => 1 - distortion_indicator(v),
        None => 0,
    };
    if y_image.is_some() && alpha_image == 0 {
        return Err(ContractViolation::new(
            "image verdict supplied while the image stage is not activated",
        ));
    }
    let alpha_cross = match y_image {
        Some(v) => alpha_image * (1 - distortion_indicator(v)),
        None => 0,
    };
    Ok((alpha_text, alpha_image, alpha_cross))
}

/// Map the ordered verdicts of activated stages to the final 4-way label:
/// the first distorted stage names the class, and a fully clean cascade is
/// `Original`.
pub fn assemble_final_label(stage_verdicts: &[Verdict]) -> Result<Label, ContractViolation> {
    let first = stage_verdicts
        .first()
        .ok_or_else(|| ContractViolation::new("no stage verdicts: the text stage always runs"))?;
    if first.stage != Stage::Text {
        return Err(ContractViolation::new("cascade must start with the text stage"));
    }
    for pair in stage_verdicts.windows(2) {
        if pair[1].stage <= pair[0].stage {
            return Err(ContractViolation::new("stage verdicts out of cascade order"));
        }
        if pair[0].is_distorted {
            return Err(ContractViolation::new(
                "verdicts continue past a distorted stage, violating activation rules",
            ));
        }
    }
    for verdict in stage_verdicts {
        if verdict.is_distorted {
            return Ok(verdict.stage.distortion_label());
        }
    }
    Ok(Label::Original)
}
