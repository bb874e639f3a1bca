//! The four auxiliary evidence tools: web search, logic checking, forgery
//! detection, and image analysis.
//!
//! Tool outages never abort a pipeline run. They degrade into
//! `ToolStatus::Unavailable` observations whose content carries the
//! diagnostic, and the agents render those into prompts as-is. Only broken
//! inputs (empty query, unresolvable image) are hard errors.

use std::collections::HashMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::{ChatBackend, ChatRequest, MessagePart};
use crate::error::ToolError;
use crate::types::{ImageRef, Sample};

/// Character budget for tool content injected into prompts.
pub const DEFAULT_TOOL_CHAR_CAP: usize = 2_000;

const TRUNCATION_MARKER: &str = " …[truncated]";

/// Fixed prompt for the chat-backed logic consistency checker.
const LOGIC_CHECK_PROMPT: &str = "You are a logic consistency checking tool. Analyze whether the \
following claim exhibits logical contradictions, internal inconsistencies, or implausible \
reasoning. Point out each issue you find, or state that the claim is logically coherent.\n\nClaim: ";

/// Fixed prompt for the chat-backed image description tool.
const IMAGE_ANALYZE_PROMPT: &str = "You are an image analysis tool. Provide a grounded, factual \
description of the visual content of the given image: the entities present, their attributes, \
the setting, and any visible text. Describe only what is visible; do not speculate.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolId {
    WebSearch,
    LogicCheck,
    ForgeryDetect,
    ImageAnalyze,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    Unavailable,
}

/// Result of one tool invocation. When `status` is `Unavailable`, `content`
/// holds the diagnostic instead of a summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolObservation {
    pub tool_id: ToolId,
    pub content: String,
    pub status: ToolStatus,
    pub latency_ms: u64,
}

impl ToolObservation {
    fn ok(tool_id: ToolId, content: String, latency_ms: u64) -> Self {
        ToolObservation { tool_id, content, status: ToolStatus::Ok, latency_ms }
    }

    fn unavailable(tool_id: ToolId, diagnostic: String) -> Self {
        ToolObservation { tool_id, content: diagnostic, status: ToolStatus::Unavailable, latency_ms: 0 }
    }

    /// Render for prompt injection: unavailable observations become a fixed
    /// marker so the prompt shape stays stable.
    pub fn prompt_text(&self) -> String {
        match self.status {
            ToolStatus::Ok => self.content.clone(),
            ToolStatus::Unavailable => format!("unavailable ({})", self.content),
        }
    }
}

/// Why a provider call produced no usable content.
#[derive(Debug, Clone)]
pub enum ToolProviderError {
    /// Caller-side problem; propagates as a hard error.
    Input(ToolError),
    /// Service-side problem; degrades to an unavailable observation.
    Outage(String),
}

impl From<ToolError> for ToolProviderError {
    fn from(e: ToolError) -> Self {
        ToolProviderError::Input(e)
    }
}

/// Retrieval service mapping a query to concatenated article extracts.
pub trait WebSearchProvider: Send + Sync {
    fn search(&self, query: &str) -> Result<String, ToolProviderError>;
}

/// External forgery detection service returning a manipulation score in
/// [0, 1].
pub trait ForgeryDetector: Send + Sync {
    fn detect(&self, image: &ImageRef) -> Result<f64, ToolProviderError>;
}

/// The tools bundle handed to a pipeline run.
pub struct Tools {
    pub web: Box<dyn WebSearchProvider>,
    pub forgery: Box<dyn ForgeryDetector>,
    pub char_cap: usize,
}

impl Tools {
    pub fn new(web: Box<dyn WebSearchProvider>, forgery: Box<dyn ForgeryDetector>) -> Self {
        Tools { web, forgery, char_cap: DEFAULT_TOOL_CHAR_CAP }
    }

    pub fn with_char_cap(mut self, cap: usize) -> Self {
        self.char_cap = cap;
        self
    }

    /// Encyclopedic evidence for a textual claim.
    pub fn web_search(&self, query: &str) -> Result<ToolObservation, ToolError> {
        if query.trim().is_empty() {
            return Err(ToolError::EmptyInput("web search query".into()));
        }
        match self.web.search(query) {
            Ok(content) => Ok(ToolObservation::ok(
                ToolId::WebSearch,
                truncate_chars(&content, self.char_cap),
                0,
            )),
            Err(ToolProviderError::Input(e)) => Err(e),
            Err(ToolProviderError::Outage(diag)) => {
                Ok(ToolObservation::unavailable(ToolId::WebSearch, diag))
            }
        }
    }

    /// Logic consistency analysis of a claim, backed by the chat service.
    pub fn logic_check(
        &self,
        chat: &dyn ChatBackend,
        sample_id: &str,
        claim: &str,
    ) -> Result<ToolObservation, ToolError> {
        if claim.trim().is_empty() {
            return Err(ToolError::EmptyInput("logic check claim".into()));
        }
        let request = ChatRequest {
            role_tag: "logic-check".to_string(),
            sample_id: sample_id.to_string(),
            messages: vec![MessagePart::Text { text: format!("{LOGIC_CHECK_PROMPT}{claim}") }],
            temperature: 0.0,
            seed: None,
            max_tokens: 512,
            candidate_index: None,
        };
        Ok(match chat.chat(&request) {
            Ok(resp) => ToolObservation::ok(
                ToolId::LogicCheck,
                truncate_chars(&resp.text, self.char_cap),
                resp.latency_ms,
            ),
            Err(e) => ToolObservation::unavailable(ToolId::LogicCheck, e.to_string()),
        })
    }

    /// Manipulation screening of the image, formatted as
    /// `manipulation_score=<x>; verdict=<likely-forged|likely-authentic>`.
    /// Scores at or above 0.5 are reported as forged: ties favor the alarm.
    pub fn forgery_detect(&self, image: &ImageRef) -> Result<ToolObservation, ToolError> {
        if image.is_absent() {
            return Err(ToolError::UnresolvableImage("image marked absent".into()));
        }
        match self.forgery.detect(image) {
            Ok(score) => {
                let verdict = if score >= 0.5 { "likely-forged" } else { "likely-authentic" };
                Ok(ToolObservation::ok(
                    ToolId::ForgeryDetect,
                    format!("manipulation_score={score}; verdict={verdict}"),
                    0,
                ))
            }
            Err(ToolProviderError::Input(e)) => Err(e),
            Err(ToolProviderError::Outage(diag)) => {
                Ok(ToolObservation::unavailable(ToolId::ForgeryDetect, diag))
            }
        }
    }

    /// Grounded scene description of the image, backed by the chat service.
    pub fn image_analyze(
        &self,
        chat: &dyn ChatBackend,
        sample: &Sample,
    ) -> Result<ToolObservation, ToolError> {
        if sample.image_ref.is_absent() {
            return Err(ToolError::UnresolvableImage("image marked absent".into()));
        }
        let request = ChatRequest {
            role_tag: "image-analyze".to_string(),
            sample_id: sample.id.clone(),
            messages: vec![
                MessagePart::Text { text: IMAGE_ANALYZE_PROMPT.to_string() },
                MessagePart::Image { image: sample.image_ref.clone() },
            ],
            temperature: 0.0,
            seed: None,
            max_tokens: 512,
            candidate_index: None,
        };
        Ok(match chat.chat(&request) {
            Ok(resp) => ToolObservation::ok(
                ToolId::ImageAnalyze,
                truncate_chars(&resp.text, self.char_cap),
                resp.latency_ms,
            ),
            Err(e) => ToolObservation::unavailable(ToolId::ImageAnalyze, e.to_string()),
        })
    }
}

/// Per-run observation cache keyed by `(tool, sample_id)`. The image
/// description, for example, is fetched once even though both the image and
/// cross stages consume it. The fetch closure runs under the lock, so
/// concurrent first fetches of one key still produce exactly one live call.
#[derive(Default)]
pub struct ToolCache {
    entries: Mutex<HashMap<(ToolId, String), ToolObservation>>,
}

impl ToolCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the cached observation, or fetches and caches it. The second
    /// tuple field reports whether a live fetch happened.
    pub fn get_or_fetch<F>(
        &self,
        tool: ToolId,
        sample_id: &str,
        fetch: F,
    ) -> Result<(ToolObservation, bool), ToolError>
    where
        F: FnOnce() -> Result<ToolObservation, ToolError>,
    {
        let mut entries = self.entries.lock().expect("tool cache poisoned");
        if let Some(obs) = entries.get(&(tool, sample_id.to_string())) {
            return Ok((obs.clone(), false));
        }
        let obs = fetch()?;
        entries.insert((tool, sample_id.to_string()), obs.clone());
        Ok((obs, true))
    }
}

/// Live adapters for the externally served tools. Logic checking and image
/// analysis need no adapters of their own: they ride the chat backend.
#[cfg(feature = "http")]
pub mod http {
    use std::time::Duration;

    use serde_json::Value;

    use super::{ForgeryDetector, ToolProviderError, WebSearchProvider};
    use crate::error::ToolError;
    use crate::types::ImageRef;

    fn client(timeout_secs: u64) -> reqwest::blocking::Client {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .expect("static client config")
    }

    /// Opensearch-style retrieval endpoint
    /// (`GET {url}?action=opensearch&search=<query>&...`), the protocol
    /// public encyclopedia APIs expose. The reply is the 4-array shape
    /// `[term, [titles], [descriptions], [links]]`.
    pub struct HttpWebSearch {
        client: reqwest::blocking::Client,
        url: String,
        limit: usize,
    }

    impl HttpWebSearch {
        pub fn new(url: String, timeout_secs: u64) -> Self {
            HttpWebSearch { client: client(timeout_secs), url, limit: 5 }
        }
    }

    impl WebSearchProvider for HttpWebSearch {
        fn search(&self, query: &str) -> Result<String, ToolProviderError> {
            let reply: Value = self
                .client
                .get(&self.url)
                .query(&[
                    ("action", "opensearch"),
                    ("search", query),
                    ("limit", &self.limit.to_string()),
                    ("format", "json"),
                ])
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| ToolProviderError::Outage(e.to_string()))?
                .json()
                .map_err(|e| ToolProviderError::Outage(format!("malformed search reply: {e}")))?;
            let titles = reply.get(1).and_then(Value::as_array);
            let descriptions = reply.get(2).and_then(Value::as_array);
            let (Some(titles), Some(descriptions)) = (titles, descriptions) else {
                return Err(ToolProviderError::Outage(
                    "search reply is not the opensearch array shape".to_string(),
                ));
            };
            let mut extracts = Vec::new();
            for (i, title) in titles.iter().enumerate() {
                let title = title.as_str().unwrap_or_default();
                let description =
                    descriptions.get(i).and_then(Value::as_str).unwrap_or_default();
                if description.is_empty() {
                    extracts.push(title.to_string());
                } else {
                    extracts.push(format!("{title}: {description}"));
                }
            }
            if extracts.is_empty() {
                return Err(ToolProviderError::Outage(format!("no results for {query:?}")));
            }
            Ok(extracts.join("\n"))
        }
    }

    /// External forgery detection service:
    /// `POST {url}/detect` with `{"image": <url or data url>}`, expecting
    /// `{"score": number in [0,1]}`.
    pub struct HttpForgeryDetector {
        client: reqwest::blocking::Client,
        url: String,
    }

    impl HttpForgeryDetector {
        pub fn new(url: String, timeout_secs: u64) -> Self {
            HttpForgeryDetector {
                client: client(timeout_secs),
                url: url.trim_end_matches('/').to_string(),
            }
        }
    }

    impl ForgeryDetector for HttpForgeryDetector {
        fn detect(&self, image: &ImageRef) -> Result<f64, ToolProviderError> {
            let payload = crate::backends::http::image_payload_url(image).map_err(|e| {
                ToolProviderError::Input(ToolError::UnresolvableImage(e.to_string()))
            })?;
            let reply: Value = self
                .client
                .post(format!("{}/detect", self.url))
                .json(&serde_json::json!({"image": payload}))
                .send()
                .and_then(|r| r.error_for_status())
                .map_err(|e| ToolProviderError::Outage(e.to_string()))?
                .json()
                .map_err(|e| ToolProviderError::Outage(format!("malformed detect reply: {e}")))?;
            let score = reply
                .get("score")
                .and_then(Value::as_f64)
                .ok_or_else(|| ToolProviderError::Outage("detect reply has no score".to_string()))?;
            if !(0.0..=1.0).contains(&score) {
                return Err(ToolProviderError::Outage(format!(
                    "detect score {score} outside [0,1]"
                )));
            }
            Ok(score)
        }
    }
}

/// Unicode-safe truncation to at most `cap` characters, with a marker.
fn truncate_chars(content: &str, cap: usize) -> String {
    if content.chars().count() <= cap {
        return content.to_string();
    }
    let kept: String = content.chars().take(cap.saturating_sub(TRUNCATION_MARKER.chars().count())).collect();
    format!("{kept}{TRUNCATION_MARKER}")
}
