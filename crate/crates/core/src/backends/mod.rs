//! Abstract contracts for the chat-completion and reward-scoring services,
//! plus a deterministic scripted mock and (behind the `http` feature) live
//! OpenAI-compatible adapters.

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, ContractViolation};
use crate::types::{ImageRef, Stage};

pub mod mock;

#[cfg(feature = "http")]
pub mod http;

/// Roles that are allowed to attach image parts to a chat request. Text-only
/// roles (text detection/critique, logic checking) never see the image.
const IMAGE_BEARING_ROLES: [&str; 5] =
    ["image-detect", "cross-detect", "planner", "image-analyze", "image-critique"];

/// One part of a chat message: either prompt text or an image payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessagePart {
    Text { text: String },
    Image { image: ImageRef },
}

/// A single logical call to the chat backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    /// Agent identity, e.g. "text-detect" or "planner". Keys the scripted
    /// mock and never travels on the wire.
    pub role_tag: String,
    /// Sample the call belongs to; with `role_tag` and `candidate_index`
    /// this forms the mock fixture key.
    pub sample_id: String,
    pub messages: Vec<MessagePart>,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
    /// Best-of-N generation index; `None` for single-pass calls.
    pub candidate_index: Option<usize>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        if self.messages.is_empty() {
            return Err(ContractViolation::new("chat request needs at least one message part"));
        }
        if self.temperature < 0.0 {
            return Err(ContractViolation::new("temperature must be >= 0"));
        }
        if self.max_tokens == 0 {
            return Err(ContractViolation::new("max_tokens must be positive"));
        }
        let has_image = self.messages.iter().any(|p| matches!(p, MessagePart::Image { .. }));
        if has_image && !IMAGE_BEARING_ROLES.contains(&self.role_tag.as_str()) {
            return Err(ContractViolation::new(format!(
                "role {:?} must not carry image parts",
                self.role_tag
            )));
        }
        Ok(())
    }

    /// Concatenated text parts, used for prompt-content assertions in tests.
    pub fn text_content(&self) -> String {
        self.messages
            .iter()
            .filter_map(|p| match p {
                MessagePart::Text { text } => Some(text.as_str()),
                MessagePart::Image { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<TokenUsage>,
    pub latency_ms: u64,
}

/// Input to the reward model: a task context and the candidate answer to
/// score. The extra key fields exist so the scripted mock can address its
/// fixtures; the live adapter sends only `context` and `response`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardRequest {
    pub context: String,
    pub response: String,
    pub sample_id: String,
    pub stage: Stage,
    pub candidate_index: usize,
}

impl RewardRequest {
    pub fn validate(&self) -> Result<(), ContractViolation> {
        if self.context.trim().is_empty() || self.response.trim().is_empty() {
            return Err(ContractViolation::new("reward request context and response must be non-empty"));
        }
        Ok(())
    }
}

/// Chat-completion service. Implementations must tolerate concurrent calls.
pub trait ChatBackend: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

/// Reward-model scoring service. Returns an unbounded scalar; normalization
/// happens in the ranking layer.
pub trait RewardBackend: Send + Sync {
    fn score_reward(&self, request: &RewardRequest) -> Result<f64, BackendError>;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn text_req(role: &str, parts: Vec<MessagePart>) -> ChatRequest {
        ChatRequest {
            role_tag: role.to_string(),
            sample_id: "s1".to_string(),
            messages: parts,
            temperature: 0.7,
            seed: None,
            max_tokens: 256,
            candidate_index: None,
        }
    }

    #[test]
    fn chat_request_validation() {
        let ok = text_req("text-detect", vec![MessagePart::Text { text: "hi".into() }]);
        assert!(ok.validate().is_ok());

        let empty = text_req("text-detect", vec![]);
        assert!(empty.validate().is_err());

        let image_on_text_role = text_req(
            "text-detect",
            vec![MessagePart::Image { image: ImageRef::Url("https://x".into()) }],
        );
        assert!(image_on_text_role.validate().is_err());

        let image_on_planner = text_req(
            "planner",
            vec![
                MessagePart::Text { text: "caption".into() },
                MessagePart::Image { image: ImageRef::Url("https://x".into()) },
            ],
        );
        assert!(image_on_planner.validate().is_ok());
    }

    #[test]
    fn reward_request_validation() {
        let req = RewardRequest {
            context: "task".into(),
            response: "answer".into(),
            sample_id: "s1".into(),
            stage: Stage::Text,
            candidate_index: 0,
        };
        assert!(req.validate().is_ok());
        let bad = RewardRequest { response: " ".into(), ..req };
        assert!(bad.validate().is_err());
    }
}
