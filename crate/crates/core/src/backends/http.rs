//! Live adapters speaking OpenAI-compatible chat completions and the
//! minimal reward-scoring wire protocol.
//!
//! Retry policy: transport failures (connect errors, timeouts, 5xx) are
//! retried with exponential backoff up to the configured limit; malformed
//! replies are protocol errors and are never retried here.

use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::Deserialize;
use serde_json::json;

use crate::error::BackendError;
use crate::types::ImageRef;

use super::{ChatBackend, ChatRequest, ChatResponse, MessagePart, RewardBackend, RewardRequest, TokenUsage};

const BACKOFF_BASE: Duration = Duration::from_millis(200);

fn client(timeout_secs: u64) -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .expect("static client config")
}

/// True when the failure is worth retrying: we never reached the server, or
/// it answered with a 5xx.
fn is_transport(err: &reqwest::Error) -> bool {
    err.is_connect()
        || err.is_timeout()
        || err.is_request()
        || err.status().is_some_and(|s| s.is_server_error())
}

fn post_json_with_retries(
    client: &reqwest::blocking::Client,
    url: &str,
    body: &serde_json::Value,
    max_retries: u32,
) -> Result<serde_json::Value, BackendError> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let outcome = client
            .post(url)
            .json(body)
            .send()
            .and_then(|resp| resp.error_for_status());
        match outcome {
            Ok(resp) => {
                return resp.json().map_err(|e| {
                    BackendError::Protocol(format!("{url}: malformed JSON reply: {e}"))
                });
            }
            Err(e) if is_transport(&e) && attempts <= max_retries => {
                std::thread::sleep(BACKOFF_BASE * 2u32.pow(attempts - 1));
            }
            Err(e) if is_transport(&e) => {
                return Err(BackendError::Transport { attempts, message: e.to_string() });
            }
            Err(e) => {
                return Err(BackendError::Protocol(format!("{url}: {e}")));
            }
        }
    }
}

/// Resolve an image reference into a URL the wire schema accepts: remote
/// URLs pass through, local files and raw base64 become data URLs.
pub(crate) fn image_payload_url(image: &ImageRef) -> Result<String, BackendError> {
    match image {
        ImageRef::Url(url) => Ok(url.clone()),
        ImageRef::Base64(data) => {
            if data.starts_with("data:") {
                Ok(data.clone())
            } else {
                Ok(format!("data:image/jpeg;base64,{data}"))
            }
        }
        ImageRef::Path(path) => {
            let bytes = std::fs::read(path).map_err(|e| {
                BackendError::Protocol(format!("cannot read image {path}: {e}"))
            })?;
            let mime = match std::path::Path::new(path)
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase)
                .as_deref()
            {
                Some("png") => "image/png",
                Some("gif") => "image/gif",
                Some("webp") => "image/webp",
                _ => "image/jpeg",
            };
            let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
            Ok(format!("data:{mime};base64,{encoded}"))
        }
        ImageRef::Absent => {
            Err(BackendError::Protocol("cannot encode an absent image".to_string()))
        }
    }
}

/// OpenAI-compatible chat completions client.
pub struct HttpChatBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    model: String,
    max_retries: u32,
}

impl HttpChatBackend {
    pub fn new(base_url: String, model: String, max_retries: u32, timeout_secs: u64) -> Self {
        HttpChatBackend {
            client: client(timeout_secs),
            base_url: base_url.trim_end_matches('/').to_string(),
            model,
            max_retries,
        }
    }

    fn encode_body(&self, request: &ChatRequest) -> Result<serde_json::Value, BackendError> {
        let mut content = Vec::with_capacity(request.messages.len());
        for part in &request.messages {
            match part {
                MessagePart::Text { text } => content.push(json!({"type": "text", "text": text})),
                MessagePart::Image { image } => content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": image_payload_url(image)?},
                })),
            }
        }
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }
}

#[derive(Deserialize)]
struct CompletionsReply {
    choices: Vec<Choice>,
    usage: Option<UsageReply>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct UsageReply {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl ChatBackend for HttpChatBackend {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = self.encode_body(request)?;
        let started = Instant::now();
        let reply = post_json_with_retries(&self.client, &url, &body, self.max_retries)?;
        let parsed: CompletionsReply = serde_json::from_value(reply)
            .map_err(|e| BackendError::Protocol(format!("chat reply shape: {e}")))?;
        let text = parsed
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .ok_or_else(|| BackendError::Protocol("chat reply has no message content".into()))?;
        let usage = parsed.usage.and_then(|u| {
            Some(TokenUsage {
                prompt_tokens: u.prompt_tokens?,
                completion_tokens: u.completion_tokens?,
            })
        });
        Ok(ChatResponse { text, usage, latency_ms: started.elapsed().as_millis() as u64 })
    }
}

/// Minimal reward-scoring client: `POST {reward_url}/score` with
/// `{"context", "response"}`, expecting `{"score": number}`.
pub struct HttpRewardBackend {
    client: reqwest::blocking::Client,
    reward_url: String,
    max_retries: u32,
}

impl HttpRewardBackend {
    pub fn new(reward_url: String, max_retries: u32, timeout_secs: u64) -> Self {
        HttpRewardBackend {
            client: client(timeout_secs),
            reward_url: reward_url.trim_end_matches('/').to_string(),
            max_retries,
        }
    }
}

#[derive(Deserialize)]
struct ScoreReply {
    score: f64,
}

impl RewardBackend for HttpRewardBackend {
    fn score_reward(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        request.validate()?;
        let url = format!("{}/score", self.reward_url);
        let body = json!({"context": request.context, "response": request.response});
        let reply = post_json_with_retries(&self.client, &url, &body, self.max_retries)
            .map_err(|e| match e {
                BackendError::Transport { message, .. } => {
                    BackendError::RewardBackendUnavailable(message)
                }
                other => other,
            })?;
        let parsed: ScoreReply = serde_json::from_value(reply)
            .map_err(|e| BackendError::Protocol(format!("reward reply shape: {e}")))?;
        if !parsed.score.is_finite() {
            return Err(BackendError::Protocol("reward score is not finite".into()));
        }
        Ok(parsed.score)
    }
}
