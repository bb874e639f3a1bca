//! Deterministic scripted backends for offline runs and tests.
//!
//! Fixtures live in JSONL files, one record per line. Four record shapes are
//! understood, discriminated by their fields:
//!
//! ```text
//! {"role": "text-detect", "sample_id": "s1", "candidate_index": 0, "response": "..."}
//! {"sample_id": "s1", "stage": "text", "candidate_index": 0, "score": 2.37}
//! {"tool": "web_search", "query": "...", "content": "..."}
//! {"tool": "forgery_detect", "image": "path:img.jpg", "score": 0.91}
//! ```
//!
//! Every mock is a pure function of its key: identical keys return identical
//! results regardless of call order or concurrency.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{BackendError, ToolError};
use crate::tools::ToolProviderError;
use crate::types::{ImageRef, Stage};

use super::{ChatBackend, ChatRequest, ChatResponse, RewardBackend, RewardRequest};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum FixtureRecord {
    Chat { role: String, sample_id: String, candidate_index: usize, response: String },
    Reward { sample_id: String, stage: Stage, candidate_index: usize, score: f64 },
    WebSearch { tool: WebSearchTag, query: String, content: String },
    Forgery { tool: ForgeryTag, image: String, score: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum WebSearchTag {
    #[serde(rename = "web_search")]
    WebSearch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum ForgeryTag {
    #[serde(rename = "forgery_detect")]
    ForgeryDetect,
}

/// In-memory fixture table, loadable from a directory of JSONL files and
/// buildable programmatically for tests and demos.
#[derive(Debug, Clone, Default)]
pub struct FixtureSet {
    chat: BTreeMap<(String, String, usize), String>,
    reward: BTreeMap<(String, Stage, usize), f64>,
    web: BTreeMap<String, String>,
    forgery: BTreeMap<String, f64>,
}

impl FixtureSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Load every `*.jsonl` file under `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, BackendError> {
        let mut set = FixtureSet::new();
        let entries = fs::read_dir(dir).map_err(|e| {
            BackendError::Protocol(format!("cannot read fixture dir {}: {e}", dir.display()))
        })?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let body = fs::read_to_string(&path).map_err(|e| {
                BackendError::Protocol(format!("cannot read {}: {e}", path.display()))
            })?;
            set.load_jsonl(&body).map_err(|e| {
                BackendError::Protocol(format!("{}: {e}", path.display()))
            })?;
        }
        Ok(set)
    }

    /// Parse fixture records from JSONL text (blank lines ignored).
    pub fn load_jsonl(&mut self, body: &str) -> Result<(), BackendError> {
        for (idx, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord = serde_json::from_str(line).map_err(|e| {
                BackendError::Protocol(format!("line {}: unrecognized fixture record: {e}", idx + 1))
            })?;
            self.insert(record)?;
        }
        Ok(())
    }

    fn insert(&mut self, record: FixtureRecord) -> Result<(), BackendError> {
        match record {
            FixtureRecord::Chat { role, sample_id, candidate_index, response } => {
                self.chat.insert((role, sample_id, candidate_index), response);
            }
            FixtureRecord::Reward { sample_id, stage, candidate_index, score } => {
                if !score.is_finite() {
                    return Err(BackendError::Protocol("reward fixture score must be finite".into()));
                }
                self.reward.insert((sample_id, stage, candidate_index), score);
            }
            FixtureRecord::WebSearch { query, content, .. } => {
                self.web.insert(query, content);
            }
            FixtureRecord::Forgery { image, score, .. } => {
                if !(0.0..=1.0).contains(&score) {
                    return Err(BackendError::Protocol("forgery fixture score must be in [0,1]".into()));
                }
                self.forgery.insert(image, score);
            }
        }
        Ok(())
    }

    pub fn add_chat(&mut self, role: &str, sample_id: &str, candidate_index: usize, response: &str) {
        self.chat.insert(
            (role.to_string(), sample_id.to_string(), candidate_index),
            response.to_string(),
        );
    }

    pub fn add_reward(&mut self, sample_id: &str, stage: Stage, candidate_index: usize, score: f64) {
        self.reward.insert((sample_id.to_string(), stage, candidate_index), score);
    }

    pub fn add_web(&mut self, query: &str, content: &str) {
        self.web.insert(query.to_string(), content.to_string());
    }

    pub fn add_forgery(&mut self, image_key: &str, score: f64) {
        self.forgery.insert(image_key.to_string(), score);
    }

    pub fn merge(&mut self, other: FixtureSet) {
        self.chat.extend(other.chat);
        self.reward.extend(other.reward);
        self.web.extend(other.web);
        self.forgery.extend(other.forgery);
    }

    pub fn chat_response(&self, role: &str, sample_id: &str, candidate_index: usize) -> Option<&str> {
        self.chat
            .get(&(role.to_string(), sample_id.to_string(), candidate_index))
            .map(String::as_str)
    }

    pub fn reward_score(&self, sample_id: &str, stage: Stage, candidate_index: usize) -> Option<f64> {
        self.reward.get(&(sample_id.to_string(), stage, candidate_index)).copied()
    }

    pub fn web_content(&self, query: &str) -> Option<&str> {
        self.web.get(query).map(String::as_str)
    }

    pub fn forgery_score(&self, image_key: &str) -> Option<f64> {
        self.forgery.get(image_key).copied()
    }

    /// Write the set as two JSONL files (`chat.jsonl`, `tools.jsonl`) under
    /// `dir`, in the schema `load_dir` reads back.
    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        let mut chat = fs::File::create(dir.join("chat.jsonl"))?;
        for ((role, sample_id, candidate_index), response) in &self.chat {
            let record = FixtureRecord::Chat {
                role: role.clone(),
                sample_id: sample_id.clone(),
                candidate_index: *candidate_index,
                response: response.clone(),
            };
            writeln!(chat, "{}", serde_json::to_string(&record)?)?;
        }
        for ((sample_id, stage, candidate_index), score) in &self.reward {
            let record = FixtureRecord::Reward {
                sample_id: sample_id.clone(),
                stage: *stage,
                candidate_index: *candidate_index,
                score: *score,
            };
            writeln!(chat, "{}", serde_json::to_string(&record)?)?;
        }
        let mut tools = fs::File::create(dir.join("tools.jsonl"))?;
        for (query, content) in &self.web {
            let record = FixtureRecord::WebSearch {
                tool: WebSearchTag::WebSearch,
                query: query.clone(),
                content: content.clone(),
            };
            writeln!(tools, "{}", serde_json::to_string(&record)?)?;
        }
        for (image, score) in &self.forgery {
            let record = FixtureRecord::Forgery {
                tool: ForgeryTag::ForgeryDetect,
                image: image.clone(),
                score: *score,
            };
            writeln!(tools, "{}", serde_json::to_string(&record)?)?;
        }
        Ok(())
    }
}

/// Chat backend answering from the fixture table.
#[derive(Debug, Clone)]
pub struct MockChat {
    fixtures: Arc<FixtureSet>,
}

impl MockChat {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        MockChat { fixtures }
    }
}

impl ChatBackend for MockChat {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let index = request.candidate_index.unwrap_or(0);
        let text = self
            .fixtures
            .chat_response(&request.role_tag, &request.sample_id, index)
            .ok_or_else(|| {
                BackendError::MissingFixture(format!(
                    "chat key (role={}, sample_id={}, candidate_index={index})",
                    request.role_tag, request.sample_id
                ))
            })?;
        Ok(ChatResponse { text: text.to_string(), usage: None, latency_ms: 0 })
    }
}

/// Reward backend answering from the fixture table.
#[derive(Debug, Clone)]
pub struct MockReward {
    fixtures: Arc<FixtureSet>,
}

impl MockReward {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        MockReward { fixtures }
    }
}

impl RewardBackend for MockReward {
    fn score_reward(&self, request: &RewardRequest) -> Result<f64, BackendError> {
        request.validate()?;
        self.fixtures
            .reward_score(&request.sample_id, request.stage, request.candidate_index)
            .ok_or_else(|| {
                BackendError::MissingFixture(format!(
                    "reward key (sample_id={}, stage={}, candidate_index={})",
                    request.sample_id, request.stage, request.candidate_index
                ))
            })
    }
}

/// Web-search provider answering from the fixture table. Missing keys
/// surface as `None`, which the tool layer degrades to an unavailable
/// observation.
#[derive(Debug, Clone)]
pub struct MockWebSearch {
    fixtures: Arc<FixtureSet>,
}

impl MockWebSearch {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        MockWebSearch { fixtures }
    }
}

impl crate::tools::WebSearchProvider for MockWebSearch {
    fn search(&self, query: &str) -> Result<String, ToolProviderError> {
        self.fixtures
            .web_content(query)
            .map(str::to_string)
            .ok_or_else(|| ToolProviderError::Outage(format!("no web_search fixture for query {query:?}")))
    }
}

/// Forgery detector answering from the fixture table.
#[derive(Debug, Clone)]
pub struct MockForgery {
    fixtures: Arc<FixtureSet>,
}

impl MockForgery {
    pub fn new(fixtures: Arc<FixtureSet>) -> Self {
        MockForgery { fixtures }
    }
}

impl crate::tools::ForgeryDetector for MockForgery {
    fn detect(&self, image: &ImageRef) -> Result<f64, ToolProviderError> {
        if image.is_absent() {
            return Err(ToolError::UnresolvableImage("image marked absent".into()).into());
        }
        self.fixtures.forgery_score(&image.key()).ok_or_else(|| {
            ToolProviderError::Outage(format!("no forgery_detect fixture for image {}", image.key()))
        })
    }
}
