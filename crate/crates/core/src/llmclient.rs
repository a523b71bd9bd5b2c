//! Chat-completion backends.
//!
//! [`RemoteChatBackend`] speaks the common chat-completions wire shape.
//! [`ScriptedMock`] answers from a rule script with no I/O at all, which is
//! what every shipped test and the offline CLI use.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{token_from_env, HttpFailure, JsonPoster, RetryPolicy};
use crate::promptkit::{prompt_tokens, ChatMessage, Role};
use crate::segmenter::{TokenCounter, WordRatioCounter};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";
pub const LLM_API_KEY_VAR: &str = "LLM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid completion request: {0}")]
    InvalidRequest(String),
    #[error("chat backend authentication failed: {0}")]
    Auth(String),
    #[error("chat backend rate limited after retries: {0}")]
    RateLimited(String),
    #[error("chat backend transport failure: {0}")]
    Transport(String),
    #[error("prompt exceeds the model context: {0}")]
    ContextOverflow(String),
    #[error("chat backend returned an unexpected response: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub model_name: String,
    pub max_answer_tokens: usize,
}

impl CompletionRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            model_name: DEFAULT_MODEL.to_string(),
            max_answer_tokens: 512,
        }
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self
            .messages
            .iter()
            .any(|m| m.role != Role::Assistant && m.content.trim().is_empty())
        {
            return Err(LlmError::InvalidRequest("system and user messages must not be empty".into()));
        }
        Ok(())
    }

    fn final_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<Usage>,
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Matcher {
    /// Substring of the final user message (case-sensitive).
    Contains(String),
    /// Equal to the question extracted from the final user message.
    Exact(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptRule {
    pub matcher: Matcher,
    pub response: String,
}

pub const TITLES_PLACEHOLDER: &str = "{TITLES}";
pub const DEFAULT_FALLBACK: &str = "No scripted answer matched this question. Documents consulted: {TITLES}";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("mock script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

/// Deterministic backend driven by an ordered rule list; the first matching
/// rule wins. Unmatched requests get the fallback template with `{TITLES}`
/// replaced by the distinct document titles found in the prompt.
#[derive(Debug, Clone)]
pub struct ScriptedMock {
    rules: Vec<ScriptRule>,
    fallback: String,
    /// When set, prompts whose tokens plus `max_answer_tokens` exceed this
    /// limit fail with `ContextOverflow`, measured with the default counter.
    context_limit: Option<usize>,
}

impl Default for ScriptedMock {
    fn default() -> Self {
        Self {
            rules: Vec::new(),
            fallback: DEFAULT_FALLBACK.to_string(),
            context_limit: Some(4097),
        }
    }
}

impl ScriptedMock {
    pub const NAME: &'static str = "mock";

    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            ..Self::default()
        }
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }

    pub fn with_context_limit(mut self, limit: Option<usize>) -> Self {
        self.context_limit = limit;
        self
    }

    pub fn rules(&self) -> &[ScriptRule] {
        &self.rules
    }

    /// Parses a mock script.
    ///
    /// ```text
    /// # comment
    /// contains: warships
    /// The agreement does not apply to warships.
    ///
    /// exact: How many members will comprise the committee?
    /// Fifteen members.
    ///
    /// fallback:
    /// Nothing scripted. Sources: {TITLES}
    /// ```
    ///
    /// Blocks are separated by blank lines. The first line of a block is the
    /// matcher; the remaining lines, joined with newlines, are the response.
    pub fn parse_script(source: &str) -> Result<Self, ScriptError> {
        let mut mock = Self::default();
        let mut block: Vec<(usize, &str)> = Vec::new();
        let lines = source.lines().enumerate().map(|(i, l)| (i + 1, l));
        for (no, line) in lines.chain(std::iter::once((0, ""))) {
            if line.trim_start().starts_with('#') {
                continue;
            }
            if !line.trim().is_empty() {
                block.push((no, line));
                continue;
            }
            if block.is_empty() {
                continue;
            }
            let (head_no, head) = block[0];
            let body = block[1..].iter().map(|(_, l)| l.trim_end()).collect::<Vec<_>>().join("\n");
            let (kind, arg) = head
                .split_once(':')
                .map(|(k, a)| (k.trim(), a.trim()))
                .ok_or_else(|| ScriptError {
                    line: head_no,
                    message: "expected `contains:`, `exact:`, or `fallback:`".into(),
                })?;
            if body.is_empty() {
                return Err(ScriptError {
                    line: head_no,
                    message: "rule has no response text".into(),
                });
            }
            match kind {
                "contains" | "exact" if arg.is_empty() => {
                    return Err(ScriptError {
                        line: head_no,
                        message: "matcher text is empty".into(),
                    })
                }
                "contains" => mock.rules.push(ScriptRule {
                    matcher: Matcher::Contains(arg.to_string()),
                    response: body,
                }),
                "exact" => mock.rules.push(ScriptRule {
                    matcher: Matcher::Exact(arg.to_string()),
                    response: body,
                }),
                "fallback" => mock.fallback = body,
                other => {
                    return Err(ScriptError {
                        line: head_no,
                        message: format!("unknown rule kind {other:?}"),
                    })
                }
            }
            block.clear();
        }
        Ok(mock)
    }

    fn respond(&self, request: &CompletionRequest) -> String {
        let last_user = request.final_user_message().unwrap_or("");
        let question = extract_question(last_user);
        for rule in &self.rules {
            let hit = match &rule.matcher {
                Matcher::Contains(needle) => last_user.contains(needle.as_str()),
                Matcher::Exact(text) => question == text,
            };
            if hit {
                return rule.response.clone();
            }
        }
        let titles = prompt_document_titles(&request.messages);
        let listed = if titles.is_empty() {
            "(none)".to_string()
        } else {
            titles.join("; ")
        };
        self.fallback.replace(TITLES_PLACEHOLDER, &listed)
    }
}

impl ChatBackend for ScriptedMock {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.validate()?;
        let counter = WordRatioCounter;
        let prompt = prompt_tokens(&request.messages, &counter);
        if let Some(limit) = self.context_limit {
            if prompt + request.max_answer_tokens > limit {
                return Err(LlmError::ContextOverflow(format!(
                    "{prompt} prompt tokens + {} answer tokens > {limit}",
                    request.max_answer_tokens
                )));
            }
        }
        let text = self.respond(request);
        Ok(CompletionResult {
            usage: Some(Usage {
                prompt_tokens: prompt,
                completion_tokens: counter.count(&text),
            }),
            text,
            finish_reason: FinishReason::Stop,
        })
    }
}

/// Text between the last `Question: ` and the following `Answer:`, trimmed;
/// the whole message when it does not follow that layout.
pub fn extract_question(message: &str) -> &str {
    let Some(start) = message.rfind("Question:") else {
        return message.trim();
    };
    let rest = &message[start + "Question:".len()..];
    let end = rest.rfind("Answer:").unwrap_or(rest.len());
    rest[..end].trim()
}

/// Distinct titles from `From document "<title>":` lines, in first-seen order.
pub fn prompt_document_titles(messages: &[ChatMessage]) -> Vec<String> {
    let mut titles: Vec<String> = Vec::new();
    for m in messages.iter().filter(|m| m.role == Role::User) {
        for line in m.content.lines() {
            if let Some(title) = line
                .strip_prefix("From document \"")
                .and_then(|rest| rest.strip_suffix("\":"))
            {
                if !titles.iter().any(|t| t == title) {
                    titles.push(title.to_string());
                }
            }
        }
    }
    titles
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteChatConfig {
    pub url: String,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    /// Bearer token. `from_env` fills it from `LLM_API_KEY`.
    pub api_key: Option<String>,
}

impl RemoteChatConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            api_key: None,
        }
    }

    pub fn from_env(mut self) -> Self {
        self.api_key = token_from_env(LLM_API_KEY_VAR);
        self
    }
}

pub struct RemoteChatBackend {
    config: RemoteChatConfig,
    poster: JsonPoster,
}

impl RemoteChatBackend {
    pub fn new(config: RemoteChatConfig) -> Self {
        let poster = JsonPoster::new(config.timeout, config.retry, config.max_in_flight);
        Self { config, poster }
    }
}

impl ChatBackend for RemoteChatBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        request.validate()?;
        let body = json!({
            "model": request.model_name,
            "messages": request.messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect::<Vec<_>>(),
            "temperature": request.temperature,
            "max_tokens": request.max_answer_tokens,
        });
        let response = self
            .poster
            .post(&self.config.url, self.config.api_key.as_deref(), &body)
            .map_err(|f| match f {
                HttpFailure::Auth { .. } => LlmError::Auth(f.to_string()),
                HttpFailure::RateLimited { .. } => LlmError::RateLimited(f.to_string()),
                HttpFailure::Status { ref body, .. } if is_context_overflow(body) => {
                    LlmError::ContextOverflow(f.to_string())
                }
                HttpFailure::Status { .. } => LlmError::Protocol(f.to_string()),
                HttpFailure::Transport(msg) => LlmError::Transport(msg),
            })?;

        let choice = response
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| LlmError::Protocol("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(|c| c.as_str())
            .unwrap_or_default()
            .to_string();
        let finish_reason = match choice.get("finish_reason").and_then(|r| r.as_str()) {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ if text.is_empty() => FinishReason::Error,
            _ => FinishReason::Stop,
        };
        if text.is_empty() && finish_reason != FinishReason::Error {
            return Err(LlmError::Protocol("empty answer".into()));
        }
        let usage = response.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()? as usize,
                completion_tokens: u.get("completion_tokens")?.as_u64()? as usize,
            })
        });
        Ok(CompletionResult {
            text,
            finish_reason,
            usage,
        })
    }
}

fn is_context_overflow(body: &str) -> bool {
    body.contains("context_length_exceeded") || body.contains("maximum context length")
}
