//! Blocking JSON-over-HTTP plumbing shared by the remote embedding and chat
//! backends: bearer auth, bounded in-flight requests, and exponential backoff
//! on transient failures.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay_for(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimit {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimit {
    pub fn new(limit: usize) -> Self {
        Self {
            permits: Mutex::new(limit.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().unwrap();
        while *permits == 0 {
            permits = self.freed.wait(permits).unwrap();
        }
        *permits -= 1;
        Permit { limit: self }
    }
}

pub struct Permit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.limit.permits.lock().unwrap() += 1;
        self.limit.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HttpFailure {
    Auth { status: u16, body: String },
    RateLimited { body: String },
    /// Non-retryable HTTP error other than auth.
    Status { status: u16, body: String },
    /// Connection failure, timeout, 5xx after retries, or an unreadable body.
    Transport(String),
}

impl std::fmt::Display for HttpFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HttpFailure::Auth { status, body } => write!(f, "authentication failed (HTTP {status}): {body}"),
            HttpFailure::RateLimited { body } => write!(f, "rate limited: {body}"),
            HttpFailure::Status { status, body } => write!(f, "HTTP {status}: {body}"),
            HttpFailure::Transport(msg) => write!(f, "transport failure: {msg}"),
        }
    }
}

pub struct JsonPoster {
    agent: ureq::Agent,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

impl JsonPoster {
    pub fn new(timeout: Duration, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            retry,
            limit: InFlightLimit::new(max_in_flight),
        }
    }

    /// POSTs `body` and returns the decoded JSON response of the first 2xx
    /// reply. 429, 5xx, and transport errors are retried up to the policy's
    /// attempt cap.
    pub fn post(&self, url: &str, token: Option<&str>, body: &Value) -> Result<Value, HttpFailure> {
        let _permit = self.limit.acquire();
        let mut attempt = 0;
        loop {
            let outcome = self.post_once(url, token, body);
            attempt += 1;
            match outcome {
                Ok(value) => return Ok(value),
                Err(failure) if is_retryable(&failure) && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay_for(attempt - 1);
                    tracing::warn!(%url, attempt, ?delay, "retrying after {failure}");
                    std::thread::sleep(delay);
                }
                Err(failure) => return Err(failure),
            }
        }
    }

    fn post_once(&self, url: &str, token: Option<&str>, body: &Value) -> Result<Value, HttpFailure> {
        let mut request = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = token {
            request = request.header("Authorization", format!("Bearer {token}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| HttpFailure::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| HttpFailure::Transport(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| HttpFailure::Transport(format!("invalid JSON response: {e}"))),
            401 | 403 => Err(HttpFailure::Auth { status, body: text }),
            429 => Err(HttpFailure::RateLimited { body: text }),
            500..=599 => Err(HttpFailure::Transport(format!("HTTP {status}: {text}"))),
            _ => Err(HttpFailure::Status { status, body: text }),
        }
    }
}

fn is_retryable(failure: &HttpFailure) -> bool {
    matches!(failure, HttpFailure::RateLimited { .. } | HttpFailure::Transport(_))
}

/// Reads a bearer token from the environment, treating blank values as unset.
pub fn token_from_env(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.trim().is_empty())
}
