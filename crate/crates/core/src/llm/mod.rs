//! Sampling completions from a chat model.
//!
//! A [`ChatBackend`] performs one raw provider call. [`Client`] turns it into
//! the [`Sampler`] contract: retries with exponential backoff, optional rate
//! limiting, and stitching of several calls when the provider caps `n`.
//! [`CachedSampler`] layers the replayable store on top.

mod cached;
mod extract;
mod http;
mod scripted;

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use cached::CachedSampler;
pub use extract::{extract_patch, ExtractionFailed};
pub use http::HttpBackend;
pub use scripted::{ScriptFailure, ScriptRecord, ScriptedBackend};

use crate::domain::{RepairConfig, Usage, UsageSource};
use crate::prompts::Prompt;
use crate::store::{fingerprint, StoreError};
use crate::tokenizer::TokenCounter;

pub const API_KEY_ENV: &str = "COSTFIX_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prompt: Prompt,
    pub n: u32,
    pub temperature: f64,
    pub model_id: String,
    pub template_version: String,
}

impl SampleRequest {
    /// Stable hash of everything that determines the reply distribution.
    pub fn fingerprint(&self) -> String {
        let prompt = serde_json::to_vec(&self.prompt).expect("prompt serializes");
        fingerprint(&[
            self.model_id.as_bytes(),
            &prompt,
            &self.n.to_le_bytes(),
            &self.temperature.to_bits().to_le_bytes(),
            self.template_version.as_bytes(),
        ])
    }
}

/// Result of one raw provider call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub choices: Vec<String>,
    pub usage: Option<Usage>,
}

/// Accounting for one provider call within a sampled request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub requested: u32,
    pub returned: u32,
    pub usage: Usage,
    pub source: UsageSource,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResponse {
    pub choices: Vec<String>,
    /// Summed over all calls.
    pub usage: Usage,
    pub calls: Vec<CallRecord>,
    pub request_fingerprint: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned {status}: {body}")]
    Provider { status: u16, body: String },
    #[error("prompt exceeds the provider context length: {0}")]
    BudgetExceeded(String),
    #[error("no cached response for {0} in replay mode")]
    ReplayMiss(String),
    #[error("script exhausted at call {0}")]
    ScriptExhausted(usize),
    #[error("invalid script: {0}")]
    Script(String),
    #[error("provider returned no choices")]
    Empty,
    #[error(transparent)]
    Storage(#[from] StoreError),
}

impl LlmError {
    /// Errors worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Provider { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    /// Errors that end the invocation but let the repair loop continue.
    pub fn is_invocation_local(&self) -> bool {
        matches!(
            self,
            LlmError::Transport(_)
                | LlmError::Provider { .. }
                | LlmError::BudgetExceeded(_)
                | LlmError::Empty
        )
    }
}

/// One raw call to a model provider.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &SampleRequest, n: u32) -> Result<Completion, LlmError>;

    /// Largest `n` accepted per call, if the provider caps it.
    fn max_n(&self) -> Option<u32> {
        None
    }
}

/// The sampling contract used by the orchestrator.
pub trait Sampler: Send + Sync {
    fn sample(&self, request: &SampleRequest) -> Result<SampleResponse, LlmError>;
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl RetryPolicy {
    pub fn delay_for(&self, retry: u32) -> Duration {
        self.base_delay.saturating_mul(1u32 << retry.min(16))
    }
}

/// Token bucket limiting requests per minute.
#[derive(Debug)]
pub struct RateLimiter {
    per_minute: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let cap = requests.max(1) as f64;
        Self {
            per_minute: cap,
            state: Mutex::new((cap, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("rate limiter");
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_minute / 60.0;
                state.0 = (state.0 + refill).min(self.per_minute);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) * 60.0 / self.per_minute)
            };
            std::thread::sleep(wait);
        }
    }
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

/// Retrying, rate-limited, `n`-stitching sampler over a backend.
pub struct Client<B> {
    backend: B,
    retry: RetryPolicy,
    cap: Option<u32>,
    limiter: Option<RateLimiter>,
    counter: Arc<dyn TokenCounter>,
    sleep: Box<Sleeper>,
}

impl<B: ChatBackend> Client<B> {
    pub fn new(backend: B, retry: RetryPolicy, counter: Arc<dyn TokenCounter>) -> Self {
        Self {
            backend,
            retry,
            cap: None,
            limiter: None,
            counter,
            sleep: Box::new(std::thread::sleep),
        }
    }

    pub fn from_config(backend: B, config: &RepairConfig, counter: Arc<dyn TokenCounter>) -> Self {
        let mut client = Self::new(
            backend,
            RetryPolicy {
                max_retries: config.max_retries,
                base_delay: Duration::from_millis(config.retry_base_ms),
            },
            counter,
        );
        client.cap = config.provider_max_n;
        client.limiter = config.requests_per_minute.map(RateLimiter::per_minute);
        client
    }

    pub fn with_cap(mut self, cap: Option<u32>) -> Self {
        self.cap = cap;
        self
    }

    pub fn with_rate_limit(mut self, per_minute: Option<u32>) -> Self {
        self.limiter = per_minute.map(RateLimiter::per_minute);
        self
    }

    pub fn with_sleeper(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn effective_cap(&self) -> Option<u32> {
        match (self.cap, self.backend.max_n()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    fn call_with_retries(
        &self,
        request: &SampleRequest,
        n: u32,
    ) -> Result<(Completion, u32), LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self.backend.complete(request, n) {
                Ok(c) => return Ok((c, attempt)),
                Err(e) if e.is_retryable() && attempt <= self.retry.max_retries => {
                    let delay = self.retry.delay_for(attempt - 1);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    (self.sleep)(delay);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

impl<B: ChatBackend> Sampler for Client<B> {
    fn sample(&self, request: &SampleRequest) -> Result<SampleResponse, LlmError> {
        let total = request.n.max(1);
        let per_call = self.effective_cap().unwrap_or(total).max(1);
        let mut remaining = total;
        let mut choices = Vec::with_capacity(total as usize);
        let mut calls = Vec::new();
        while remaining > 0 {
            let n = remaining.min(per_call);
            let (completion, attempts) = self.call_with_retries(request, n)?;
            let mut returned = completion.choices;
            returned.truncate(n as usize);
            let (usage, source) = match completion.usage {
                Some(u) => (u, UsageSource::Provider),
                None => (
                    Usage {
                        input_tokens: request.prompt.token_count as u64,
                        output_tokens: returned.iter().map(|c| self.counter.count(c) as u64).sum(),
                    },
                    UsageSource::Local,
                ),
            };
            calls.push(CallRecord {
                requested: n,
                returned: returned.len() as u32,
                usage,
                source,
                attempts,
            });
            choices.extend(returned);
            remaining -= n;
        }
        if choices.is_empty() {
            return Err(LlmError::Empty);
        }
        let usage = calls.iter().fold(Usage::default(), |acc, c| acc + c.usage);
        Ok(SampleResponse {
            choices,
            usage,
            calls,
            request_fingerprint: request.fingerprint(),
        })
    }
}

/// A sampler that refuses every request; used when nothing may leave the process.
#[derive(Debug, Default)]
pub struct Offline;

impl Sampler for Offline {
    fn sample(&self, request: &SampleRequest) -> Result<SampleResponse, LlmError> {
        Err(LlmError::ReplayMiss(request.fingerprint()))
    }
}
