//! Uniform access to chat-completion and embedding backends.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] with a bounded admission gate,
//! retry policy and token accounting. Backends are either the
//! OpenAI-compatible HTTP client ([`OpenAiBackend`]) or one of the
//! deterministic mocks in [`mock`].

mod mock;
mod openai;
mod parse;
mod template;

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use mock::{
    hash_key, FixtureResponder, MockBackend, MockEmbedder, Responder, ScriptedResponder,
};
pub use openai::{OpenAiBackend, OpenAiConfig};
pub use parse::{extract_json, extract_string_list};
pub use template::{PromptTemplate, TemplateSet, TEMPLATE_VERSION};

/// Decoding temperature for screening and extraction judgments.
pub const JUDGMENT_TEMPERATURE: f64 = 0.0;
/// Decoding temperature for ensemble query sampling.
pub const SAMPLING_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

/// The prompt families the pipeline renders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Search,
    Screening,
    CharExtract,
    ArmExtract,
    ParticipantExtract,
    ResultExtract,
    TermExtract,
    PicoExtract,
    RationaleGen,
    SimpleScore,
    TwoStageScore,
}

impl TaskKind {
    pub const ALL: [TaskKind; 11] = [
        TaskKind::Search,
        TaskKind::Screening,
        TaskKind::CharExtract,
        TaskKind::ArmExtract,
        TaskKind::ParticipantExtract,
        TaskKind::ResultExtract,
        TaskKind::TermExtract,
        TaskKind::PicoExtract,
        TaskKind::RationaleGen,
        TaskKind::SimpleScore,
        TaskKind::TwoStageScore,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Search => "search",
            TaskKind::Screening => "screening",
            TaskKind::CharExtract => "char_extract",
            TaskKind::ArmExtract => "arm_extract",
            TaskKind::ParticipantExtract => "participant_extract",
            TaskKind::ResultExtract => "result_extract",
            TaskKind::TermExtract => "term_extract",
            TaskKind::PicoExtract => "pico_extract",
            TaskKind::RationaleGen => "rationale_gen",
            TaskKind::SimpleScore => "simple_score",
            TaskKind::TwoStageScore => "two_stage_score",
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown task kind `{s}`"))
    }
}

/// Out-of-band request metadata. Never sent over the wire; mocks and logs
/// use it to identify what a prompt is about.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RequestTag {
    pub task: TaskKind,
    pub subject: String,
}

impl RequestTag {
    pub fn new(task: TaskKind, subject: impl Into<String>) -> Self {
        Self { task, subject: subject.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub seed: Option<u64>,
    pub tag: Option<RequestTag>,
}

impl ChatRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: JUDGMENT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            seed: None,
            tag: None,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_tag(mut self, task: TaskKind, subject: impl Into<String>) -> Self {
        self.tag = Some(RequestTag::new(task, subject));
        self
    }

    pub fn with_max_output_tokens(mut self, n: u32) -> Self {
        self.max_output_tokens = n;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.user_text.trim().is_empty() {
            return Err(GatewayError::MalformedRequest("user_text is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::MalformedRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::MalformedRequest("max_output_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
    pub token_usage: TokenUsage,
}

/// Approximate token count used when a backend reports none.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::InvalidResponse("empty embedding vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::InvalidResponse("non-finite embedding value".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// Cosine similarity. Zero-norm vectors have similarity 0 with anything.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        cosine(&self.values, &other.values)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("backend unreachable after {attempts} attempt(s): {message}")]
    BackendUnreachable { attempts: u32, message: String },
    #[error("rate limited (retry after {retry_after:?})")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed request: {0}")]
    MalformedRequest(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("missing template variable `{0}`")]
    MissingVariable(String),
    #[error("no recorded mock response for key {key}")]
    RecordedMiss { key: String },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
}

/// Verdict of a reply parser.
pub enum Attempt<T, E> {
    Done(T),
    /// Format problem that a reprompt may fix.
    Retry(E),
    Fail(E),
}

/// A parsed reply together with the raw text it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    pub value: T,
    pub raw: String,
    pub reprompted: bool,
}

/// Failure reported by a single backend call, before retry handling.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendFailure {
    /// Connection errors, 5xx. Retried.
    Transient(String),
    RateLimited(Option<Duration>),
    /// 4xx other than 429. Never retried.
    Malformed(String),
    /// Anything else that retrying cannot fix (mock misses, bad payloads).
    Fatal(GatewayError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<TokenUsage>,
}

impl BackendReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), usage: None }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn chat(&self, request: &ChatRequest) -> Result<BackendReply, BackendFailure>;
    async fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay: Duration::from_secs(1), jitter: true }
    }
}

impl RetryPolicy {
    /// No waiting between attempts. For tests and mocks.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay: Duration::ZERO, jitter: false }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.saturating_mul(1 << (attempt.saturating_sub(1)).min(16));
        if !self.jitter || exp.is_zero() {
            return exp;
        }
        let factor = rand::rng().random_range(0.5..1.5);
        exp.mul_f64(factor)
    }
}

/// Shareable handle to one backend with a concurrency cap.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    gate: Arc<Semaphore>,
    retry: RetryPolicy,
    templates: Arc<TemplateSet>,
}

pub const DEFAULT_CONCURRENCY: usize = 8;

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            gate: Arc::new(Semaphore::new(DEFAULT_CONCURRENCY)),
            retry: RetryPolicy::default(),
            templates: Arc::new(TemplateSet::builtin()),
        }
    }

    /// Gateway over a mock backend: no backoff delays.
    pub fn mock(backend: MockBackend) -> Self {
        Self::new(Arc::new(backend)).with_retry(RetryPolicy::immediate(3))
    }

    pub fn with_concurrency(mut self, cap: usize) -> Self {
        self.gate = Arc::new(Semaphore::new(cap.max(1)));
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_templates(mut self, templates: TemplateSet) -> Self {
        self.templates = Arc::new(templates);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let _permit = self.gate.acquire().await.expect("gateway semaphore closed");
        let started = Instant::now();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let failure = match self.backend.chat(request).await {
                Ok(reply) => {
                    let usage = reply.usage.unwrap_or_else(|| TokenUsage {
                        input: estimate_tokens(&request.system_text)
                            + estimate_tokens(&request.user_text),
                        output: estimate_tokens(&reply.text),
                    });
                    return Ok(ChatResponse {
                        text: reply.text,
                        backend_id: self.backend.id().to_string(),
                        latency_ms: started.elapsed().as_millis() as u64,
                        token_usage: usage,
                    });
                }
                Err(f) => f,
            };
            let (final_err, wait_hint) = match failure {
                BackendFailure::Malformed(msg) => return Err(GatewayError::MalformedRequest(msg)),
                BackendFailure::Fatal(err) => return Err(err),
                BackendFailure::Transient(msg) => (
                    GatewayError::BackendUnreachable { attempts: attempt, message: msg },
                    None,
                ),
                BackendFailure::RateLimited(after) => {
                    (GatewayError::RateLimited { retry_after: after }, after)
                }
            };
            if attempt >= self.retry.max_attempts {
                return Err(final_err);
            }
            tracing::debug!(attempt, error = %final_err, "retrying backend call");
            let delay = self.retry.delay(attempt).max(wait_hint.unwrap_or_default());
            if !delay.is_zero() {
                tokio::time::sleep(delay).await;
            }
        }
    }

    /// Runs all requests under the concurrency cap; results come back in
    /// request order.
    pub async fn complete_many(
        &self,
        requests: &[ChatRequest],
    ) -> Vec<Result<ChatResponse, GatewayError>> {
        futures::future::join_all(requests.iter().map(|r| self.complete(r))).await
    }

    pub async fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::MalformedRequest("no texts to embed".into()));
        }
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(GatewayError::MalformedRequest(format!("text {i} is empty")));
        }
        let _permit = self.gate.acquire().await.expect("gateway semaphore closed");
        let mut attempt = 0;
        let raw = loop {
            attempt += 1;
            match self.backend.embed(texts).await {
                Ok(v) => break v,
                Err(BackendFailure::Malformed(msg)) => {
                    return Err(GatewayError::MalformedRequest(msg))
                }
                Err(BackendFailure::Fatal(err)) => return Err(err),
                Err(other) => {
                    let err = match other {
                        BackendFailure::RateLimited(after) => {
                            GatewayError::RateLimited { retry_after: after }
                        }
                        BackendFailure::Transient(msg) => {
                            GatewayError::BackendUnreachable { attempts: attempt, message: msg }
                        }
                        _ => unreachable!(),
                    };
                    if attempt >= self.retry.max_attempts {
                        return Err(err);
                    }
                    let delay = self.retry.delay(attempt);
                    if !delay.is_zero() {
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        };
        if raw.len() != texts.len() {
            return Err(GatewayError::InvalidResponse(format!(
                "{} vectors for {} texts",
                raw.len(),
                texts.len()
            )));
        }
        let expected = raw[0].len();
        raw.into_iter()
            .map(|values| {
                if values.len() != expected {
                    return Err(GatewayError::DimensionMismatch { expected, got: values.len() });
                }
                EmbeddingVector::new(values)
            })
            .collect()
    }

    /// Cosine similarity between two texts, embedded in one call.
    pub async fn similarity(&self, a: &str, b: &str) -> Result<f64, GatewayError> {
        let v = self.embed(&[a.to_string(), b.to_string()]).await?;
        Ok(v[0].cosine(&v[1]))
    }

    /// Sends `request` and parses the reply. A reply that `parse` marks
    /// [`Attempt::Retry`] earns exactly one reprompt with the task's format
    /// reminder appended; a second failure is returned as is.
    pub async fn complete_with_reprompt<T, E: From<GatewayError>>(
        &self,
        request: &ChatRequest,
        task: TaskKind,
        mut parse: impl FnMut(&str) -> Attempt<T, E>,
    ) -> Result<Parsed<T>, E> {
        let first = self.complete(request).await?;
        match parse(&first.text) {
            Attempt::Done(value) => return Ok(Parsed { value, raw: first.text, reprompted: false }),
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(_) => {}
        }
        let mut again = request.clone();
        again.user_text.push_str(TemplateSet::format_reminder(task));
        let second = self.complete(&again).await?;
        match parse(&second.text) {
            Attempt::Done(value) => Ok(Parsed { value, raw: second.text, reprompted: true }),
            Attempt::Retry(e) | Attempt::Fail(e) => Err(e),
        }
    }

    /// Renders the named template and builds a request for it.
    pub fn request(
        &self,
        task: TaskKind,
        vars: &[(&str, &str)],
    ) -> Result<ChatRequest, GatewayError> {
        let template = self.templates.get(task);
        let body = template.render_pairs(vars)?;
        Ok(ChatRequest::new(template.system.clone(), body))
    }
}
