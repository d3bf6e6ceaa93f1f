//! Provider-agnostic access to chat-completion and embedding endpoints.
//!
//! [`Gateway`] wraps a [`Provider`] with bounded retries, a concurrency
//! limiter, transcript recording and the structured-output loop used by every
//! model-facing step: ask, parse strictly, fall back to a lenient extraction,
//! and otherwise re-ask with a corrective turn up to `max_refinements` times.

pub mod config;
#[cfg(feature = "http")]
pub mod http;
mod limiter;
pub mod mock;
pub mod parse;
pub mod transcript;

pub use config::{ProviderConfig, ProviderKind};
pub use mock::{EmbeddingMode, MockProvider, MockScript};
pub use parse::{ParseOutcome, ResponseParser};
pub use transcript::{CallRecord, TranscriptSink};

use crate::prompts;
use limiter::Limiter;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider error{}: {message}", .status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Provider { status: Option<u16>, message: String },
    #[error("request timed out")]
    Timeout,
    #[error("operation not supported by provider: {0}")]
    Unsupported(String),
    #[error("no parseable reply after {} attempts: {last_error}", .attempts.len())]
    ParseFailure { attempts: Vec<ParseAttempt>, last_error: String },
}

impl LlmError {
    fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) | LlmError::Timeout => true,
            LlmError::Provider { status: Some(s), .. } => *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// A fully expanded request as handed to a provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
}

impl ChatRequest {
    pub fn system(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str())
    }

    pub fn last_user(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }

    /// The first user turn, i.e. the task prompt before any refinement.
    pub fn first_user(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatReply {
    pub content: String,
    pub usage: Option<Usage>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self { content: content.into(), usage: None }
    }
}

/// A chat or embedding backend.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, LlmError>;

    fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>, LlmError> {
        let _ = (model, text);
        Err(LlmError::Unsupported(format!("{} has no embedding endpoint", self.name())))
    }
}

/// One conversation: system prompt, user turns and the replies received so
/// far. Turns alternate user/assistant after the system prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub system_prompt: String,
    pub user_turns: Vec<String>,
    pub model_name: String,
    pub temperature: Option<f64>,
    pub raw_responses: Vec<String>,
}

impl ChatExchange {
    pub fn new(system_prompt: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_turns: vec![user.into()],
            model_name: String::new(),
            temperature: None,
            raw_responses: Vec::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: Option<f64>) -> Self {
        self.temperature = temperature;
        self
    }

    fn messages(&self) -> Vec<Message> {
        let mut messages = Vec::with_capacity(1 + 2 * self.user_turns.len());
        if !self.system_prompt.is_empty() {
            messages.push(Message { role: Role::System, content: self.system_prompt.clone() });
        }
        for (i, turn) in self.user_turns.iter().enumerate() {
            messages.push(Message { role: Role::User, content: turn.clone() });
            if let Some(reply) = self.raw_responses.get(i) {
                messages.push(Message { role: Role::Assistant, content: reply.clone() });
            }
        }
        messages
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_text: String,
    pub model_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseAttempt {
    pub response: String,
    pub outcome: ParseOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A chat exchange whose reply must satisfy a parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredRequest {
    pub exchange: ChatExchange,
    pub max_refinements: usize,
    pub parse_attempts: Vec<ParseAttempt>,
}

impl StructuredRequest {
    pub fn new(exchange: ChatExchange, max_refinements: usize) -> Self {
        Self { exchange, max_refinements, parse_attempts: Vec::new() }
    }

    /// Terminal outcome; `Failed` until a parse succeeds.
    pub fn outcome(&self) -> ParseOutcome {
        self.parse_attempts
            .last()
            .map_or(ParseOutcome::Failed, |a| a.outcome)
    }
}

/// A successfully parsed reply and the path that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Structured<T> {
    pub value: T,
    pub outcome: ParseOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayOptions {
    pub chat_model: String,
    pub embedding_model: String,
    pub max_refinements: usize,
    /// Total attempts per call for retryable failures.
    pub max_attempts: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Maximum number of requests in flight.
    pub concurrency: usize,
    /// Minimum spacing between request starts.
    pub min_interval_ms: u64,
    /// Temperature for prediction, proposal and evaluation prompts; `None`
    /// leaves the provider default.
    pub inference_temperature: Option<f64>,
    pub extraction_temperature: Option<f64>,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            chat_model: String::new(),
            embedding_model: String::new(),
            max_refinements: 12,
            max_attempts: 3,
            backoff_base_ms: 500,
            backoff_max_ms: 8_000,
            concurrency: 4,
            min_interval_ms: 0,
            inference_temperature: None,
            extraction_temperature: None,
        }
    }
}

/// Shared entry point for every model call. Cheap to share behind an `Arc`.
pub struct Gateway {
    provider: Arc<dyn Provider>,
    options: GatewayOptions,
    limiter: Limiter,
    transcript: Option<TranscriptSink>,
    chat_calls: AtomicUsize,
    embed_calls: AtomicUsize,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.name())
            .field("options", &self.options)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>, options: GatewayOptions) -> Self {
        let limiter = Limiter::new(options.concurrency, Duration::from_millis(options.min_interval_ms));
        Self {
            provider,
            options,
            limiter,
            transcript: None,
            chat_calls: AtomicUsize::new(0),
            embed_calls: AtomicUsize::new(0),
        }
    }

    /// Gateway over a mock provider with no backoff delay.
    pub fn mock(provider: MockProvider) -> Self {
        let options = GatewayOptions {
            chat_model: "mock".into(),
            embedding_model: "mock-embedding".into(),
            backoff_base_ms: 0,
            backoff_max_ms: 0,
            ..GatewayOptions::default()
        };
        Self::new(Arc::new(provider), options)
    }

    pub fn with_transcript(mut self, sink: TranscriptSink) -> Self {
        self.transcript = Some(sink);
        self
    }

    pub fn options(&self) -> &GatewayOptions {
        &self.options
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn transcript(&self) -> Option<&TranscriptSink> {
        self.transcript.as_ref()
    }

    /// Completion calls issued so far (successful or not, retries excluded).
    pub fn chat_calls(&self) -> usize {
        self.chat_calls.load(Ordering::SeqCst)
    }

    pub fn embed_calls(&self) -> usize {
        self.embed_calls.load(Ordering::SeqCst)
    }

    pub fn structured(&self, system: &str, user: String, temperature: Option<f64>) -> StructuredRequest {
        StructuredRequest::new(
            ChatExchange::new(system, user).with_temperature(temperature),
            self.options.max_refinements,
        )
    }

    fn with_retry<T>(&self, mut call: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let attempts = self.options.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self.limiter.acquire();
                call()
            };
            match result {
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self
                        .options
                        .backoff_base_ms
                        .saturating_mul(1 << (attempt - 1).min(16))
                        .min(self.options.backoff_max_ms);
                    log::warn!("{} call failed ({e}); retry {attempt}/{attempts} in {delay} ms", self.provider.name());
                    limiter::sleep(Duration::from_millis(delay));
                }
                other => return other,
            }
        }
    }

    /// Sends the exchange and appends the reply to `raw_responses`.
    pub fn complete(&self, exchange: &mut ChatExchange) -> Result<String, LlmError> {
        match exchange.user_turns.last() {
            None => return Err(LlmError::Precondition("no user turn".into())),
            Some(turn) if turn.trim().is_empty() => {
                return Err(LlmError::Precondition("empty user turn".into()))
            }
            Some(_) => {}
        }
        if exchange.model_name.is_empty() {
            exchange.model_name = self.options.chat_model.clone();
        }
        let request = ChatRequest {
            model: exchange.model_name.clone(),
            messages: exchange.messages(),
            temperature: exchange.temperature,
        };
        self.chat_calls.fetch_add(1, Ordering::SeqCst);
        let started = limiter::now();
        let result = self.with_retry(|| self.provider.chat(&request));
        if let Some(sink) = &self.transcript {
            sink.record(CallRecord::new(
                self.provider.name(),
                &request,
                &result,
                limiter::elapsed_ms(started),
            ));
        }
        let reply = result?;
        exchange.raw_responses.push(reply.content.clone());
        Ok(reply.content)
    }

    /// Runs the ask / parse / refine loop. At most `1 + max_refinements`
    /// completion calls are made.
    pub fn complete_structured<P: ResponseParser>(
        &self,
        request: &mut StructuredRequest,
        parser: &P,
    ) -> Result<Structured<P::Output>, LlmError> {
        let mut last_error = String::new();
        for round in 0..=request.max_refinements {
            if round > 0 {
                request
                    .exchange
                    .user_turns
                    .push(prompts::fill(prompts::REFINEMENT_USER, &[("error", &last_error)]));
            }
            let response = self.complete(&mut request.exchange)?;
            let parsed = match parser.strict(&response) {
                Ok(v) => Ok((v, ParseOutcome::ParsedFormatted)),
                Err(strict_error) => match parser.fallback(&response) {
                    Ok(v) => Ok((v, ParseOutcome::ParsedWithFallback)),
                    Err(fallback_error) => Err(if fallback_error.is_empty() {
                        strict_error
                    } else {
                        fallback_error
                    }),
                },
            };
            match parsed {
                Ok((value, outcome)) => {
                    request.parse_attempts.push(ParseAttempt { response, outcome, error: None });
                    return Ok(Structured { value, outcome });
                }
                Err(error) => {
                    request.parse_attempts.push(ParseAttempt {
                        response,
                        outcome: ParseOutcome::Failed,
                        error: Some(error.clone()),
                    });
                    last_error = error;
                }
            }
        }
        Err(LlmError::ParseFailure { attempts: request.parse_attempts.clone(), last_error })
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, LlmError> {
        if text.trim().is_empty() {
            return Err(LlmError::Precondition("cannot embed empty text".into()));
        }
        self.embed_calls.fetch_add(1, Ordering::SeqCst);
        let model = self.options.embedding_model.clone();
        let values = self.with_retry(|| self.provider.embed(&model, text))?;
        if values.is_empty() {
            return Err(LlmError::Provider { status: None, message: "empty embedding".into() });
        }
        Ok(EmbeddingVector { values, source_text: text.to_string(), model_name: model })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::parse::JsonObjectParser;

    #[test]
    fn scripted_echo() {
        let gw = Gateway::mock(MockProvider::new().with_prompt_hash_response(
            &ChatRequest {
                model: "mock".into(),
                messages: vec![Message { role: Role::User, content: "hello".into() }],
                temperature: None,
            },
            "yes",
        ));
        let mut ex = ChatExchange::new("", "hello");
        assert_eq!(gw.complete(&mut ex).unwrap(), "yes");
        assert_eq!(ex.raw_responses, ["yes"]);
    }

    #[test]
    fn empty_user_turn_is_a_precondition_error() {
        let gw = Gateway::mock(MockProvider::new().with_default("x"));
        let mut ex = ChatExchange::new("sys", "  ");
        assert!(matches!(gw.complete(&mut ex), Err(LlmError::Precondition(_))));
        assert_eq!(gw.chat_calls(), 0);
    }

    #[test]
    fn transport_failures_are_retried_then_surface() {
        let provider = MockProvider::new().with_default("ok").with_transport_failures(3);
        let gw = Gateway::mock(provider);
        let mut ex = ChatExchange::new("", "q");
        assert!(matches!(gw.complete(&mut ex), Err(LlmError::Transport(_))));
        assert!(ex.raw_responses.is_empty());
        // The fourth provider call succeeds.
        assert_eq!(gw.complete(&mut ex).unwrap(), "ok");
    }

    #[test]
    fn two_failures_are_absorbed_by_retries() {
        let mock = Arc::new(MockProvider::new().with_default("ok").with_transport_failures(2));
        let gw = Gateway::new(mock.clone(), GatewayOptions { backoff_base_ms: 0, ..Default::default() });
        assert_eq!(gw.complete(&mut ChatExchange::new("", "q")).unwrap(), "ok");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn valid_json_first_time_is_formatted() {
        let gw = Gateway::mock(MockProvider::new().with_default(r#"{"a": 1}"#));
        let mut req = gw.structured("sys", "q".into(), None);
        let out = gw.complete_structured(&mut req, &JsonObjectParser).unwrap();
        assert_eq!(out.outcome, ParseOutcome::ParsedFormatted);
        assert_eq!(out.value["a"], 1);
        assert_eq!(gw.chat_calls(), 1);
        assert_eq!(req.outcome(), ParseOutcome::ParsedFormatted);
    }

    #[test]
    fn prose_wrapped_json_uses_fallback() {
        let reply = "Sure! Here is the graph:\n{\"a\": {\"b\": \"}\"}}\nHope this helps.";
        let gw = Gateway::mock(MockProvider::new().with_default(reply));
        let mut req = gw.structured("sys", "q".into(), None);
        let out = gw.complete_structured(&mut req, &JsonObjectParser).unwrap();
        assert_eq!(out.outcome, ParseOutcome::ParsedWithFallback);
        let expected: serde_json::Value = serde_json::from_str(r#"{"a": {"b": "}"}}"#).unwrap();
        assert_eq!(serde_json::Value::Object(out.value), expected);
    }

    #[test]
    fn never_valid_reply_exhausts_refinements() {
        let gw = Gateway::mock(MockProvider::new().with_default("I cannot answer that."));
        let mut req = gw.structured("sys", "q".into(), None);
        match gw.complete_structured(&mut req, &JsonObjectParser) {
            Err(LlmError::ParseFailure { attempts, .. }) => assert_eq!(attempts.len(), 13),
            other => panic!("expected parse failure, got {other:?}"),
        }
        assert_eq!(gw.chat_calls(), 13);
        assert_eq!(req.exchange.user_turns.len(), 13);
        assert!(req.exchange.user_turns[1].starts_with("Your previous answer could not be parsed"));
        assert_eq!(req.outcome(), ParseOutcome::Failed);
    }

    #[test]
    fn refinement_recovers_on_later_turn() {
        let gw = Gateway::mock(MockProvider::new().with_queue(["nope", "still nope", "{\"ok\": true}"]));
        let mut req = gw.structured("sys", "q".into(), None);
        let out = gw.complete_structured(&mut req, &JsonObjectParser).unwrap();
        assert_eq!(out.outcome, ParseOutcome::ParsedFormatted);
        assert_eq!(gw.chat_calls(), 3);
        assert_eq!(req.parse_attempts.len(), 3);
    }

    #[test]
    fn zero_refinements_means_one_call() {
        let gw = Gateway::mock(MockProvider::new().with_default("nope"));
        let mut req = StructuredRequest::new(ChatExchange::new("s", "q"), 0);
        assert!(gw.complete_structured(&mut req, &JsonObjectParser).is_err());
        assert_eq!(gw.chat_calls(), 1);
    }

    #[test]
    fn embeddings_are_deterministic_and_distinct() {
        let gw = Gateway::mock(MockProvider::new());
        let a = gw.embed("severity of the pandemic").unwrap();
        let b = gw.embed("severity of the pandemic").unwrap();
        let c = gw.embed("oil price war").unwrap();
        assert_eq!(a.values.len(), 16);
        assert_eq!(a, b);
        assert!(a.values.iter().zip(&c.values).any(|(x, y)| x != y));
        let norm: f64 = a.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        assert!(matches!(gw.embed(""), Err(LlmError::Precondition(_))));
    }
}
