//! Deterministic offline provider.
//!
//! Replies are resolved in this order: exact prompt hash, responder
//! closure, substring rules (first match wins), FIFO queue, default reply.
//! Embeddings are derived from a seeded hash, so identical text always maps
//! to the identical vector.

use super::{ChatReply, ChatRequest, LlmError, Provider};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

type Responder = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Whole-text hash into a unit vector; unrelated texts are near-orthogonal.
    #[default]
    Hash,
    /// Signed feature hashing of lower-cased word tokens; texts sharing words
    /// land close together.
    BagOfWords,
}

/// Substring rule. `contains` is matched against the first user turn and
/// `system_contains` against the system prompt; both must match when set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub system_contains: Option<String>,
    pub response: String,
}

/// Serializable mock configuration, loadable from a JSON script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockScript {
    pub prompt_hashes: HashMap<String, String>,
    pub rules: Vec<MockRule>,
    pub queue: Vec<String>,
    pub default: Option<String>,
    pub embedding_mode: EmbeddingMode,
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            prompt_hashes: HashMap::new(),
            rules: Vec::new(),
            queue: Vec::new(),
            default: None,
            embedding_mode: EmbeddingMode::Hash,
            embedding_dim: 16,
            seed: 0,
        }
    }
}

pub struct MockProvider {
    name: String,
    prompt_hashes: HashMap<String, String>,
    responder: Option<Responder>,
    rules: Vec<MockRule>,
    queue: Mutex<VecDeque<String>>,
    default: Option<String>,
    embedding_mode: EmbeddingMode,
    embedding_dim: usize,
    seed: u64,
    transport_failures: AtomicUsize,
    calls: AtomicUsize,
}

impl Default for MockProvider {
    fn default() -> Self {
        Self::new()
    }
}

/// Hash identifying a prompt: SHA-256 over the model-independent message
/// list (roles and contents).
pub fn prompt_hash(request: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    for m in &request.messages {
        hasher.update(serde_json::to_vec(&m.role).expect("role serializes"));
        hasher.update([0]);
        hasher.update(m.content.as_bytes());
        hasher.update([0]);
    }
    hex::encode(hasher.finalize())
}

impl MockProvider {
    pub fn new() -> Self {
        Self::from_script(MockScript::default())
    }

    pub fn from_script(script: MockScript) -> Self {
        Self {
            name: "mock".into(),
            prompt_hashes: script.prompt_hashes,
            responder: None,
            rules: script.rules,
            queue: Mutex::new(script.queue.into()),
            default: script.default,
            embedding_mode: script.embedding_mode,
            embedding_dim: script.embedding_dim.max(1),
            seed: script.seed,
            transport_failures: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_prompt_hash_response(mut self, request: &ChatRequest, response: impl Into<String>) -> Self {
        self.prompt_hashes.insert(prompt_hash(request), response.into());
        self
    }

    pub fn with_responder(
        mut self,
        responder: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.responder = Some(Box::new(responder));
        self
    }

    pub fn with_rule(mut self, contains: impl Into<String>, response: impl Into<String>) -> Self {
        self.rules.push(MockRule {
            contains: Some(contains.into()),
            system_contains: None,
            response: response.into(),
        });
        self
    }

    pub fn with_system_rule(
        mut self,
        system_contains: impl Into<String>,
        contains: Option<String>,
        response: impl Into<String>,
    ) -> Self {
        self.rules.push(MockRule {
            contains,
            system_contains: Some(system_contains.into()),
            response: response.into(),
        });
        self
    }

    pub fn with_queue<I, S>(self, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.queue
            .lock()
            .expect("fresh mutex")
            .extend(replies.into_iter().map(Into::into));
        self
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = Some(reply.into());
        self
    }

    pub fn with_embedding(mut self, mode: EmbeddingMode, dim: usize) -> Self {
        self.embedding_mode = mode;
        self.embedding_dim = dim.max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The next `n` calls (chat or embed) fail with a transport error.
    pub fn with_transport_failures(self, n: usize) -> Self {
        self.transport_failures.store(n, Ordering::SeqCst);
        self
    }

    /// Provider-level calls, including failed ones.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn inject_failure(&self) -> Result<(), LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let injected = self
            .transport_failures
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1));
        match injected {
            Ok(_) => Err(LlmError::Transport("injected failure".into())),
            Err(_) => Ok(()),
        }
    }

    fn resolve(&self, request: &ChatRequest) -> Option<String> {
        if let Some(r) = self.prompt_hashes.get(&prompt_hash(request)) {
            return Some(r.clone());
        }
        if let Some(r) = self.responder.as_ref().and_then(|f| f(request)) {
            return Some(r);
        }
        let user = request.first_user();
        let system = request.system();
        let rule = self.rules.iter().find(|r| {
            r.contains.as_deref().is_none_or(|c| user.contains(c))
                && r.system_contains.as_deref().is_none_or(|c| system.contains(c))
        });
        if let Some(rule) = rule {
            return Some(rule.response.clone());
        }
        if let Some(r) = self.queue.lock().unwrap_or_else(|e| e.into_inner()).pop_front() {
            return Some(r);
        }
        self.default.clone()
    }

    fn hash_embedding(&self, text: &str) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.embedding_dim);
        let mut block = 0u64;
        while values.len() < self.embedding_dim {
            let digest = Sha256::new()
                .chain_update(self.seed.to_le_bytes())
                .chain_update(block.to_le_bytes())
                .chain_update(text.as_bytes())
                .finalize();
            for pair in digest.chunks_exact(2) {
                if values.len() == self.embedding_dim {
                    break;
                }
                let raw = u16::from_le_bytes([pair[0], pair[1]]);
                values.push(f64::from(raw) / f64::from(u16::MAX) * 2.0 - 1.0);
            }
            block += 1;
        }
        values
    }

    fn bag_of_words_embedding(&self, text: &str) -> Vec<f64> {
        let mut values = vec![0.0; self.embedding_dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let token = token.to_lowercase();
            let digest = Sha256::new()
                .chain_update(self.seed.to_le_bytes())
                .chain_update(token.as_bytes())
                .finalize();
            let bucket = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
            let sign = if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
            values[(bucket % self.embedding_dim as u64) as usize] += sign;
        }
        values
    }
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl Provider for MockProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, LlmError> {
        self.inject_failure()?;
        self.resolve(request)
            .map(ChatReply::text)
            .ok_or_else(|| LlmError::Provider {
                status: None,
                message: format!("no scripted reply for prompt {}", &prompt_hash(request)[..12]),
            })
    }

    fn embed(&self, _model: &str, text: &str) -> Result<Vec<f64>, LlmError> {
        self.inject_failure()?;
        let raw = match self.embedding_mode {
            EmbeddingMode::Hash => self.hash_embedding(text),
            EmbeddingMode::BagOfWords => self.bag_of_words_embedding(text),
        };
        Ok(normalize(raw))
    }
}
