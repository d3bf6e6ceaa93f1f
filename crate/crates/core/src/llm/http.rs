//! Blocking HTTP providers: the OpenAI-compatible wire shape
//! (`/chat/completions`, `/embeddings`) and a local-inference shape
//! (`/api/chat`, `/api/embeddings`, as served by Ollama and compatible
//! runtimes).

use super::{ChatReply, ChatRequest, LlmError, Provider, Usage};
use serde_json::{json, Value};
use std::time::Duration;
use ureq::Agent;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireShape {
    OpenAi,
    Local,
}

pub struct HttpProvider {
    name: String,
    shape: WireShape,
    base_url: String,
    api_key: Option<String>,
    agent: Agent,
}

impl HttpProvider {
    pub fn new(shape: WireShape, base_url: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let name = match shape {
            WireShape::OpenAi => "openai",
            WireShape::Local => "local",
        };
        Self {
            name: name.into(),
            shape,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            agent,
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let url = format!("{}{}", self.base_url, path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(transport_error)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport_error)?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Provider { status: Some(status), message: error_message(&text) });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Provider {
            status: Some(status),
            message: format!("malformed response body: {e}"),
        })
    }
}

fn transport_error(e: ureq::Error) -> LlmError {
    match e {
        ureq::Error::Timeout(_) => LlmError::Timeout,
        other => LlmError::Transport(other.to_string()),
    }
}

fn error_message(body: &str) -> String {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| {
            v.pointer("/error/message")
                .or_else(|| v.get("error"))
                .and_then(Value::as_str)
                .map(str::to_string)
        })
        .unwrap_or_else(|| body.chars().take(500).collect())
}

fn missing(field: &str) -> LlmError {
    LlmError::Provider { status: None, message: format!("response lacks `{field}`") }
}

fn vector(value: Option<&Value>, field: &str) -> Result<Vec<f64>, LlmError> {
    value
        .and_then(Value::as_array)
        .ok_or_else(|| missing(field))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| missing(field)))
        .collect()
}

impl Provider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatReply, LlmError> {
        match self.shape {
            WireShape::OpenAi => {
                let mut body = json!({ "model": request.model, "messages": request.messages });
                if let Some(t) = request.temperature {
                    body["temperature"] = json!(t);
                }
                let v = self.post("/chat/completions", &body)?;
                let content = v
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| missing("choices[0].message.content"))?;
                let usage = v.get("usage").map(|u| Usage {
                    prompt_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
                    completion_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
                });
                Ok(ChatReply { content: content.to_string(), usage })
            }
            WireShape::Local => {
                let mut body = json!({ "model": request.model, "messages": request.messages, "stream": false });
                if let Some(t) = request.temperature {
                    body["options"] = json!({ "temperature": t });
                }
                let v = self.post("/api/chat", &body)?;
                let content = v
                    .pointer("/message/content")
                    .and_then(Value::as_str)
                    .ok_or_else(|| missing("message.content"))?;
                let usage = v.get("prompt_eval_count").map(|p| Usage {
                    prompt_tokens: p.as_u64().unwrap_or(0),
                    completion_tokens: v["eval_count"].as_u64().unwrap_or(0),
                });
                Ok(ChatReply { content: content.to_string(), usage })
            }
        }
    }

    fn embed(&self, model: &str, text: &str) -> Result<Vec<f64>, LlmError> {
        match self.shape {
            WireShape::OpenAi => {
                let v = self.post("/embeddings", &json!({ "model": model, "input": text }))?;
                vector(v.pointer("/data/0/embedding"), "data[0].embedding")
            }
            WireShape::Local => {
                let v = self.post("/api/embeddings", &json!({ "model": model, "prompt": text }))?;
                vector(v.get("embedding"), "embedding")
            }
        }
    }
}
