use std::time::Duration;

use base64::Engine;
use serde_json::{json, Value};

use super::{BackendConfig, BackendFailure, ChatBackend, ChatRequest, LlmError};

/// Client for `POST {base_url}/chat/completions`.
pub struct OpenAiBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl OpenAiBackend {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(format!("http client: {e}")))?;
        Ok(OpenAiBackend {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            api_key,
        })
    }

    /// Reads the key from the variable named by `api_key_env`; no variable
    /// name means no authorization header.
    pub fn from_config(c: &BackendConfig) -> Result<Self, LlmError> {
        if c.base_url.is_empty() {
            return Err(LlmError::Config(format!("backend {} has no base_url", c.backend_id)));
        }
        let api_key = match &c.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                LlmError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Self::new(&c.base_url, &c.model, api_key, Duration::from_secs(c.timeout_s.unwrap_or(120)))
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        let b64 = base64::engine::general_purpose::STANDARD;
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| {
                if m.images.is_empty() {
                    json!({"role": m.role.as_str(), "content": m.text})
                } else {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    parts.extend(m.images.iter().map(|img| {
                        json!({
                            "type": "image_url",
                            "image_url": {"url": format!("data:image/png;base64,{}", b64.encode(img))}
                        })
                    }));
                    json!({"role": m.role.as_str(), "content": parts})
                }
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }
}

/// Extracts the reply text or classifies the problem.
pub fn parse_completion(body: &Value) -> Result<String, BackendFailure> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendFailure::Transient("response has no choices".into()))?;
    let msg = &choice["message"];
    if let Some(r) = msg.get("refusal").and_then(Value::as_str) {
        return Err(BackendFailure::Refusal(r.to_string()));
    }
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(BackendFailure::Refusal("content_filter".into()));
    }
    match msg.get("content") {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Array(parts)) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        _ => Err(BackendFailure::Transient("response has no message content".into())),
    }
}

impl ChatBackend for OpenAiBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn dispatch(&self, req: &ChatRequest) -> Result<String, BackendFailure> {
        let mut call = self.client.post(&self.endpoint).json(&self.request_body(req));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call
            .send()
            .map_err(|e| BackendFailure::Transient(format!("send: {e}")))?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| BackendFailure::Transient(format!("read body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendFailure::Transient(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(BackendFailure::Fatal(format!("HTTP {status}: {text}")));
        }
        let body: Value = serde_json::from_str(&text)
            .map_err(|e| BackendFailure::Transient(format!("malformed JSON: {e}")))?;
        parse_completion(&body)
    }
}
