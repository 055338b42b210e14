//! OpenAI-compatible JSON-over-HTTP chat and embedding clients.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{BackendError, ChatBackend, ChatRequest, ChatResponse, Usage};
use crate::embedding::EmbeddingBackend;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// e.g. `https://api.openai.com/v1`
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    60
}

fn client(timeout_secs: u64) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| BackendError::Fatal(format!("http client: {e}")))
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
) -> Result<serde_json::Value, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req
        .send()
        .map_err(|e| BackendError::Transient(format!("request to {url}: {e}")))?;
    let status = resp.status();
    if !status.is_success() {
        let body = resp.text().unwrap_or_default();
        let msg = format!("{url} returned {status}: {}", truncate(&body, 300));
        return Err(if matches!(status.as_u16(), 408 | 429 | 500..=599) {
            BackendError::Transient(msg)
        } else {
            BackendError::Fatal(msg)
        });
    }
    resp.json()
        .map_err(|e| BackendError::Transient(format!("decoding response from {url}: {e}")))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub struct OpenAiChat {
    endpoint: EndpointConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiChat {
    pub fn new(endpoint: EndpointConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = client(endpoint.timeout_secs)?;
        Ok(Self {
            endpoint,
            api_key,
            client,
        })
    }
}

impl ChatBackend for OpenAiChat {
    fn name(&self) -> &str {
        &self.endpoint.model
    }

    fn chat(&self, req: &ChatRequest<'_>) -> Result<ChatResponse, BackendError> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.endpoint.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": req.prompt}],
        });
        let v = post_json(&self.client, &url, self.api_key.as_deref(), &body)?;
        let text = v["choices"][0]["message"]["content"]
            .as_str()
            .ok_or_else(|| BackendError::Transient("response has no message content".into()))?
            .to_string();
        let usage = match (
            v["usage"]["prompt_tokens"].as_u64(),
            v["usage"]["completion_tokens"].as_u64(),
        ) {
            (Some(input_tokens), Some(output_tokens)) => Some(Usage {
                input_tokens,
                output_tokens,
            }),
            _ => None,
        };
        Ok(ChatResponse { text, usage })
    }
}

pub struct OpenAiEmbedder {
    endpoint: EndpointConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiEmbedder {
    pub fn new(endpoint: EndpointConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = client(endpoint.timeout_secs)?;
        Ok(Self {
            endpoint,
            api_key,
            client,
        })
    }
}

impl EmbeddingBackend for OpenAiEmbedder {
    fn name(&self) -> &str {
        &self.endpoint.model
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let url = format!("{}/embeddings", self.endpoint.base_url.trim_end_matches('/'));
        let body = json!({"model": self.endpoint.model, "input": text});
        let v = post_json(&self.client, &url, self.api_key.as_deref(), &body)?;
        let arr = v["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| BackendError::Transient("response has no embedding".into()))?;
        arr.iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| BackendError::Fatal("non-numeric embedding component".into()))
            })
            .collect()
    }
}
