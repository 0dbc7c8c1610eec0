//! Minimal client for OpenAI-compatible chat-completion endpoints that accept
//! an image content part.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::prompt::PromptBundle;

#[derive(Debug, thiserror::Error)]
pub enum VlmError {
    #[error("endpoint configuration: {0}")]
    Config(String),
    #[error("request failed: {0}")]
    Transport(String),
    #[error("endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed reply: {0}")]
    Reply(String),
}

impl VlmError {
    /// Network failures, timeouts and server-side errors are worth one more try.
    pub fn is_retryable(&self) -> bool {
        match self {
            VlmError::Transport(_) => true,
            VlmError::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_timeout() -> f64 {
    30.0
}

fn default_max_tokens() -> u32 {
    512
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_s: default_timeout(),
            max_tokens: default_max_tokens(),
        }
    }

    /// Full request URL, checked before anything goes on the wire.
    pub fn completions_url(&self) -> Result<url::Url, VlmError> {
        let base = url::Url::parse(&self.base_url).map_err(|e| VlmError::Config(format!("{}: {e}", self.base_url)))?;
        if !matches!(base.scheme(), "http" | "https") || base.host_str().is_none() {
            return Err(VlmError::Config(format!("unsupported endpoint {}", self.base_url)));
        }
        let joined = format!("{}/chat/completions", base.as_str().trim_end_matches('/'));
        url::Url::parse(&joined).map_err(|e| VlmError::Config(e.to_string()))
    }

    fn api_key(&self) -> Result<Option<String>, VlmError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| VlmError::Config(format!("environment variable {var} is not set"))),
        }
    }

    pub fn validate(&self) -> Result<(), VlmError> {
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(VlmError::Config(format!("timeout must be positive, got {}", self.timeout_s)));
        }
        self.completions_url()?;
        self.api_key()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VlmReply {
    pub text: String,
    /// Wall time from first send to the final reply, retries included.
    pub latency_s: f64,
}

pub fn request_body(bundle: &PromptBundle, endpoint: &EndpointConfig) -> Value {
    json!({
        "model": endpoint.model,
        "max_tokens": endpoint.max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": bundle.user_text()},
                {"type": "image_url", "image_url": {"url": bundle.image_data_url()}},
            ],
        }],
    })
}

fn reply_text(body: &str) -> Result<String, VlmError> {
    let v: Value = serde_json::from_str(body).map_err(|e| VlmError::Reply(e.to_string()))?;
    let content = &v["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Ok(s.clone()),
        // some servers return a list of typed parts
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n")),
        _ => Err(VlmError::Reply("no choices[0].message.content".into())),
    }
}

fn attempt(agent: &ureq::Agent, url: &str, key: Option<&str>, body: &Value) -> Result<String, VlmError> {
    let mut req = agent.post(url).header("Content-Type", "application/json");
    if let Some(k) = key {
        req = req.header("Authorization", &format!("Bearer {k}"));
    }
    let mut resp = req.send_json(body).map_err(|e| VlmError::Transport(e.to_string()))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| VlmError::Transport(e.to_string()))?;
    if status >= 400 {
        let body: String = text.chars().take(200).collect();
        return Err(if status < 500 {
            VlmError::Config(format!("HTTP {status}: {body}"))
        } else {
            VlmError::Http { status, body }
        });
    }
    reply_text(&text)
}

/// Sends one prompt and waits for the answer. Retryable failures get exactly
/// one more attempt.
pub fn vlm_request(bundle: &PromptBundle, endpoint: &EndpointConfig) -> Result<VlmReply, VlmError> {
    endpoint.validate()?;
    let url = endpoint.completions_url()?;
    let key = endpoint.api_key()?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_secs_f64(endpoint.timeout_s)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = request_body(bundle, endpoint);
    let started = Instant::now();
    let mut result = attempt(&agent, url.as_str(), key.as_deref(), &body);
    if let Err(e) = &result {
        if e.is_retryable() {
            log::warn!("planner request failed ({e}), retrying once");
            result = attempt(&agent, url.as_str(), key.as_deref(), &body);
        }
    }
    let text = result?;
    Ok(VlmReply { text, latency_s: started.elapsed().as_secs_f64() })
}
