use std::path::Path;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine as _;
use serde_json::{json, Value};

use super::{ChatBackend, ChatReply, ChatRequest, ClientError, Role, Usage};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "SAP_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpBackendConfig {
    pub url: String,
    pub model: String,
    pub attempts: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
    pub api_key: Option<String>,
}

impl HttpBackendConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            url: url.into(),
            model: model.into(),
            attempts: 3,
            backoff_base: Duration::from_millis(500),
            timeout: Duration::from_secs(120),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

/// Chat-completions client for one endpoint. Transport errors, 429 and 5xx
/// responses are retried with exponential backoff; other statuses fail fast.
pub struct HttpBackend {
    config: HttpBackendConfig,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, ClientError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Transport { attempts: 0, message: e.to_string() })?;
        Ok(HttpBackend { config, client })
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn wire_body(&self, req: &ChatRequest) -> Result<Value, ClientError> {
        let images = req
            .image_refs
            .iter()
            .map(|r| image_url(r))
            .collect::<Result<Vec<_>, _>>()?;
        let first_user = req.messages.iter().position(|m| m.role == Role::User);
        let messages: Vec<Value> = req
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                };
                if Some(i) == first_user && !images.is_empty() {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    parts.extend(images.iter().map(|u| json!({"type": "image_url", "image_url": {"url": u}})));
                    json!({"role": role, "content": parts})
                } else {
                    json!({"role": role, "content": m.text})
                }
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }
}

fn image_url(source: &str) -> Result<String, ClientError> {
    if ["http://", "https://", "data:"].iter().any(|p| source.starts_with(p)) {
        return Ok(source.to_string());
    }
    let path = Path::new(source);
    let bytes = std::fs::read(path).map_err(|e| ClientError::Image(format!("{source}: {e}")))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    Ok(format!("data:{mime};base64,{encoded}"))
}

fn parse_reply(payload: &Value) -> Result<ChatReply, ClientError> {
    let content = payload
        .pointer("/choices/0/message/content")
        .ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))?;
    let content = match content {
        Value::String(s) => s.clone(),
        // Some servers return content parts even for text-only replies.
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join(""),
        other => return Err(ClientError::Malformed(format!("unexpected content {other}"))),
    };
    let usage = payload.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(ChatReply { content, usage })
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn chat(&self, req: &ChatRequest) -> Result<ChatReply, ClientError> {
        let body = self.wire_body(req)?;
        let attempts = self.config.attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            if attempt > 1 {
                let delay = self.config.backoff_base * 2u32.saturating_pow(attempt - 2);
                tokio::time::sleep(delay).await;
            }
            let mut call = self.client.post(&self.config.url).json(&body);
            if let Some(key) = &self.config.api_key {
                call = call.bearer_auth(key);
            }
            match call.send().await {
                Err(e) => {
                    tracing::debug!(attempt, error = %e, "chat request failed");
                    last = Some(ClientError::Transport { attempts: attempt, message: e.to_string() });
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let payload: Value = resp
                            .json()
                            .await
                            .map_err(|e| ClientError::Malformed(e.to_string()))?;
                        return parse_reply(&payload);
                    }
                    let body = resp.text().await.unwrap_or_default();
                    let err = ClientError::Status { status: status.as_u16(), attempts: attempt, body };
                    if !(status.is_server_error() || status.as_u16() == 429) {
                        return Err(err);
                    }
                    tracing::debug!(attempt, status = status.as_u16(), "retryable status");
                    last = Some(err);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}
