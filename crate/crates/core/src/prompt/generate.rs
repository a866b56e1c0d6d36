use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use super::PredictedLabels;

pub const DEFAULT_TIMEOUT_SECS: u64 = 30;
pub const DEFAULT_TOKEN_ENV: &str = "MEDREF_API_KEY";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response body: {0}")]
    MalformedBody(String),
}

/// Chat-completion endpoint settings. The token itself never lives here, only
/// the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub token_env: String,
    pub timeout_secs: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "medref-generator".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: DEFAULT_TIMEOUT_SECS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Rendered system prompt.
    pub prompt: String,
    /// Latest patient utterance, sent as the user message.
    pub user_message: String,
    pub labels: PredictedLabels,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerationClient {
    Stub,
    Http(EndpointConfig),
}

/// Deterministic offline reply built from the predicted labels.
pub fn stub_response(labels: &PredictedLabels) -> String {
    let acts = if labels.acts.is_empty() {
        "Inform".to_string()
    } else {
        labels.acts.join(", ")
    };
    if labels.entities.is_empty() {
        format!("[{acts}] Could you describe your symptoms in more detail?")
    } else {
        format!("[{acts}] Let us talk about {}.", labels.entities.join(", "))
    }
}

pub fn generate_response(
    req: &GenerationRequest,
    client: &GenerationClient,
) -> Result<String, GenerationError> {
    if req.prompt.is_empty() {
        return Err(GenerationError::EmptyPrompt);
    }
    match client {
        GenerationClient::Stub => Ok(stub_response(&req.labels)),
        GenerationClient::Http(cfg) => post_chat(req, cfg),
    }
}

fn post_chat(req: &GenerationRequest, cfg: &EndpointConfig) -> Result<String, GenerationError> {
    let http = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(cfg.timeout_secs))
        .build()
        .map_err(|e| GenerationError::Transport(e.to_string()))?;
    let body = json!({
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": req.prompt},
            {"role": "user", "content": req.user_message},
        ],
    });
    let mut request = http.post(&cfg.url).json(&body);
    if let Ok(token) = std::env::var(&cfg.token_env) {
        request = request.bearer_auth(token);
    }
    let response = request
        .send()
        .map_err(|e| GenerationError::Transport(e.to_string()))?;
    let status = response.status();
    let text = response
        .text()
        .map_err(|e| GenerationError::Transport(e.to_string()))?;
    if !status.is_success() {
        return Err(GenerationError::Status {
            status: status.as_u16(),
            body: text,
        });
    }
    let parsed: Value =
        serde_json::from_str(&text).map_err(|e| GenerationError::MalformedBody(e.to_string()))?;
    parsed
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| GenerationError::MalformedBody("missing choices[0].message.content".into()))
}
