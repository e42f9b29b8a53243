//! Minimal blocking JSON-over-HTTP client shared by the remote backends.

use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("invalid response body: {0}")]
    Decode(String),
}

impl HttpError {
    /// Whether a retry has a chance of succeeding.
    pub fn is_transient(&self) -> bool {
        match self {
            HttpError::Timeout | HttpError::Transport(_) => true,
            HttpError::Status { status, .. } => *status == 429 || *status >= 500,
            HttpError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    auth_token: Option<String>,
}

impl JsonClient {
    pub fn new(timeout: Duration, auth_token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        JsonClient { agent, auth_token }
    }

    /// Reads the bearer token from the named environment variable, if any.
    pub fn from_env(timeout: Duration, auth_env: Option<&str>) -> Self {
        let token = auth_env.and_then(|name| std::env::var(name).ok());
        JsonClient::new(timeout, token)
    }

    pub fn post(&self, url: &str, body: &Value) -> Result<Value, HttpError> {
        let mut req = self.agent.post(url).header("content-type", "application/json");
        if let Some(token) = &self.auth_token {
            req = req.header("authorization", &format!("Bearer {token}"));
        }
        let payload = serde_json::to_vec(body).map_err(|e| HttpError::Decode(e.to_string()))?;
        let mut resp = req.send(&payload[..]).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(classify)?;
        if !(200..300).contains(&status) {
            return Err(HttpError::Status { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| HttpError::Decode(e.to_string()))
    }
}

fn classify(e: ureq::Error) -> HttpError {
    match e {
        ureq::Error::Timeout(_) => HttpError::Timeout,
        ureq::Error::StatusCode(status) => HttpError::Status {
            status,
            body: String::new(),
        },
        other => HttpError::Transport(other.to_string()),
    }
}
