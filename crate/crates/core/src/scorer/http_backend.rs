//! OpenAI-style HTTP backend.
//!
//! Option scoring uses the completions endpoint with `echo` so the server
//! returns log-probabilities for the prompt tokens; the tokens whose text
//! offset falls inside the option continuation are summed. Generation uses
//! the chat completions endpoint.

use serde_json::{json, Value};

use super::templates::continuation;
use super::{BackendError, Generation, GenerationRequest, LanguageModel, ScoreRequest, TokenScore};
use crate::http::{HttpError, JsonClient};

#[derive(Debug, Clone)]
pub struct HttpBackend {
    /// Base URL, e.g. `http://localhost:8000`.
    pub endpoint: String,
    pub model: String,
    pub max_tokens: u32,
    client: JsonClient,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, client: JsonClient) -> Self {
        HttpBackend {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            model: model.into(),
            max_tokens: 512,
            client,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.endpoint)
    }
}

fn backend_error(e: HttpError) -> BackendError {
    match e {
        HttpError::Timeout => BackendError::Timeout,
        HttpError::Status { status, body } if status == 400 && body.contains("logprob") => {
            BackendError::NoLogprobs
        }
        e if e.is_transient() => BackendError::Transient(e.to_string()),
        HttpError::Decode(msg) => BackendError::Invalid(msg),
        e => BackendError::Refused(e.to_string()),
    }
}

/// Sums `-logprob` over echoed tokens starting inside `[start, end)` (char offsets).
pub(crate) fn sum_continuation(
    logprobs: &Value,
    start: usize,
    end: usize,
) -> Result<TokenScore, BackendError> {
    let token_logprobs = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or(BackendError::NoLogprobs)?;
    let offsets = logprobs
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or_else(|| BackendError::Invalid("missing text_offset".into()))?;
    if offsets.len() != token_logprobs.len() {
        return Err(BackendError::Invalid("text_offset/token_logprobs length mismatch".into()));
    }
    let mut nll = 0.0;
    let mut tokens = 0u32;
    for (lp, off) in token_logprobs.iter().zip(offsets) {
        let off = off
            .as_u64()
            .ok_or_else(|| BackendError::Invalid("non-integer text_offset".into()))? as usize;
        if off < start || off >= end {
            continue;
        }
        let lp = lp
            .as_f64()
            .ok_or_else(|| BackendError::Invalid("null logprob inside option".into()))?;
        nll -= lp;
        tokens += 1;
    }
    if tokens == 0 {
        return Err(BackendError::Invalid("no tokens fell inside the option".into()));
    }
    Ok(TokenScore { nll: nll.max(0.0), tokens })
}

impl LanguageModel for HttpBackend {
    fn identity(&self) -> String {
        format!("http/{}/{}", self.endpoint, self.model)
    }

    fn score_option(
        &self,
        req: &ScoreRequest,
        prompt: &str,
        option_index: usize,
    ) -> Result<TokenScore, BackendError> {
        let option = req
            .options
            .get(option_index)
            .ok_or_else(|| BackendError::Invalid(format!("no option {option_index}")))?;
        let full = format!("{prompt}{}", continuation(option));
        let body = json!({
            "model": self.model,
            "prompt": full,
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": 1,
        });
        let resp = self
            .client
            .post(&self.url("/v1/completions"), &body)
            .map_err(backend_error)?;
        let logprobs = resp
            .pointer("/choices/0/logprobs")
            .filter(|v| !v.is_null())
            .ok_or(BackendError::NoLogprobs)?;
        let start = prompt.chars().count();
        let end = full.chars().count();
        sum_continuation(logprobs, start, end)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<Generation, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": 0.0,
            "max_tokens": self.max_tokens,
        });
        let resp = self
            .client
            .post(&self.url("/v1/chat/completions"), &body)
            .map_err(backend_error)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let finish_reason = resp
            .pointer("/choices/0/finish_reason")
            .and_then(Value::as_str)
            .unwrap_or("unknown")
            .to_string();
        Ok(Generation { text, finish_reason })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_only_option_tokens() {
        // prompt "Q: x" (4 chars), continuation " yes" spans [4, 8), generated token at 8
        let lp = json!({
            "tokens": ["Q", ":", " x", " yes", "!"],
            "token_logprobs": [null, -1.0, -2.0, -0.5, -3.0],
            "text_offset": [0, 1, 2, 4, 8],
        });
        let s = sum_continuation(&lp, 4, 8).unwrap();
        assert_eq!(s, TokenScore { nll: 0.5, tokens: 1 });
    }

    #[test]
    fn missing_logprobs_is_reported() {
        let err = sum_continuation(&json!({}), 0, 1).unwrap_err();
        assert_eq!(err, BackendError::NoLogprobs);
    }
}
