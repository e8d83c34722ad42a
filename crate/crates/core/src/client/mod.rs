//! Client for OpenAI-compatible inference servers.
//!
//! Two surfaces are used: a single-token completion with top-k alternatives
//! (the raw next-token distribution the answer extractor consumes) and chat
//! completions, optionally streamed, for generation and side-by-side chat.

mod sse;
mod types;

use std::time::{Duration, Instant};

use futures::{Stream, StreamExt};
use rand::Rng;
use reqwest::{RequestBuilder, Response, StatusCode};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use types::{ChatMessage, EndpointConfig, HealthStatus, Role, TokenCandidate, ENV_API_KEY, ENV_BASE_URL};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("endpoint unreachable after {attempts} attempt(s): {reason}")]
    Unreachable { attempts: u32, reason: String },
    #[error("upstream rejected request with {status}: {body}")]
    Upstream4xx { status: u16, body: String },
    #[error("upstream failed with {status} after {attempts} attempt(s): {body}")]
    Upstream5xx { status: u16, attempts: u32, body: String },
    #[error("endpoint returned no token alternatives: {0}")]
    NoLogprobs(String),
    #[error("unexpected response shape: {0}")]
    BadResponse(String),
    #[error("stream interrupted after {} bytes of content: {reason}", partial.len())]
    StreamInterrupted { partial: String, reason: String },
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl ClientError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ClientError::Unreachable { .. } => "upstream_unreachable",
            ClientError::Upstream4xx { .. } => "upstream_4xx",
            ClientError::Upstream5xx { .. } => "upstream_5xx",
            ClientError::NoLogprobs(_) => "no_logprobs",
            ClientError::BadResponse(_) => "bad_upstream_response",
            ClientError::StreamInterrupted { .. } => "stream_interrupted",
            ClientError::Precondition(_) => "precondition",
        }
    }
}

/// Shareable across tasks; cloning is cheap.
#[derive(Debug, Clone, Default)]
pub struct InferenceClient {
    http: reqwest::Client,
}

impl InferenceClient {
    pub fn new() -> Self {
        Self { http: reqwest::Client::new() }
    }

    /// One forward pass: asks for a single generated token with `k` alternatives
    /// and returns them as probabilities, most probable first. Equal
    /// probabilities keep the order the endpoint reported them in.
    pub async fn top_k_next_tokens(
        &self,
        ep: &EndpointConfig,
        prompt: &str,
        k: usize,
    ) -> Result<Vec<TokenCandidate>, ClientError> {
        if k == 0 {
            return Err(ClientError::Precondition("k must be at least 1".into()));
        }
        if prompt.is_empty() {
            return Err(ClientError::Precondition("prompt must not be empty".into()));
        }
        let body = json!({
            "model": ep.model_name,
            "prompt": prompt,
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": k,
        });
        let raw = match self.post_json(ep, "completions", &body).await {
            Ok(v) => parse_completion_logprobs(&v)?,
            // No completions route: same contract through chat logprobs.
            Err(ClientError::Upstream4xx { status: 404, .. }) => {
                let body = json!({
                    "model": ep.model_name,
                    "messages": [{"role": "user", "content": prompt}],
                    "max_tokens": 1,
                    "temperature": 0,
                    "logprobs": true,
                    "top_logprobs": k,
                });
                let v = self.post_json(ep, "chat/completions", &body).await?;
                parse_chat_logprobs(&v)?
            }
            Err(e) => return Err(e),
        };
        to_candidates(raw, k)
    }

    pub async fn chat_complete(&self, ep: &EndpointConfig, messages: &[ChatMessage]) -> Result<ChatMessage, ClientError> {
        check_chat_messages(messages)?;
        let body = json!({ "model": ep.model_name, "messages": messages, "stream": false });
        let v = self.post_json(ep, "chat/completions", &body).await?;
        let content = v
            .pointer("/choices/0/message/content")
            .and_then(Json::as_str)
            .ok_or_else(|| ClientError::BadResponse("missing choices[0].message.content".into()))?;
        Ok(ChatMessage::assistant(content))
    }

    /// Streams assistant content fragments in order. A transport failure or a
    /// stream that ends without its terminator yields a final
    /// [`ClientError::StreamInterrupted`] carrying everything received so far.
    pub async fn chat_stream(
        &self,
        ep: &EndpointConfig,
        messages: &[ChatMessage],
    ) -> Result<impl Stream<Item = Result<String, ClientError>> + Send + 'static, ClientError> {
        check_chat_messages(messages)?;
        let body = json!({ "model": ep.model_name, "messages": messages, "stream": true });
        let url = ep.url("chat/completions");
        let resp = self.send_with_retry(ep, || self.http.post(url.clone()).json(&body)).await?;
        Ok(sse::content_fragments(Box::pin(resp.bytes_stream())))
    }

    /// Convenience: drives [`Self::chat_stream`] to completion.
    pub async fn chat_stream_collect(&self, ep: &EndpointConfig, messages: &[ChatMessage]) -> Result<String, ClientError> {
        let stream = self.chat_stream(ep, messages).await?;
        futures::pin_mut!(stream);
        let mut out = String::new();
        while let Some(fragment) = stream.next().await {
            out.push_str(&fragment?);
        }
        Ok(out)
    }

    /// One-token probe. Never errors; failures are reported in the status.
    pub async fn health_check(&self, ep: &EndpointConfig) -> HealthStatus {
        let probe = EndpointConfig { max_retries: 0, ..ep.clone() };
        let started = Instant::now();
        let result = self.top_k_next_tokens(&probe, "Hello", 1).await;
        let latency = started.elapsed();
        let (reachable, supports_logprobs, detail) = match result {
            Ok(_) => (true, true, None),
            Err(ClientError::Unreachable { reason, .. }) => (false, false, Some(reason)),
            Err(e) => (true, false, Some(e.to_string())),
        };
        HealthStatus { reachable, supports_logprobs, latency, detail }
    }

    async fn post_json(&self, ep: &EndpointConfig, route: &str, body: &Json) -> Result<Json, ClientError> {
        let url = ep.url(route);
        let resp = self.send_with_retry(ep, || self.http.post(url.clone()).json(body)).await?;
        resp.json::<Json>().await.map_err(|e| ClientError::BadResponse(e.to_string()))
    }

    async fn send_with_retry<F>(&self, ep: &EndpointConfig, build: F) -> Result<Response, ClientError>
    where
        F: Fn() -> RequestBuilder,
    {
        let mut attempt: u32 = 0;
        loop {
            attempt += 1;
            let mut req = build().timeout(ep.timeout);
            if let Some(key) = &ep.api_key {
                req = req.bearer_auth(key);
            }
            let failure = match req.send().await {
                Ok(resp) if resp.status().is_success() => return Ok(resp),
                Ok(resp) if resp.status().is_client_error() => {
                    let status = resp.status().as_u16();
                    let body = resp.text().await.unwrap_or_default();
                    return Err(ClientError::Upstream4xx { status, body: truncate(body) });
                }
                Ok(resp) => {
                    let status = resp.status();
                    let body = resp.text().await.unwrap_or_default();
                    ClientError::Upstream5xx {
                        status: if status.is_server_error() { status.as_u16() } else { StatusCode::BAD_GATEWAY.as_u16() },
                        attempts: attempt,
                        body: truncate(body),
                    }
                }
                Err(e) => ClientError::Unreachable { attempts: attempt, reason: e.to_string() },
            };
            if attempt > ep.max_retries {
                return Err(failure);
            }
            let delay = backoff_delay(ep.backoff_base, attempt - 1);
            tracing::debug!(attempt, ?delay, error = %failure, "retrying upstream request");
            tokio::time::sleep(delay).await;
        }
    }
}

/// Exponential backoff, factor 2, with +/-50% jitter.
pub fn backoff_delay(base: Duration, retry_index: u32) -> Duration {
    let exp = base.saturating_mul(1u32 << retry_index.min(16));
    let jitter: f64 = rand::rng().random_range(0.5..1.5);
    exp.mul_f64(jitter)
}

fn truncate(mut s: String) -> String {
    const MAX: usize = 512;
    if s.len() > MAX {
        let mut cut = MAX;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        s.truncate(cut);
    }
    s
}

fn check_chat_messages(messages: &[ChatMessage]) -> Result<(), ClientError> {
    match messages.last() {
        Some(m) if m.role == Role::User => {}
        Some(_) => return Err(ClientError::Precondition("conversation must end with a user turn".into())),
        None => return Err(ClientError::Precondition("conversation is empty".into())),
    }
    if let Some(m) = messages.iter().find(|m| m.role != Role::System && m.content.is_empty()) {
        return Err(ClientError::Precondition(format!("{:?} turn has empty content", m.role)));
    }
    Ok(())
}

/// `choices[0].logprobs.top_logprobs[0]`: either an object `{token: logprob}`
/// (OpenAI legacy) or a list of `{token, logprob}` entries.
fn parse_completion_logprobs(v: &Json) -> Result<Vec<(String, f64)>, ClientError> {
    let first = v
        .pointer("/choices/0/logprobs/top_logprobs/0")
        .ok_or_else(|| ClientError::NoLogprobs("completion has no top_logprobs".into()))?;
    let pairs = match first {
        Json::Object(map) => map
            .iter()
            .map(|(t, lp)| lp.as_f64().map(|lp| (t.clone(), lp)))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| ClientError::BadResponse("non-numeric logprob".into()))?,
        Json::Array(items) => parse_token_list(items)?,
        _ => return Err(ClientError::NoLogprobs("top_logprobs entry is not an object".into())),
    };
    if pairs.is_empty() {
        return Err(ClientError::NoLogprobs("top_logprobs is empty".into()));
    }
    Ok(pairs)
}

/// `choices[0].logprobs.content[0].top_logprobs` from a chat completion.
fn parse_chat_logprobs(v: &Json) -> Result<Vec<(String, f64)>, ClientError> {
    let items = v
        .pointer("/choices/0/logprobs/content/0/top_logprobs")
        .and_then(Json::as_array)
        .ok_or_else(|| ClientError::NoLogprobs("chat completion has no top_logprobs".into()))?;
    let pairs = parse_token_list(items)?;
    if pairs.is_empty() {
        return Err(ClientError::NoLogprobs("top_logprobs is empty".into()));
    }
    Ok(pairs)
}

fn parse_token_list(items: &[Json]) -> Result<Vec<(String, f64)>, ClientError> {
    items
        .iter()
        .map(|item| {
            let token = item.get("token").and_then(Json::as_str);
            let lp = item.get("logprob").and_then(Json::as_f64);
            match (token, lp) {
                (Some(t), Some(lp)) => Ok((t.to_string(), lp)),
                _ => Err(ClientError::BadResponse(format!("malformed top_logprobs entry {item}"))),
            }
        })
        .collect()
}

fn to_candidates(raw: Vec<(String, f64)>, k: usize) -> Result<Vec<TokenCandidate>, ClientError> {
    let mut out = raw
        .into_iter()
        .map(|(token, lp)| {
            if lp.is_nan() {
                return Err(ClientError::BadResponse(format!("NaN logprob for {token:?}")));
            }
            Ok(TokenCandidate { token, prob: lp.exp().clamp(0.0, 1.0) })
        })
        .collect::<Result<Vec<_>, _>>()?;
    // Stable: ties keep endpoint order.
    out.sort_by(|a, b| b.prob.total_cmp(&a.prob));
    out.truncate(k);
    Ok(out)
}
