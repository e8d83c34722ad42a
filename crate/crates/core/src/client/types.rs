use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const ENV_BASE_URL: &str = "PROCTOR_BASE_URL";
pub const ENV_API_KEY: &str = "PROCTOR_API_KEY";

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout", with = "secs")]
    pub timeout: Duration,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff", with = "backoff_ms")]
    pub backoff_base: Duration,
}

fn default_timeout() -> Duration {
    Duration::from_secs(60)
}

fn default_retries() -> u32 {
    3
}

fn default_backoff() -> Duration {
    Duration::from_millis(250)
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: None,
            timeout: default_timeout(),
            max_retries: default_retries(),
            backoff_base: default_backoff(),
        }
    }

    /// Base URL and key from `PROCTOR_BASE_URL` / `PROCTOR_API_KEY`.
    pub fn from_env(model_name: impl Into<String>) -> Option<Self> {
        let url = std::env::var(ENV_BASE_URL).ok()?;
        let mut ep = Self::new(url, model_name);
        ep.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Some(ep)
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let url = reqwest::Url::parse(&self.base_url).map_err(|e| format!("invalid base_url {:?}: {e}", self.base_url))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(format!("base_url must be http(s), got {:?}", self.base_url));
        }
        if self.timeout.is_zero() {
            return Err("timeout must be positive".into());
        }
        Ok(())
    }

    /// `<base>/<route>`, with `/v1` inserted when the base URL has no path.
    pub fn url(&self, route: &str) -> String {
        let base = self.base_url.trim_end_matches('/');
        let has_path = base.splitn(4, '/').nth(3).is_some_and(|p| !p.is_empty());
        if has_path {
            format!("{base}/{route}")
        } else {
            format!("{base}/v1/{route}")
        }
    }
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("base_url", &self.base_url)
            .field("model_name", &self.model_name)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("backoff_base", &self.backoff_base)
            .finish()
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

mod backoff_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// One entry of the top-k next-token distribution. `token` is exactly what
/// the tokenizer produced, whitespace included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCandidate {
    pub token: String,
    pub prob: f64,
}

impl TokenCandidate {
    pub fn new(token: impl Into<String>, prob: f64) -> Self {
        Self { token: token.into(), prob }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub reachable: bool,
    pub supports_logprobs: bool,
    #[serde(with = "crate::serde_util::duration_ms")]
    pub latency: Duration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_inserts_v1_only_for_bare_hosts() {
        assert_eq!(EndpointConfig::new("http://h:1", "m").url("completions"), "http://h:1/v1/completions");
        assert_eq!(EndpointConfig::new("http://h:1/", "m").url("completions"), "http://h:1/v1/completions");
        assert_eq!(EndpointConfig::new("http://h:1/v1", "m").url("chat/completions"), "http://h:1/v1/chat/completions");
        assert_eq!(EndpointConfig::new("http://h/openai/v1/", "m").url("completions"), "http://h/openai/v1/completions");
    }

    #[test]
    fn validation() {
        assert!(EndpointConfig::new("http://localhost:8000", "m").validate().is_ok());
        assert!(EndpointConfig::new("localhost:8000", "m").validate().is_err());
        let mut ep = EndpointConfig::new("http://x", "m");
        ep.timeout = Duration::ZERO;
        assert!(ep.validate().is_err());
    }

    #[test]
    fn api_key_is_never_serialized_or_printed() {
        let ep = EndpointConfig::new("http://x", "m").with_api_key(Some("sk-secret".into()));
        assert!(!serde_json::to_string(&ep).unwrap().contains("sk-secret"));
        assert!(!format!("{ep:?}").contains("sk-secret"));
    }

    #[test]
    fn deserializes_with_defaults() {
        let ep: EndpointConfig = serde_json::from_str(r#"{"base_url":"http://x","api_key":"k"}"#).unwrap();
        assert_eq!(ep.timeout, Duration::from_secs(60));
        assert_eq!(ep.max_retries, 3);
        assert_eq!(ep.backoff_base, Duration::from_millis(250));
        assert_eq!(ep.api_key.as_deref(), Some("k"));
    }
}
