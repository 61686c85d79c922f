use std::time::Duration;

use serde::Deserialize;

use super::{BackendReply, ChatBackend, ChatRequest, GatewayError, RequestMeta, Usage};

/// Environment variable holding the bearer token for the endpoint.
pub const API_KEY_ENV: &str = "OPINION_FORGE_API_KEY";

/// Blocking client for `POST {endpoint}/chat/completions`.
pub struct OpenAiBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

impl OpenAiBackend {
    /// Reads the API key from [`API_KEY_ENV`] when set.
    pub fn new(endpoint: &str) -> Result<Self, GatewayError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(endpoint, api_key)
    }

    pub fn with_api_key(endpoint: &str, api_key: Option<String>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

#[derive(Deserialize)]
struct ResponseBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for OpenAiBackend {
    fn send(
        &self,
        request: &ChatRequest,
        timeout: Duration,
        _meta: &RequestMeta,
    ) -> Result<BackendReply, GatewayError> {
        let mut builder = self.client.post(&self.url).timeout(timeout).json(request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(e.to_string())
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        let status = response.status();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(e.to_string())
            } else {
                GatewayError::Transport(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(GatewayError::Api {
                status: status.as_u16(),
                body,
            });
        }
        let parsed: ResponseBody =
            serde_json::from_str(&body).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("no message content in first choice".into()))?;
        Ok(BackendReply {
            text,
            usage: parsed.usage,
        })
    }
}
