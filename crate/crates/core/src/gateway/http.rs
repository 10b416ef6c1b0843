//! Chat-completion HTTP client for OpenAI-compatible endpoints.
//!
//! The rendered template body travels as the system message and the payload
//! block as the user message; the first choice's message content is the
//! completion. Retry policy lives in [`complete`](crate::gateway::complete),
//! not here.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::gateway::{GatewayError, GenSettings, LlmEndpoint, RenderedPrompt};

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: String,
}

pub struct HttpEndpoint {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
}

impl HttpEndpoint {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpEndpoint {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            client: reqwest::blocking::Client::new(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    fn completions_url(&self) -> String {
        format!("{}/v1/chat/completions", self.base_url)
    }
}

impl LlmEndpoint for HttpEndpoint {
    fn complete_raw(
        &self,
        prompt: &RenderedPrompt,
        settings: &GenSettings,
    ) -> Result<String, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let request = ChatRequest {
            model: &self.model,
            messages: vec![
                ChatMessage {
                    role: "system",
                    content: &prompt.body,
                },
                ChatMessage {
                    role: "user",
                    content: &prompt.payload_block,
                },
            ],
            temperature: settings.temperature,
            max_tokens: settings.max_tokens,
        };

        let mut builder = self
            .client
            .post(self.completions_url())
            .timeout(Duration::from_secs(settings.timeout_secs))
            .json(&request);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }

        let response = builder
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(GatewayError::Transport(format!(
                "endpoint returned {status}: {}",
                body.chars().take(200).collect::<String>()
            )));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| GatewayError::Transport(format!("response decode: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::Transport("response had no choices".to_string()))
    }

    fn model_id(&self) -> &str {
        &self.model
    }

    fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}
