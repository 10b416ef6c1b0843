//! Single point of contact with any chat-completion endpoint: byte-faithful
//! prompt templating, response parsing, disk caching, retries, and a
//! deterministic mock oracle for network-free runs.

pub mod aliases;
pub mod cache;
pub mod http;
pub mod mock;
pub mod parse;
pub mod templates;

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use aliases::CountryAliases;
pub use cache::{CachedEndpoint, DiskCache, RequestLedger};
pub use http::HttpEndpoint;
pub use mock::MockOracle;
pub use parse::{parse_labeled, OracleResponse};
pub use templates::{render, RenderedPrompt, TemplateId};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("template {template} requires slot {slot}")]
    MissingSlot {
        template: &'static str,
        slot: &'static str,
    },
    #[error("unknown data-source phrase: {phrase:?}")]
    InvalidSourcePhrase { phrase: String },
    #[error("oracle failed after {attempts} attempts: {last_error}")]
    OracleError { attempts: u32, last_error: String },
    #[error("cache entry {key} failed integrity check")]
    CacheCorrupt { key: String },
    #[error("cache io: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("transport: {0}")]
    Transport(String),
}

/// Generation settings sent with every request and folded into cache keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSettings {
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub timeout_secs: u64,
    /// Base backoff in milliseconds; attempt n sleeps base * 2^n plus jitter.
    pub backoff_ms: u64,
}

impl Default for GenSettings {
    fn default() -> Self {
        GenSettings {
            temperature: 0.0,
            max_tokens: 512,
            max_retries: 3,
            timeout_secs: 60,
            backoff_ms: 250,
        }
    }
}

impl GenSettings {
    /// Stable string folded into cache keys; retry/backoff knobs are
    /// excluded because they do not change what the model computes.
    pub fn fingerprint(&self) -> String {
        format!(
            "temperature={};max_tokens={}",
            self.temperature, self.max_tokens
        )
    }
}

/// A chat-completion endpoint. Implementations must tolerate concurrent
/// calls; callers bound in-flight parallelism themselves.
pub trait LlmEndpoint: Send + Sync {
    /// One completion attempt; retries live in [`complete`].
    fn complete_raw(
        &self,
        prompt: &RenderedPrompt,
        settings: &GenSettings,
    ) -> Result<String, GatewayError>;

    fn model_id(&self) -> &str;

    /// Number of completions actually computed (cache hits excluded by the
    /// caching wrapper), observable by tests and run reports.
    fn calls(&self) -> u64;
}

impl<T: LlmEndpoint + ?Sized> LlmEndpoint for Box<T> {
    fn complete_raw(
        &self,
        prompt: &RenderedPrompt,
        settings: &GenSettings,
    ) -> Result<String, GatewayError> {
        (**self).complete_raw(prompt, settings)
    }

    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn calls(&self) -> u64 {
        (**self).calls()
    }
}

/// Complete with retries: exponential backoff with jitter, then
/// [`GatewayError::OracleError`] naming the attempt count.
pub fn complete(
    endpoint: &dyn LlmEndpoint,
    prompt: &RenderedPrompt,
    settings: &GenSettings,
) -> Result<String, GatewayError> {
    let attempts = settings.max_retries.max(1);
    let mut last_error = String::new();
    for attempt in 0..attempts {
        match endpoint.complete_raw(prompt, settings) {
            Ok(text) => return Ok(text),
            Err(e) => {
                last_error = e.to_string();
                if attempt + 1 < attempts {
                    let base = settings.backoff_ms.saturating_mul(1 << attempt.min(16));
                    let jitter = rand::thread_rng().gen_range(0..=base / 2 + 1);
                    std::thread::sleep(Duration::from_millis(base + jitter));
                }
            }
        }
    }
    Err(GatewayError::OracleError {
        attempts,
        last_error,
    })
}
