//! Uniform client surface over chat-completion, vision-description and
//! text-embedding services.
//!
//! A [`Gateway`] wraps a [`Provider`] (live HTTP, scripted mock, or transcript
//! replay), bounds the number of in-flight requests and optionally appends
//! every request/response pair to a transcript file.

mod live;
mod mock;
mod transcript;

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use live::LiveProvider;
pub use mock::{MockProvider, MockRule};
pub use transcript::{ReplayProvider, TranscriptEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Model override; the provider's configured chat model is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl ChatRequest {
    pub fn new(system_prompt: impl Into<String>, user_prompt: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            user_prompt: user_prompt.into(),
            temperature: 0.0,
            max_tokens: 512,
            model: None,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.system_prompt.trim().is_empty() || self.user_prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("prompts must be non-empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub provider_id: String,
}

/// A finite real vector returned by an embedding model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        if values.is_empty() {
            return Err(GatewayError::MalformedResponse("empty embedding".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GatewayError::MalformedResponse("non-finite embedding value".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("authentication failed (HTTP {status})")]
    Auth { status: u16 },
    #[error("provider error (HTTP {status}): {message}")]
    Provider { status: u16, message: String },
    #[error("unreadable image {image_ref}: {reason}")]
    UnreadableImage { image_ref: String, reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
}

impl GatewayError {
    /// Only timeouts and server-side failures are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Timeout => true,
            GatewayError::Provider { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// Backend behind a [`Gateway`].
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError>;
    fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub provider: ProviderKind,
    pub api_base: Option<String>,
    pub api_key: Option<String>,
    pub chat_model: String,
    pub vision_model: String,
    pub embed_model: String,
    pub classifier_model: String,
    pub embed_dim: usize,
    pub max_inflight: usize,
    pub retry_attempts: u32,
    pub retry_backoff_ms: u64,
    pub timeout_secs: u64,
    pub mock_seed: u64,
    pub mock_script: Option<PathBuf>,
    pub transcript: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Mock,
            api_base: None,
            api_key: None,
            chat_model: "qwen2.5-7b-instruct".into(),
            vision_model: "qwen2.5-vl-7b-instruct".into(),
            embed_model: "qwen3-embedding-4b".into(),
            classifier_model: "qwen2.5-7b-instruct".into(),
            embed_dim: 64,
            max_inflight: 4,
            retry_attempts: 3,
            retry_backoff_ms: 1000,
            timeout_secs: 120,
            mock_seed: 0,
            mock_script: None,
            transcript: None,
        }
    }
}

/// Counting semaphore bounding concurrent provider calls.
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    provider: Box<dyn Provider>,
    embed_dim: usize,
    limiter: Limiter,
    transcript: Option<Mutex<PathBuf>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.id())
            .field("embed_dim", &self.embed_dim)
            .finish()
    }
}

impl Gateway {
    pub fn new(provider: Box<dyn Provider>, embed_dim: usize, max_inflight: usize) -> Self {
        Self {
            provider,
            embed_dim,
            limiter: Limiter::new(max_inflight),
            transcript: None,
        }
    }

    /// Gateway backed by a [`MockProvider`] with default settings.
    pub fn mock(mock: MockProvider) -> Self {
        let dim = mock.dim();
        Self::new(Box::new(mock), dim, 4)
    }

    /// Builds the provider named in `cfg`. Live providers read
    /// `MODEL_API_BASE` / `MODEL_API_KEY` when the config leaves them unset.
    pub fn from_config(cfg: &GatewayConfig) -> crate::Result<Self> {
        let provider: Box<dyn Provider> = match cfg.provider {
            ProviderKind::Mock => {
                let mut mock = MockProvider::new(cfg.mock_seed, cfg.embed_dim);
                if let Some(script) = &cfg.mock_script {
                    mock = mock.with_script_file(script)?;
                }
                Box::new(mock)
            }
            ProviderKind::Live => Box::new(LiveProvider::from_config(cfg)?),
        };
        let mut gw = Self::new(provider, cfg.embed_dim, cfg.max_inflight);
        if let Some(path) = &cfg.transcript {
            gw = gw.with_transcript(path.clone());
        }
        Ok(gw)
    }

    pub fn with_transcript(mut self, path: PathBuf) -> Self {
        self.transcript = Some(Mutex::new(path));
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn record(&self, entry: TranscriptEntry) {
        if let Some(path) = &self.transcript {
            let path = path.lock().unwrap();
            if let Err(e) = crate::jsonl::append_record(&path, &entry) {
                log::warn!("could not append to transcript: {e}");
            }
        }
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let text = {
            let _permit = self.limiter.acquire();
            self.provider.chat(request)?
        };
        self.record(TranscriptEntry::Chat {
            request: request.clone(),
            response: text.clone(),
        });
        Ok(ChatResponse {
            text,
            provider_id: self.provider.id().to_string(),
        })
    }

    pub fn embed_text(&self, text: &str) -> Result<Embedding, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("cannot embed empty text".into()));
        }
        let values = {
            let _permit = self.limiter.acquire();
            self.provider.embed(text)?
        };
        if values.len() != self.embed_dim {
            return Err(GatewayError::MalformedResponse(format!(
                "embedding has dimension {}, configured {}",
                values.len(),
                self.embed_dim
            )));
        }
        let emb = Embedding::new(values)?;
        self.record(TranscriptEntry::Embed {
            text: text.to_string(),
            response: emb.values().to_vec(),
        });
        Ok(emb)
    }

    pub fn describe_image(&self, image_ref: &str, prompt: &str) -> Result<String, GatewayError> {
        if image_ref.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty image reference".into()));
        }
        let text = {
            let _permit = self.limiter.acquire();
            self.provider.describe_image(image_ref, prompt)?
        };
        self.record(TranscriptEntry::DescribeImage {
            image_ref: image_ref.to_string(),
            prompt: prompt.to_string(),
            response: text.clone(),
        });
        Ok(text)
    }
}
