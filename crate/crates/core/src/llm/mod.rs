//! Completion interface shared by construction, navigation and the baselines.
//!
//! [`LlmClient`] is what callers hold: it enforces the context-window budget,
//! forwards to a [`Backend`] and appends every exchange to an optional
//! [`TraceLog`].

mod http;
mod scripted;
mod trace;

use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Config, Sampling};
use crate::tokenize::{Tokenizer, TokenizerHandle};

pub use http::{HttpBackend, API_BASE_ENV, API_KEY_ENV, MODEL_ENV};
pub use scripted::{ScriptEntry, ScriptedBackend};
pub use trace::{TraceLog, TraceRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub sampling: Sampling,
    /// Free-form label such as `triage`, `leaf` or `summarize-leaf`.
    pub tag: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>, sampling: Sampling, tag: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            sampling,
            tag: tag.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("endpoint error: {0}")]
    Endpoint(String),

    #[error("prompt of {prompt_tokens} tokens plus {max_new_tokens} new tokens exceeds the {context_window}-token window")]
    Budget {
        prompt_tokens: usize,
        max_new_tokens: usize,
        context_window: usize,
    },

    #[error("script entry {index} expects the prompt to contain {matcher:?}")]
    ScriptMismatch { index: usize, matcher: String },

    #[error("script exhausted after {consumed} responses")]
    ScriptExhausted { consumed: usize },

    #[error("scripted backend does not support concurrent requests")]
    ConcurrentUse,

    #[error("backend configuration: {0}")]
    Config(String),
}

/// Anything that turns a prompt into a completion. Implementations must be
/// callable from several threads; sequential-only ones reject overlap.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError>;
}

/// Backend driven by a closure; handy for order-independent test doubles.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        (self.0)(request)
    }
}

/// Tokens left for the prompt body once the generation reserve is held back.
pub fn remaining_budget(
    tokenizer: &dyn Tokenizer,
    prompt: &str,
    context_window: usize,
    generation_reserve: usize,
) -> usize {
    context_window
        .saturating_sub(tokenizer.count(prompt))
        .saturating_sub(generation_reserve)
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    tokenizer: TokenizerHandle,
    context_window: usize,
    trace: Option<Arc<TraceLog>>,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, tokenizer: TokenizerHandle, context_window: usize) -> Self {
        LlmClient {
            backend,
            tokenizer,
            context_window,
            trace: None,
        }
    }

    pub fn for_config(backend: Arc<dyn Backend>, tokenizer: TokenizerHandle, config: &Config) -> Self {
        Self::new(backend, tokenizer, config.context_window)
    }

    pub fn with_trace(mut self, trace: Arc<TraceLog>) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn tokenizer_handle(&self) -> TokenizerHandle {
        self.tokenizer.clone()
    }

    pub fn context_window(&self) -> usize {
        self.context_window
    }

    pub fn trace(&self) -> Option<&Arc<TraceLog>> {
        self.trace.as_ref()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let prompt_tokens = self.tokenizer.count(&request.prompt);
        if prompt_tokens + request.sampling.max_new_tokens > self.context_window {
            return Err(BackendError::Budget {
                prompt_tokens,
                max_new_tokens: request.sampling.max_new_tokens,
                context_window: self.context_window,
            });
        }
        let started = Instant::now();
        let response = self.backend.complete(request)?;
        tracing::debug!(tag = %request.tag, prompt_tokens, "completion");
        if let Some(trace) = &self.trace {
            trace.record(TraceRecord {
                tag: request.tag.clone(),
                prompt: request.prompt.clone(),
                response: response.clone(),
                prompt_tokens,
                completion_tokens: self.tokenizer.count(&response),
                timestamp: now_millis(),
                latency_ms: started.elapsed().as_millis() as u64,
            });
        }
        Ok(response)
    }
}
