use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, BackendError, CompletionRequest};
use crate::config::Config;

pub const API_BASE_ENV: &str = "MEMWALKER_API_BASE";
pub const API_KEY_ENV: &str = "MEMWALKER_API_KEY";
pub const MODEL_ENV: &str = "MEMWALKER_MODEL";

const MAX_RETRIES: u32 = 3;
const INITIAL_BACKOFF: Duration = Duration::from_millis(250);

/// Chat-completion endpoint speaking the common `/chat/completions` JSON
/// shape. The whole prompt goes in a single user message.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    model: String,
    system_prompt: String,
    backoff: Duration,
}

impl HttpBackend {
    pub fn new(api_base: &str, api_key: Option<String>, model: &str, system_prompt: &str) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(HttpBackend {
            client,
            url: format!("{}/chat/completions", api_base.trim_end_matches('/')),
            api_key,
            model: model.to_string(),
            system_prompt: system_prompt.to_string(),
            backoff: INITIAL_BACKOFF,
        })
    }

    /// Endpoint and credential from the environment; the model name falls
    /// back to the config when `MEMWALKER_MODEL` is unset.
    pub fn from_env(config: &Config) -> Result<Self, BackendError> {
        let base = std::env::var(API_BASE_ENV)
            .map_err(|_| BackendError::Config(format!("{API_BASE_ENV} is not set")))?;
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let model = std::env::var(MODEL_ENV).unwrap_or_else(|_| config.model.clone());
        Self::new(&base, key, &model, &config.system_prompt)
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn body(&self, request: &CompletionRequest) -> Value {
        let mut body = json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system_prompt},
                {"role": "user", "content": request.prompt},
            ],
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "max_tokens": request.sampling.max_new_tokens,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(format!("HTTP {status}: {text}")));
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Attempt::Fatal(format!("bad JSON body: {e}")))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| Attempt::Fatal("response has no choices[0].message.content".into()))
    }
}

enum Attempt {
    Retry(String),
    Fatal(String),
}

impl Backend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, BackendError> {
        let body = self.body(request);
        let mut delay = self.backoff;
        let mut last = String::new();
        for attempt in 0..=MAX_RETRIES {
            if attempt > 0 {
                tracing::warn!(attempt, "retrying completion after: {last}");
                std::thread::sleep(delay);
                delay *= 2;
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(msg)) => return Err(BackendError::Endpoint(msg)),
                Err(Attempt::Retry(msg)) => last = msg,
            }
        }
        Err(BackendError::Endpoint(format!(
            "giving up after {} attempts: {last}",
            MAX_RETRIES + 1
        )))
    }
}
