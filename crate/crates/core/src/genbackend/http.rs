//! Client for external inference servers.
//!
//! `POST {base_url}/generate` with body
//! `{"prompt", "max_tokens", "temperature", "top_p", "n", "stop", "seed"}`;
//! the server answers `{"choices": [{"text": ...}, ...]}` with `n` choices.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::sampling::apply_stop;
use super::{Backend, Completion, GenRequest, GenResponse};
use crate::error::GenError;

/// Overrides the configured base URL when set.
pub const BASE_URL_ENV: &str = "SYNTHFEED_BACKEND_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    /// Additional attempts after the first failure.
    pub retries: u32,
    pub backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://127.0.0.1:8080".into(),
            timeout_ms: 60_000,
            retries: 2,
            backoff_ms: 200,
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    n: usize,
    stop: &'a [String],
    seed: u64,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

pub struct HttpBackend {
    name: String,
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(name: impl Into<String>, mut config: HttpConfig) -> Result<Self, GenError> {
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.trim().is_empty() {
                config.base_url = url.trim().to_string();
            }
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GenError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            name: name.into(),
            config,
            client,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/generate", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, req: &GenRequest, attempts: u32) -> Result<GenResponse, GenError> {
        let body = WireRequest {
            prompt: &req.prompt,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            top_p: req.top_p,
            n: req.n,
            stop: &req.stop,
            seed: req.seed,
        };
        let resp = self
            .client
            .post(self.endpoint())
            .json(&body)
            .send()
            .map_err(|e| GenError::Transport {
                attempts,
                message: e.to_string(),
            })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GenError::Transport {
            attempts,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GenError::Status {
                attempts,
                status: status.as_u16(),
                body: text,
            });
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| GenError::Decode(e.to_string()))?;
        if wire.choices.len() != req.n {
            return Err(GenError::Decode(format!(
                "expected {} choices, server returned {}",
                req.n,
                wire.choices.len()
            )));
        }
        let completions = wire
            .choices
            .into_iter()
            .map(|c| {
                let mut text = c.text;
                apply_stop(&mut text, &req.stop);
                Completion {
                    text,
                    token_logprobs: None,
                }
            })
            .collect();
        Ok(GenResponse { completions })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn generate(&self, req: &GenRequest) -> Result<GenResponse, GenError> {
        req.validate()?;
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(req, attempts) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_retriable() && attempts <= self.config.retries => {
                    log::warn!("{}: attempt {attempts} failed: {e}", self.name);
                    std::thread::sleep(Duration::from_millis(
                        self.config.backoff_ms * attempts as u64,
                    ));
                }
                Err(e) => return Err(e),
            }
        }
    }
}
