//! Client for a chat-completion endpoint that reports token log-probabilities.
//!
//! Every decision is scored by its own request. The rendered context goes in
//! the system message; the user message names one candidate action and asks
//! either for a Yes/No verdict (the log-probability of the configured token is
//! the raw score) or for a 0-100 rating (the raw score is ln(rating/100)).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Scorer;
use crate::context::Context;
use crate::error::{Error, Result, TransportError, TransportErrorKind};
use crate::scenario::DecisionSpace;
use crate::world::Decision;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Extraction {
    /// Log-probability of `token` as the first generated token.
    TokenLogprob { token: String },
    /// A number between 0 and 100 in the reply text.
    NumericAnswer,
}

impl Default for Extraction {
    fn default() -> Self {
        Extraction::TokenLogprob {
            token: "Yes".into(),
        }
    }
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_concurrency() -> usize {
    8
}
fn default_retries() -> usize {
    2
}
fn default_top_logprobs() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default)]
    pub extraction: Extraction,
    /// Extra attempts after a timeout, connection failure, 429 or 5xx.
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key_env: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: api_key_env.into(),
            timeout_ms: default_timeout_ms(),
            max_concurrency: default_concurrency(),
            extraction: Extraction::default(),
            max_retries: default_retries(),
            top_logprobs: default_top_logprobs(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_url.is_empty() || self.model.is_empty() || self.api_key_env.is_empty() {
            return Err(Error::Config(
                "endpoint needs base_url, model and api_key_env".into(),
            ));
        }
        if self.max_concurrency == 0 || self.timeout_ms == 0 {
            return Err(Error::Config(
                "endpoint max_concurrency and timeout_ms must be positive".into(),
            ));
        }
        Ok(())
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub struct ExternalScorer {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
}

fn transport(kind: TransportErrorKind, message: impl Into<String>, attempts: usize) -> Error {
    Error::Transport(TransportError {
        kind,
        message: message.into(),
        attempts,
    })
}

impl ExternalScorer {
    pub fn new(config: EndpointConfig) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| transport(TransportErrorKind::Connection, e.to_string(), 0))?;
        Ok(ExternalScorer { config, client })
    }

    fn api_key(&self) -> Result<String> {
        match std::env::var(&self.config.api_key_env) {
            Ok(k) if !k.trim().is_empty() => Ok(k),
            _ => Err(transport(
                TransportErrorKind::Auth,
                format!("environment variable {} is not set", self.config.api_key_env),
                0,
            )),
        }
    }

    /// Request body for one candidate decision.
    pub fn request_body(&self, prompt: &str, robot: usize, action: &str) -> Value {
        let (question, max_tokens) = match self.config.extraction {
            Extraction::TokenLogprob { .. } => (
                format!(
                    "Candidate action for robot {robot}: {action}. Is this the correct next \
                     action? Answer Yes or No."
                ),
                1,
            ),
            Extraction::NumericAnswer => (
                format!(
                    "Candidate action for robot {robot}: {action}. On a scale from 0 to 100, how \
                     likely is this the correct next action? Reply with a number only."
                ),
                8,
            ),
        };
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt},
                {"role": "user", "content": question},
            ],
            "max_tokens": max_tokens,
            "temperature": 0,
            "logprobs": true,
            "top_logprobs": self.config.top_logprobs,
        })
    }

    /// Pulls the raw score out of a response body.
    pub fn extract(&self, body: &Value) -> Result<f64, String> {
        let choice = body
            .pointer("/choices/0")
            .ok_or("response has no choices")?;
        match &self.config.extraction {
            Extraction::TokenLogprob { token } => {
                let first = choice
                    .pointer("/logprobs/content/0")
                    .ok_or("response has no token log-probabilities")?;
                let matches = |v: &Value| v.get("token").and_then(Value::as_str).map(str::trim) == Some(token.as_str());
                let logprob = |v: &Value| v.get("logprob").and_then(Value::as_f64);
                if matches(first) {
                    return logprob(first).ok_or_else(|| "token without logprob".to_string());
                }
                let top = first
                    .get("top_logprobs")
                    .and_then(Value::as_array)
                    .ok_or("response has no top_logprobs")?;
                match top.iter().find(|v| matches(v)) {
                    Some(v) => logprob(v).ok_or_else(|| "top_logprobs entry without logprob".into()),
                    // Outside the reported top list: treated as probability zero.
                    None => Ok(f64::NEG_INFINITY),
                }
            }
            Extraction::NumericAnswer => {
                let text = choice
                    .pointer("/message/content")
                    .and_then(Value::as_str)
                    .ok_or("response has no message content")?;
                let number: String = text
                    .trim()
                    .chars()
                    .skip_while(|c| !c.is_ascii_digit())
                    .take_while(|c| c.is_ascii_digit() || *c == '.')
                    .collect();
                let value: f64 = number
                    .parse()
                    .map_err(|_| format!("no number in reply {text:?}"))?;
                if !(0.0..=100.0).contains(&value) {
                    return Err(format!("rating {value} outside 0..=100"));
                }
                Ok((value / 100.0).ln())
            }
        }
    }

    fn score_one(&self, key: &str, body: &Value) -> Result<f64> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            let retry = attempts <= self.config.max_retries;
            let sent = self
                .client
                .post(self.config.url())
                .bearer_auth(key)
                .json(body)
                .send();
            let response = match sent {
                Ok(r) => r,
                Err(e) => {
                    let kind = if e.is_timeout() {
                        TransportErrorKind::Timeout
                    } else {
                        TransportErrorKind::Connection
                    };
                    if retry {
                        continue;
                    }
                    return Err(transport(kind, e.to_string(), attempts));
                }
            };
            let status = response.status().as_u16();
            if status == 401 || status == 403 {
                return Err(transport(TransportErrorKind::Auth, format!("status {status}"), attempts));
            }
            if status == 429 || status >= 500 {
                if retry {
                    continue;
                }
                return Err(transport(TransportErrorKind::Status(status), format!("status {status}"), attempts));
            }
            if !(200..300).contains(&status) {
                return Err(transport(TransportErrorKind::Status(status), format!("status {status}"), attempts));
            }
            let text = match response.text() {
                Ok(t) => t,
                Err(e) if e.is_timeout() && retry => continue,
                Err(e) if e.is_timeout() => {
                    return Err(transport(TransportErrorKind::Timeout, e.to_string(), attempts))
                }
                Err(e) => return Err(transport(TransportErrorKind::Connection, e.to_string(), attempts)),
            };
            let value: Value = serde_json::from_str(&text).map_err(|e| {
                transport(TransportErrorKind::MalformedResponse, e.to_string(), attempts)
            })?;
            return self
                .extract(&value)
                .map_err(|m| transport(TransportErrorKind::MalformedResponse, m, attempts));
        }
    }

    /// Scores every decision; all requests must succeed.
    pub fn score_text(
        &self,
        prompt: &str,
        robot: usize,
        actions: &[String],
    ) -> Result<Vec<f64>> {
        let key = self.api_key()?;
        let bodies: Vec<Value> = actions
            .iter()
            .map(|a| self.request_body(prompt, robot, a))
            .collect();
        let results: Vec<Mutex<Option<Result<f64>>>> =
            (0..bodies.len()).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_concurrency.min(bodies.len()).max(1);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= bodies.len() {
                        break;
                    }
                    let r = self.score_one(&key, &bodies[i]);
                    *results[i].lock().expect("unpoisoned") = Some(r);
                });
            }
        });
        let raw = results
            .into_iter()
            .map(|m| m.into_inner().expect("unpoisoned").expect("every index scored"))
            .collect::<Result<Vec<f64>>>()?;
        if raw.iter().all(|r| *r == f64::NEG_INFINITY) {
            return Err(transport(
                TransportErrorKind::MalformedResponse,
                "no candidate received any probability",
                1,
            ));
        }
        Ok(raw)
    }
}

impl Scorer for ExternalScorer {
    fn raw_scores(&self, ctx: &Context, space: &DecisionSpace) -> Result<Vec<f64>> {
        let cursor = ctx
            .cursor
            .ok_or_else(|| Error::Argument("context has no cursor".into()))?;
        let env = &ctx.scenario().env;
        let actions: Vec<String> = space
            .decisions()
            .iter()
            .map(|d: &Decision| env.describe(d))
            .collect();
        self.score_text(&ctx.render_text(), cursor.robot, &actions)
    }
}
