//! Chat-completions client for the region-filtering prompt.

use std::time::Duration;

use log::warn;
use serde_json::{json, Value};

use super::RegionFilter;
use crate::error::{Error, Result};

pub const ENDPOINT_VAR: &str = "GMPG_LLM_ENDPOINT";
pub const API_KEY_VAR: &str = "GMPG_LLM_API_KEY";
pub const MODEL_VAR: &str = "GMPG_LLM_MODEL";
pub const DEFAULT_MODEL: &str = "llama-3-70b-instruct";

pub const SYSTEM_PROMPT: &str = "Given a radiology report sentence and its candidate anatomical \
regions, return only the most specific regions that correspond to the described abnormality. \
Remove broader or redundant regions. Output valid JSON with the key \"selected_region\" only.";

/// The user turn: the sentence in quotes, then the candidates as a JSON list.
pub fn user_prompt(sentence: &str, candidates: &[String]) -> String {
    let list = serde_json::to_string(candidates).expect("strings serialize");
    format!("Sentence: \"{sentence}\"\n\nCandidates:\n{list}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub multiplier: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
            multiplier: 2.0,
        }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .mul_f64(self.multiplier.powi(attempt.saturating_sub(1) as i32))
    }
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: DEFAULT_MODEL.to_string(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads endpoint, key and model from the environment.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| Error::Llm(format!("{ENDPOINT_VAR} is not set")))?;
        let mut cfg = Self::new(endpoint);
        cfg.api_key = std::env::var(API_KEY_VAR).ok().filter(|k| !k.is_empty());
        if let Ok(model) = std::env::var(MODEL_VAR) {
            cfg.model = model;
        }
        Ok(cfg)
    }
}

pub struct LlmFilter {
    config: LlmConfig,
    agent: ureq::Agent,
}

impl LlmFilter {
    pub fn new(config: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.config
    }

    fn request_body(&self, sentence: &str, candidates: &[String]) -> Value {
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user_prompt(sentence, candidates)},
            ],
        })
    }

    /// One HTTP round trip. `Ok(Err(_))` is a retryable failure.
    fn attempt(&self, body: &Value) -> std::result::Result<Value, (bool, String)> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err((false, format!("HTTP {status}")));
        }
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| (false, format!("response is not JSON: {e}")))
    }

    fn complete(&self, sentence: &str, candidates: &[String]) -> Result<String> {
        let body = self.request_body(sentence, candidates);
        let policy = self.config.retry;
        let mut last = String::new();
        for attempt in 1..=policy.max_attempts.max(1) {
            match self.attempt(&body) {
                Ok(v) => return message_content(&v),
                Err((retryable, msg)) => {
                    last = msg;
                    if !retryable || attempt >= policy.max_attempts {
                        break;
                    }
                    warn!("LLM attempt {attempt} failed ({last}); retrying");
                    std::thread::sleep(policy.backoff(attempt));
                }
            }
        }
        Err(Error::Llm(last))
    }
}

impl RegionFilter for LlmFilter {
    fn select(&self, sentence: &str, candidates: &[String]) -> Result<Vec<String>> {
        let content = self.complete(sentence, candidates)?;
        parse_selection(&content)
    }

    fn name(&self) -> &'static str {
        "llm"
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

fn message_content(v: &Value) -> Result<String> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Llm("response has no choices[0].message.content".into()))
}

/// Extracts the region list from a model reply.
///
/// Accepts `selected_regions` or `selected_region`, as a list or a single
/// string, optionally wrapped in prose or a code fence.
pub fn parse_selection(content: &str) -> Result<Vec<String>> {
    let start = content.find('{');
    let end = content.rfind('}');
    let obj = match (start, end) {
        (Some(s), Some(e)) if s < e => &content[s..=e],
        _ => return Err(Error::Llm(format!("no JSON object in reply: {content:?}"))),
    };
    let v: Value = serde_json::from_str(obj).map_err(|e| Error::Llm(format!("invalid JSON in reply: {e}")))?;
    let field = v
        .get("selected_regions")
        .or_else(|| v.get("selected_region"))
        .ok_or_else(|| Error::Llm("reply lacks selected_regions".into()))?;
    match field {
        Value::String(s) => Ok(vec![s.clone()]),
        Value::Array(items) => items
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| Error::Llm("non-string region in reply".into()))
            })
            .collect(),
        _ => Err(Error::Llm("selected_regions is neither a list nor a string".into())),
    }
}
