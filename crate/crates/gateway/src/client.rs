//! Chat-completion client with bounded concurrency and retrying requests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use futures::stream::{self, StreamExt};
use opgrain_core::rng::keyed_rng;
use opgrain_core::PredictionRecord;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use crate::parser::{parse_response, ParsedResponse, SampleReduction, FLAG_MISSING_CONFIDENCE};
use crate::templates::PromptTemplate;

pub const FLAG_REQUEST_FAILED: &str = "request_failed";
pub const FLAG_PARTIAL_SAMPLES: &str = "partial_samples";
pub const FLAG_MISSING_DECISION: &str = "missing_decision";
pub const FLAG_UNKNOWN_DECISION: &str = "unknown_decision";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error("http client setup failed: {0}")]
    Client(#[from] reqwest::Error),
    #[error("all {0} instances failed")]
    AllFailed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based), doubling each time.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub n_samples: usize,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
    /// Name of the environment variable holding a bearer token.
    pub api_key_env: Option<String>,
    /// Also issue one temperature-0 call per instance when sampling.
    pub greedy_pass: bool,
    pub reduction: SampleReduction,
    pub seed: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_name: "default".into(),
            temperature: 0.0,
            n_samples: 1,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
            timeout_ms: 60_000,
            api_key_env: None,
            greedy_pass: false,
            reduction: SampleReduction::Random,
            seed: 0,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidConfig(m.to_string()));
        if self.n_samples == 0 {
            return bad("n_samples must be at least 1");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if self.retry.max_attempts == 0 {
            return bad("retry.max_attempts must be at least 1");
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a non-negative number");
        }
        if self.endpoint_url.trim().is_empty() {
            return bad("endpoint_url is empty");
        }
        Ok(())
    }
}

/// One text to classify.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default)]
    pub dataset_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub requests: u64,
    pub retries: u64,
    pub failed_requests: u64,
    pub failed_instances: u64,
}

#[derive(Debug, Default)]
struct Counters {
    requests: AtomicU64,
    retries: AtomicU64,
    failed_requests: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct ClassifyOutput {
    pub records: Vec<PredictionRecord>,
    pub stats: RunStats,
}

#[derive(Debug, Error)]
enum RequestError {
    #[error("transport: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("status {0}")]
    Status(u16),
    #[error("response has no message content")]
    NoContent,
}

impl RequestError {
    fn retryable(&self) -> bool {
        match self {
            RequestError::Transport(e) => !e.is_builder(),
            RequestError::Status(s) => *s == 429 || *s >= 500,
            RequestError::NoContent => false,
        }
    }
}

fn message_content(body: &Value) -> Option<String> {
    let choice = body.get("choices")?.get(0)?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
}

/// Two-stage prompting variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStageVariant {
    Plain,
    Cot,
}

/// One scored observation of an instance.
struct Observation {
    parsed: ParsedResponse,
    /// Stage-one response for two-stage prompting.
    decision_raw: Option<String>,
}

pub struct Gateway {
    http: reqwest::Client,
    config: GatewayConfig,
    permits: Arc<Semaphore>,
    api_key: Option<String>,
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()?;
        let api_key = config
            .api_key_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok())
            .filter(|k| !k.is_empty());
        Ok(Self {
            http,
            permits: Arc::new(Semaphore::new(config.max_in_flight)),
            config,
            api_key,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    async fn send_once(&self, prompt: &str, temperature: f64) -> Result<String, RequestError> {
        let body = json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        let _permit = self.permits.acquire().await.expect("semaphore never closed");
        let mut req = self.http.post(&self.config.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().await?;
        let status = resp.status();
        if !status.is_success() {
            return Err(RequestError::Status(status.as_u16()));
        }
        let value: Value = resp.json().await?;
        message_content(&value).ok_or(RequestError::NoContent)
    }

    /// Sends one prompt, retrying transport errors, 429 and 5xx responses.
    async fn complete(&self, prompt: &str, temperature: f64, counters: &Counters) -> Option<String> {
        let max = self.config.retry.max_attempts;
        for attempt in 1..=max {
            counters.requests.fetch_add(1, Ordering::Relaxed);
            match self.send_once(prompt, temperature).await {
                Ok(text) => return Some(text),
                Err(e) if e.retryable() && attempt < max => {
                    counters.retries.fetch_add(1, Ordering::Relaxed);
                    let delay = self.config.retry.backoff(attempt);
                    warn!(attempt, error = %e, ?delay, "request failed, retrying");
                    tokio::time::sleep(delay).await;
                }
                Err(e) => {
                    warn!(attempt, error = %e, "request failed");
                    counters.failed_requests.fetch_add(1, Ordering::Relaxed);
                    return None;
                }
            }
        }
        None
    }

    async fn observe(
        &self,
        template: &PromptTemplate,
        instance: &Instance,
        temperature: f64,
        key: &str,
        counters: &Counters,
    ) -> Option<Observation> {
        let prompt = template.render(&instance.text);
        let text = self.complete(&prompt, temperature, counters).await?;
        let mut rng = keyed_rng(self.config.seed, key);
        let parsed = parse_response(&text, template, self.config.reduction, &mut rng);
        if !template.is_two_stage() {
            return Some(Observation {
                parsed,
                decision_raw: None,
            });
        }

        let mut first = parsed;
        let Some(decision) = first.decision.clone() else {
            first.flags.push(FLAG_MISSING_DECISION.into());
            return Some(Observation {
                decision_raw: Some(first.raw.clone()),
                parsed: first,
            });
        };
        let prompt = template.render_confidence(&instance.text, &decision);
        let text = self.complete(&prompt, temperature, counters).await?;
        let mut second = parse_response(&text, template, self.config.reduction, &mut rng);
        second.decision = Some(decision.clone());
        match second.confidence {
            Some(c) => {
                second.decision_confidence = Some(c);
                match decision_score(template, &decision, c) {
                    Some(s) => second.score_pos = Some(s),
                    None => second.flags.push(FLAG_UNKNOWN_DECISION.into()),
                }
            }
            None => second.flags.push(FLAG_MISSING_CONFIDENCE.into()),
        }
        Some(Observation {
            parsed: second,
            decision_raw: Some(first.raw),
        })
    }

    async fn classify_one(&self, template: &PromptTemplate, instance: &Instance, counters: &Counters) -> PredictionRecord {
        let mut record = PredictionRecord::new(instance.id.clone());
        record.label = instance.label;
        record.dataset_id = instance.dataset_id.clone();
        let n = self.config.n_samples;
        let temperature = self.config.temperature;

        let primary = if n == 1 || self.config.greedy_pass {
            let t = if n == 1 { temperature } else { 0.0 };
            let key = format!("{}/primary", instance.id);
            Some(self.observe(template, instance, t, &key, counters).await)
        } else {
            None
        };

        let mut sampled = Vec::new();
        if n > 1 {
            let calls = (0..n).map(|k| {
                let key = format!("{}/{k}", instance.id);
                async move { self.observe(template, instance, temperature, &key, counters).await }
            });
            sampled = futures::future::join_all(calls).await;
        }

        let mut any_response = false;
        if let Some(obs) = primary {
            if let Some(obs) = obs {
                any_response = true;
                apply_observation(&obs, &mut record);
            }
        }
        if n > 1 {
            let responded: Vec<&Observation> = sampled.iter().flatten().collect();
            any_response |= !responded.is_empty();
            record.samples_pos = responded.iter().filter_map(|o| o.parsed.score_pos).collect();
            if record.samples_pos.len() < n {
                record.flag(FLAG_PARTIAL_SAMPLES);
            }
            if record.raw.is_none() {
                if let Some(obs) = responded.first() {
                    record.raw = Some(obs.parsed.raw.clone());
                }
            }
        }
        if !any_response {
            record.flag(FLAG_REQUEST_FAILED);
        }
        record
    }

    /// Classifies every instance; records come back in input order.
    pub async fn classify(&self, instances: &[Instance], template: &PromptTemplate) -> Result<ClassifyOutput, GatewayError> {
        if template.class_labels.is_empty() {
            return Err(GatewayError::InvalidConfig("template has no class labels".into()));
        }
        let counters = Counters::default();
        let mut indexed: Vec<(usize, PredictionRecord)> = stream::iter(instances.iter().enumerate())
            .map(|(i, inst)| {
                let counters = &counters;
                async move { (i, self.classify_one(template, inst, counters).await) }
            })
            .buffer_unordered(self.config.max_in_flight)
            .collect()
            .await;
        indexed.sort_by_key(|(i, _)| *i);
        let records: Vec<PredictionRecord> = indexed.into_iter().map(|(_, r)| r).collect();

        let failed = records
            .iter()
            .filter(|r| r.flags.iter().any(|f| f == FLAG_REQUEST_FAILED))
            .count();
        let stats = RunStats {
            requests: counters.requests.load(Ordering::Relaxed),
            retries: counters.retries.load(Ordering::Relaxed),
            failed_requests: counters.failed_requests.load(Ordering::Relaxed),
            failed_instances: failed as u64,
        };
        debug!(?stats, "classification run finished");
        if !records.is_empty() && failed == records.len() {
            return Err(GatewayError::AllFailed(failed));
        }
        Ok(ClassifyOutput { records, stats })
    }

    /// Decision call followed by a confidence call; the positive-class score
    /// is the confidence for a positive decision and its complement otherwise.
    pub async fn two_stage_classify(
        &self,
        instances: &[Instance],
        variant: TwoStageVariant,
        context: &str,
        class_labels: Vec<String>,
    ) -> Result<ClassifyOutput, GatewayError> {
        let name = match variant {
            TwoStageVariant::Plain => crate::templates::TemplateName::TwoStage,
            TwoStageVariant::Cot => crate::templates::TemplateName::TwoStageCot,
        };
        let template = PromptTemplate::new(name, context, class_labels);
        self.classify(instances, &template).await
    }
}

fn apply_observation(obs: &Observation, record: &mut PredictionRecord) {
    obs.parsed.apply_to(record);
    if let Some(first) = &obs.decision_raw {
        record.extra.insert("raw_decision".into(), Value::String(first.clone()));
    }
}

/// Maps a two-stage (decision, confidence) pair onto the positive-class axis.
pub fn decision_score(template: &PromptTemplate, decision: &str, confidence: f64) -> Option<f64> {
    let d = decision.trim().to_lowercase();
    let pos = template.positive_class()?.trim().to_lowercase();
    if d == pos {
        return Some(confidence);
    }
    template
        .class_labels
        .iter()
        .skip(1)
        .any(|l| l.trim().to_lowercase() == d)
        .then_some(1.0 - confidence)
}
