//! Chat-completion execution against an OpenRouter-compatible endpoint, plus
//! the dispatcher that drives mock or real providers over a cell list.
//!
//! Requests retry with exponential backoff on transport errors and honor a
//! minimum inter-request interval. Completed cells are cached content-
//! addressed so a resumed run never re-bills. The dispatcher runs up to a
//! bounded number of in-flight requests; records are handed to a single
//! serialized writer in deterministic cell order.

use crate::catalog::FeatureCatalog;
use crate::cohort::PatientProfile;
use crate::error::{AuditError, Result};
use crate::ledger::{LedgerWriter, ResponseCache};
use crate::mock::{mock_responder, MockBehavior};
use crate::parsing::{self, ParsedAssessment, RiskScale};
use crate::perturbation::FeatureConfiguration;
use crate::prompting::PromptSpec;
use crate::prompting::PromptStyle;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

pub const API_KEY_ENV: &str = "OPENROUTER_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://openrouter.ai/api/v1";
pub const DEFAULT_REPS: u8 = 5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelTarget {
    pub key: String,
    pub provider_model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ModelTarget {
    /// The four audited models.
    pub fn defaults() -> Vec<ModelTarget> {
        let target = |key: &str, id: &str| ModelTarget {
            key: key.to_string(),
            provider_model_id: id.to_string(),
            // provider default sampling, so repetitions capture stochastic
            // variability
            temperature: 1.0,
            max_tokens: 4096,
        };
        vec![
            target("gemini-2.5-flash", "google/gemini-2.5-flash"),
            target("llama-3.3-70b", "meta-llama/llama-3.3-70b-instruct"),
            target("claude-sonnet-4.6", "anthropic/claude-sonnet-4.6"),
            target("gpt-4o-mini", "openai/gpt-4o-mini"),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationOutcome {
    Ok,
    ParseFailed,
    Refused,
    TransportFailed,
}

/// One model invocation, append-only in the run ledger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub model: String,
    pub style: PromptStyle,
    pub patient_id: u32,
    pub t: u8,
    pub rep: u8,
    pub prompt_fingerprint: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub raw_response: String,
    pub outcome: GenerationOutcome,
    pub attempts: u32,
    pub requested_at_unix_ms: u64,
    pub completed_at_unix_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedAssessment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_reason: Option<String>,
}

pub type CellKey = (String, &'static str, u32, u8, u8);

impl GenerationRecord {
    pub fn cell_key(&self) -> CellKey {
        (
            self.model.clone(),
            self.style.key(),
            self.patient_id,
            self.t,
            self.rep,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            initial_backoff_ms: 500,
            max_backoff_ms: 8000,
        }
    }
}

enum ProviderReply {
    Content(String),
    Refused(String),
}

/// Blocking OpenRouter-compatible client with retry and rate limiting.
pub struct OpenRouterClient {
    http: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
    retry: RetryPolicy,
    min_interval: Duration,
    last_request: Mutex<Option<Instant>>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

impl OpenRouterClient {
    /// Fails fast when the credential is absent, before any request is made.
    pub fn from_env(base_url: &str, retry: RetryPolicy, requests_per_second: f64) -> Result<Self> {
        let api_key = std::env::var(API_KEY_ENV)
            .map_err(|_| AuditError::MissingCredential(API_KEY_ENV.to_string()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| AuditError::Provider(e.to_string()))?;
        let min_interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Ok(OpenRouterClient {
            http,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
            retry,
            min_interval,
            last_request: Mutex::new(None),
        })
    }

    fn throttle(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut last = self.last_request.lock().unwrap();
            let now = Instant::now();
            let wait = match *last {
                Some(prev) if now.duration_since(prev) < self.min_interval => {
                    self.min_interval - now.duration_since(prev)
                }
                _ => Duration::ZERO,
            };
            *last = Some(now + wait);
            wait
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn complete(
        &self,
        target: &ModelTarget,
        prompt_text: &str,
    ) -> std::result::Result<(ProviderReply, u32), (String, u32)> {
        let request = ChatRequest {
            model: &target.provider_model_id,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt_text,
            }],
            temperature: target.temperature,
            max_tokens: target.max_tokens,
        };
        let mut backoff = Duration::from_millis(self.retry.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 1..=self.retry.max_attempts {
            self.throttle();
            let response = self
                .http
                .post(format!("{}/chat/completions", self.base_url))
                .bearer_auth(&self.api_key)
                .json(&request)
                .send();
            match response {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let body: ChatResponse = match resp.json() {
                            Ok(b) => b,
                            Err(e) => return Err((format!("malformed response body: {e}"), attempt)),
                        };
                        let content = body
                            .choices
                            .first()
                            .and_then(|c| c.message.content.clone())
                            .unwrap_or_default();
                        return if content.trim().is_empty() {
                            Ok((ProviderReply::Refused("empty completion".to_string()), attempt))
                        } else {
                            Ok((ProviderReply::Content(content), attempt))
                        };
                    }
                    if status.as_u16() == 429 || status.is_server_error() {
                        last_error = format!("HTTP {status}");
                    } else {
                        return Err((format!("HTTP {status}"), attempt));
                    }
                }
                Err(e) => last_error = e.to_string(),
            }
            if attempt < self.retry.max_attempts {
                std::thread::sleep(backoff);
                backoff = (backoff * 2).min(Duration::from_millis(self.retry.max_backoff_ms));
            }
        }
        Err((
            format!("retry budget exhausted: {last_error}"),
            self.retry.max_attempts,
        ))
    }
}

/// Execution backend for a run.
pub enum Provider {
    Mock(MockBehavior),
    Real(OpenRouterClient),
}

/// One pending generation cell, fully prepared (prompt rendered).
pub struct Cell {
    pub index: usize,
    pub target: ModelTarget,
    pub spec: PromptSpec,
    pub config: FeatureConfiguration,
    pub rep: u8,
    pub fingerprint: String,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn execute_one(
    cell: &Cell,
    provider: &Provider,
    cohort: &[PatientProfile],
    catalog: &FeatureCatalog,
    scale: &RiskScale,
    master_seed: u64,
    cache: Option<&ResponseCache>,
) -> GenerationRecord {
    // mock mode keeps timestamps fixed so ledgers are byte-reproducible
    let real = matches!(provider, Provider::Real(_));
    let requested_at = if real { now_ms() } else { 0 };

    let mut record = GenerationRecord {
        model: cell.target.key.clone(),
        style: cell.spec.style,
        patient_id: cell.config.patient_id,
        t: cell.config.t,
        rep: cell.rep,
        prompt_fingerprint: cell.fingerprint.clone(),
        prompt_text: cell.spec.rendered_text.clone(),
        temperature: cell.target.temperature,
        raw_response: String::new(),
        outcome: GenerationOutcome::TransportFailed,
        attempts: 0,
        requested_at_unix_ms: requested_at,
        completed_at_unix_ms: requested_at,
        parsed: None,
        failure_reason: None,
    };

    let raw = match provider {
        Provider::Mock(behavior) => {
            let patient = cohort
                .iter()
                .find(|p| p.patient_id == cell.config.patient_id)
                .expect("cell patient is in cohort");
            record.attempts = 1;
            Some(mock_responder(
                behavior,
                &cell.target.key,
                cell.spec.style,
                patient,
                &cell.config,
                catalog,
                cell.rep,
                master_seed,
                scale,
            ))
        }
        Provider::Real(client) => {
            let cached = cache.and_then(|c| {
                c.get(
                    &cell.target.key,
                    &cell.fingerprint,
                    cell.rep,
                    cell.target.temperature,
                )
            });
            if let Some(text) = cached {
                record.attempts = 0;
                Some(text)
            } else {
                match client.complete(&cell.target, &cell.spec.rendered_text) {
                    Ok((ProviderReply::Content(text), attempts)) => {
                        record.attempts = attempts;
                        if let Some(c) = cache {
                            let _ = c.put(
                                &cell.target.key,
                                &cell.fingerprint,
                                cell.rep,
                                cell.target.temperature,
                                &text,
                            );
                        }
                        Some(text)
                    }
                    Ok((ProviderReply::Refused(reason), attempts)) => {
                        record.attempts = attempts;
                        record.outcome = GenerationOutcome::Refused;
                        record.failure_reason = Some(reason);
                        None
                    }
                    Err((reason, attempts)) => {
                        record.attempts = attempts;
                        record.outcome = GenerationOutcome::TransportFailed;
                        record.failure_reason = Some(reason);
                        None
                    }
                }
            }
        }
    };

    if let Some(raw) = raw {
        record.raw_response = raw;
        match parsing::parse(&record.raw_response, &cell.spec, &cell.config, catalog, scale) {
            Ok(parsed) => {
                record.parsed = Some(parsed);
                record.outcome = GenerationOutcome::Ok;
            }
            Err(reason) => {
                record.outcome = GenerationOutcome::ParseFailed;
                record.failure_reason = Some(reason);
            }
        }
    }
    if real {
        record.completed_at_unix_ms = now_ms();
    }
    record
}

#[derive(Debug, Default, Clone, Copy)]
pub struct RunStats {
    pub ok: usize,
    pub parse_failed: usize,
    pub refused: usize,
    pub transport_failed: usize,
}

/// Execute all cells with at most `concurrency` in flight, appending records
/// to the ledger in cell order regardless of completion order.
#[allow(clippy::too_many_arguments)]
pub fn execute_cells(
    cells: &[Cell],
    provider: &Provider,
    cohort: &[PatientProfile],
    catalog: &FeatureCatalog,
    scale: &RiskScale,
    master_seed: u64,
    concurrency: usize,
    cache: Option<&ResponseCache>,
    writer: &mut LedgerWriter,
    mut progress: impl FnMut(usize, usize),
) -> Result<RunStats> {
    let concurrency = concurrency.max(1);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, GenerationRecord)>();

    let stats = std::thread::scope(|scope| -> Result<RunStats> {
        for _ in 0..concurrency.min(cells.len().max(1)) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let record =
                    execute_one(cell, provider, cohort, catalog, scale, master_seed, cache);
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // reorder buffer: append strictly in cell order
        let mut pending: BTreeMap<usize, GenerationRecord> = BTreeMap::new();
        let mut next_to_write = 0usize;
        let mut stats = RunStats::default();
        let mut done = 0usize;
        for (i, record) in rx {
            pending.insert(i, record);
            while let Some(record) = pending.remove(&next_to_write) {
                match record.outcome {
                    GenerationOutcome::Ok => stats.ok += 1,
                    GenerationOutcome::ParseFailed => stats.parse_failed += 1,
                    GenerationOutcome::Refused => stats.refused += 1,
                    GenerationOutcome::TransportFailed => stats.transport_failed += 1,
                }
                writer.append(&record)?;
                next_to_write += 1;
                done += 1;
                progress(done, cells.len());
            }
        }
        Ok(stats)
    })?;

    Ok(stats)
}
