//! Inference dispatch: the chat-completions HTTP client, retry/backoff
//! policy, the scripted offline stub, and the per-round recaption batch.
//!
//! Dispatch runs a bounded worker pool, but results are collected into a map
//! keyed by sample id and all post-processing is single-threaded, so final
//! manifest bytes are a pure function of the inputs and seed, never of
//! worker count or completion order.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    compute_caption_stats, CaptionEntry, CaptionStatus, CorpusError, LineageRecord, Manifest,
};
use crate::prompts::{
    merge_captions, select_prompt, MergePolicy, PromptBank, PromptError, PromptFamily,
    PromptTemplate, IMAGE_PLACEHOLDER,
};
use crate::seeded;

#[derive(Debug, thiserror::Error)]
pub enum RecaptionError {
    #[error("round mismatch: manifest is at round {manifest_round}, requested round {requested}")]
    RoundMismatch { manifest_round: u32, requested: u32 },
    #[error("round aborted: {failed}/{total} requests failed permanently (threshold {threshold})")]
    Aborted {
        failed: usize,
        total: usize,
        threshold: f64,
        report: Vec<FailureRecord>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("invalid stub script: {0}")]
    BadStub(String),
}

pub type Result<T> = std::result::Result<T, RecaptionError>;

#[derive(Debug, Clone, Serialize)]
pub struct InferenceRequest {
    pub sample_id: String,
    pub model_id: String,
    pub prompt: PromptTemplate,
    pub image_ref: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    RetryableError,
    PermanentError,
}

#[derive(Debug, Clone, Serialize)]
pub struct InferenceResponse {
    pub sample_id: String,
    pub text: String,
    pub status: ResponseStatus,
    pub attempts: u32,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_max")]
    pub retry_max: u32,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_api_key_env() -> String {
    "CAPFORGE_API_KEY".to_string()
}
fn default_max_in_flight() -> usize {
    8
}
fn default_retry_max() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    250
}
fn default_timeout_ms() -> u64 {
    60_000
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: String::new(),
            api_key_env: default_api_key_env(),
            max_in_flight: default_max_in_flight(),
            retry_max: default_retry_max(),
            backoff_base_ms: default_backoff_base_ms(),
            timeout_ms: default_timeout_ms(),
        }
    }
}

/// Outcome of a single transport attempt, before retry accounting.
#[derive(Debug, Clone)]
pub enum Attempt {
    Ok(String),
    Retryable(String),
    Permanent(String),
}

pub trait InferenceBackend: Send + Sync {
    fn infer(&self, req: &InferenceRequest) -> Attempt;
}

/// Extracts the first choice's message text from a chat-completions payload.
/// Malformed JSON or a missing choices array is classified retryable (server
/// hiccup); a payload whose text is empty after trimming is permanent.
pub fn parse_response(raw: &str) -> Attempt {
    let value: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(e) => return Attempt::Retryable(format!("malformed json: {e}")),
    };
    let Some(content) = value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|t| t.as_str())
    else {
        return Attempt::Retryable("missing choices[0].message.content".to_string());
    };
    let text = content.trim();
    if text.is_empty() {
        Attempt::Permanent("empty completion text".to_string())
    } else {
        Attempt::Ok(text.to_string())
    }
}

/// Runs one request through the backend with exponential backoff and full
/// jitter. Retries only retryable failures, up to `retry_max` extra attempts.
pub fn call_endpoint(
    req: &InferenceRequest,
    cfg: &EndpointConfig,
    backend: &dyn InferenceBackend,
) -> InferenceResponse {
    let started = Instant::now();
    let mut attempts = 0u32;
    loop {
        attempts += 1;
        match backend.infer(req) {
            Attempt::Ok(text) => {
                return InferenceResponse {
                    sample_id: req.sample_id.clone(),
                    text,
                    status: ResponseStatus::Ok,
                    attempts,
                    latency_ms: started.elapsed().as_millis() as u64,
                };
            }
            Attempt::Permanent(e) => {
                return InferenceResponse {
                    sample_id: req.sample_id.clone(),
                    text: e,
                    status: ResponseStatus::PermanentError,
                    attempts,
                    latency_ms: started.elapsed().as_millis() as u64,
                };
            }
            Attempt::Retryable(e) => {
                if attempts > cfg.retry_max {
                    return InferenceResponse {
                        sample_id: req.sample_id.clone(),
                        text: e,
                        status: ResponseStatus::PermanentError,
                        attempts,
                        latency_ms: started.elapsed().as_millis() as u64,
                    };
                }
                let exp = (attempts - 1).min(10);
                let ceiling = cfg.backoff_base_ms.saturating_mul(1u64 << exp);
                if ceiling > 0 {
                    let sleep_ms = rand::thread_rng().gen_range(0..=ceiling);
                    std::thread::sleep(Duration::from_millis(sleep_ms));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

pub struct HttpEndpoint {
    client: reqwest::blocking::Client,
    cfg: EndpointConfig,
}

impl HttpEndpoint {
    pub fn new(cfg: EndpointConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .expect("http client");
        HttpEndpoint { client, cfg }
    }
}

impl InferenceBackend for HttpEndpoint {
    fn infer(&self, req: &InferenceRequest) -> Attempt {
        let text_part = req
            .prompt
            .role_text
            .replace(IMAGE_PLACEHOLDER, "")
            .trim()
            .to_string();
        let body = serde_json::json!({
            "model": req.model_id,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "image_url", "image_url": {"url": req.image_ref}},
                    {"type": "text", "text": text_part},
                ],
            }],
            "max_tokens": req.max_new_tokens,
            "temperature": req.temperature,
        });
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&body);
        if let Ok(key) = std::env::var(&self.cfg.api_key_env) {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => {
                if e.is_builder() {
                    return Attempt::Permanent(format!("bad endpoint url: {e}"));
                }
                return Attempt::Retryable(format!("transport error: {e}"));
            }
        };
        let status = resp.status();
        let body = resp.text().unwrap_or_default();
        if status.is_success() {
            parse_response(&body)
        } else if status.as_u16() == 429 || status.is_server_error() {
            Attempt::Retryable(format!("http {status}"))
        } else {
            Attempt::Permanent(format!("http {status}"))
        }
    }
}

// ---------------------------------------------------------------------------
// Scripted stub backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
pub struct StubMatch {
    #[serde(default)]
    pub any: bool,
    #[serde(default)]
    pub sample_id_prefix: Option<String>,
    #[serde(default)]
    pub family: Option<PromptFamily>,
}

impl StubMatch {
    fn matches(&self, req: &InferenceRequest) -> bool {
        if self.any {
            return true;
        }
        if let Some(p) = &self.sample_id_prefix {
            if req.sample_id.starts_with(p.as_str()) {
                return true;
            }
        }
        if let Some(f) = self.family {
            if req.prompt.family == f {
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct StubResponse {
    #[serde(default)]
    pub text: Option<String>,
    /// "retryable" or "permanent": fail every attempt with that class.
    #[serde(default)]
    pub error: Option<String>,
    /// Fail this many attempts (retryable) before serving `text`.
    #[serde(default)]
    pub fail_times: Option<u32>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StubRule {
    #[serde(rename = "match")]
    pub matcher: StubMatch,
    pub response: StubResponse,
}

#[derive(Debug, Clone, Deserialize)]
pub struct StubScript {
    pub rules: Vec<StubRule>,
}

impl StubScript {
    pub fn from_json(json: &str) -> Result<Self> {
        let script: StubScript = serde_json::from_str(json)
            .map_err(|e| RecaptionError::BadStub(format!("parse error: {e}")))?;
        match script.rules.last() {
            Some(rule) if rule.matcher.any => Ok(script),
            _ => Err(RecaptionError::BadStub(
                "last rule must be a catch-all (\"any\": true)".to_string(),
            )),
        }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| RecaptionError::BadStub(format!("{}: {e}", path.display())))?;
        Self::from_json(&String::from_utf8_lossy(&bytes))
    }

    /// A script answering every request with `text`.
    pub fn constant(text: &str) -> Self {
        StubScript {
            rules: vec![StubRule {
                matcher: StubMatch {
                    any: true,
                    sample_id_prefix: None,
                    family: None,
                },
                response: StubResponse {
                    text: Some(text.to_string()),
                    error: None,
                    fail_times: None,
                },
            }],
        }
    }
}

/// Deterministic scripted endpoint for offline testing. First matching rule
/// wins; `fail_times` counters are tracked per sample id.
pub struct StubEndpoint {
    script: StubScript,
    attempts: Mutex<HashMap<String, u32>>,
}

impl StubEndpoint {
    pub fn new(script: StubScript) -> Self {
        StubEndpoint {
            script,
            attempts: Mutex::new(HashMap::new()),
        }
    }
}

fn render_stub_text(template: &str, req: &InferenceRequest) -> String {
    template
        .replace("{sample_id}", &req.sample_id)
        .replace("{prompt_id}", &req.prompt.prompt_id)
}

impl InferenceBackend for StubEndpoint {
    fn infer(&self, req: &InferenceRequest) -> Attempt {
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| r.matcher.matches(req))
            .expect("stub script has a catch-all rule");
        if let Some(kind) = &rule.response.error {
            return if kind == "permanent" {
                Attempt::Permanent("scripted permanent failure".to_string())
            } else {
                Attempt::Retryable("scripted retryable failure".to_string())
            };
        }
        let text = rule.response.text.clone().unwrap_or_default();
        if let Some(n) = rule.response.fail_times {
            let mut counters = self.attempts.lock().unwrap();
            let seen = counters.entry(req.sample_id.clone()).or_insert(0);
            if *seen < n {
                *seen += 1;
                return Attempt::Retryable("scripted flaky failure".to_string());
            }
        }
        let rendered = render_stub_text(&text, req);
        if rendered.is_empty() {
            Attempt::Permanent("scripted empty text".to_string())
        } else {
            Attempt::Ok(rendered)
        }
    }
}

/// Wrapper that tracks concurrent entries, for asserting the bounded
/// concurrency contract.
pub struct InstrumentedBackend<B> {
    inner: B,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl<B: InferenceBackend> InstrumentedBackend<B> {
    pub fn new(inner: B) -> Self {
        InstrumentedBackend {
            inner,
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<B: InferenceBackend> InferenceBackend for InstrumentedBackend<B> {
    fn infer(&self, req: &InferenceRequest) -> Attempt {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        let out = self.inner.infer(req);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}

/// Runs requests through a bounded worker pool and collects responses keyed
/// by sample id. At most `cfg.max_in_flight` requests are outstanding.
pub fn dispatch_batch(
    requests: Vec<InferenceRequest>,
    cfg: &EndpointConfig,
    backend: &dyn InferenceBackend,
) -> BTreeMap<String, InferenceResponse> {
    let queue = Arc::new(Mutex::new(requests.into_iter().collect::<Vec<_>>()));
    let results = Arc::new(Mutex::new(BTreeMap::new()));
    let workers = cfg.max_in_flight.max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let queue = Arc::clone(&queue);
            let results = Arc::clone(&results);
            scope.spawn(move || loop {
                let req = { queue.lock().unwrap().pop() };
                let Some(req) = req else { break };
                let resp = call_endpoint(&req, cfg, backend);
                results.lock().unwrap().insert(resp.sample_id.clone(), resp);
            });
        }
    });
    Arc::try_unwrap(results).unwrap().into_inner().unwrap()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub sample_id: String,
    pub status: ResponseStatus,
    pub attempts: u32,
    pub last_error: String,
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub round: u32,
    pub seed: u64,
    pub model_id: String,
    /// Fraction of recaptionable records to recaption this round; selection
    /// is keyed by sample id hash so the same subset is chosen across reruns.
    pub fraction: f64,
    /// Abort the round when more than this fraction of dispatched requests
    /// fail permanently.
    pub failure_abort_threshold: f64,
    /// Digest of the parent manifest file, chained into the new lineage.
    pub parent_digest: String,
    pub max_new_tokens: u32,
    pub temperature: f64,
}

impl BatchOptions {
    pub fn new(round: u32, seed: u64, model_id: &str) -> Self {
        BatchOptions {
            round,
            seed,
            model_id: model_id.to_string(),
            fraction: 1.0,
            failure_abort_threshold: 0.2,
            parent_digest: String::new(),
            max_new_tokens: 512,
            temperature: 0.2,
        }
    }
}

pub fn selected_for_fraction(sample_id: &str, fraction: f64) -> bool {
    fraction >= 1.0 || seeded::unit("recaption-fraction", 0, &[sample_id]) < fraction
}

#[derive(Debug)]
pub struct BatchOutcome {
    pub manifest: Manifest,
    pub failures: Vec<FailureRecord>,
}

/// One self-augment round: picks a prompt per record, dispatches, merges
/// responses under the caption policy, and carries previous captions through
/// permanent failures. Non-recaptionable records pass through untouched.
pub fn recaption_batch(
    manifest: &Manifest,
    bank: &PromptBank,
    policy: &MergePolicy,
    cfg: &EndpointConfig,
    backend: &dyn InferenceBackend,
    opts: &BatchOptions,
) -> Result<BatchOutcome> {
    if opts.round == 0 || manifest.lineage.round != opts.round - 1 {
        return Err(RecaptionError::RoundMismatch {
            manifest_round: manifest.lineage.round,
            requested: opts.round,
        });
    }
    let mut requests = Vec::new();
    let mut chosen_prompts: HashMap<String, String> = HashMap::new();
    for rec in &manifest.records {
        if !rec.recaptionable || !selected_for_fraction(&rec.id, opts.fraction) {
            continue;
        }
        let prompt = select_prompt(bank, &rec.id, opts.round, opts.seed)?;
        chosen_prompts.insert(rec.id.clone(), prompt.prompt_id.clone());
        requests.push(InferenceRequest {
            sample_id: rec.id.clone(),
            model_id: opts.model_id.clone(),
            prompt: prompt.clone(),
            image_ref: rec.image_ref.clone(),
            max_new_tokens: opts.max_new_tokens,
            temperature: opts.temperature,
        });
    }
    let dispatched = requests.len();
    let responses = dispatch_batch(requests, cfg, backend);

    let failures: Vec<FailureRecord> = responses
        .values()
        .filter(|r| r.status != ResponseStatus::Ok)
        .map(|r| FailureRecord {
            sample_id: r.sample_id.clone(),
            status: r.status,
            attempts: r.attempts,
            last_error: r.text.clone(),
        })
        .collect();
    if dispatched > 0 {
        let failure_rate = failures.len() as f64 / dispatched as f64;
        if failure_rate > opts.failure_abort_threshold {
            return Err(RecaptionError::Aborted {
                failed: failures.len(),
                total: dispatched,
                threshold: opts.failure_abort_threshold,
                report: failures,
            });
        }
    }

    let mut records = manifest.records.clone();
    for rec in &mut records {
        let Some(resp) = responses.get(&rec.id) else {
            continue;
        };
        let prompt_id = chosen_prompts.remove(&rec.id).unwrap_or_default();
        let entry = match resp.status {
            ResponseStatus::Ok => CaptionEntry {
                round: opts.round,
                prompt_id,
                model_id: opts.model_id.clone(),
                text: merge_captions(&rec.original_text, &resp.text, policy),
                status: CaptionStatus::Generated,
            },
            _ => {
                let prev = rec.effective_caption(opts.round - 1).to_string();
                if prev.is_empty() {
                    CaptionEntry {
                        round: opts.round,
                        prompt_id,
                        model_id: opts.model_id.clone(),
                        text: String::new(),
                        status: CaptionStatus::Failed,
                    }
                } else {
                    CaptionEntry {
                        round: opts.round,
                        prompt_id,
                        model_id: opts.model_id.clone(),
                        text: prev,
                        status: CaptionStatus::Carried,
                    }
                }
            }
        };
        rec.captions.push(entry);
    }

    let lineage = LineageRecord {
        round: opts.round,
        parent_digest: opts.parent_digest.clone(),
        prompt_mix_id: bank.mixture_id(),
        model_id: opts.model_id.clone(),
        seed: opts.seed,
        stats: Default::default(),
    };
    let mut out = Manifest::new(records, lineage)?;
    out.lineage.stats = compute_caption_stats(&out, opts.round)?;
    Ok(BatchOutcome {
        manifest: out,
        failures,
    })
}
