//! Model access: text infilling and NLL scoring.
//!
//! [`HttpBackend`] speaks the JSON wire protocol:
//!
//! ```text
//! POST /v1/infill {"prompt": str, "max_new_tokens": int|null, "num_return_sequences": int}
//!              -> {"outputs": [{"text": str, "nll": float, "token_count": int}]}
//! POST /v1/score  {"text": str} -> {"nll": float, "token_count": int}
//! non-2xx      -> {"error": str}
//! ```
//!
//! [`EchoBackend`] and [`ScriptBackend`] are deterministic in-process mocks.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::MASK_TOKEN;

/// Environment variable holding the default backend URL.
pub const BACKEND_URL_ENV: &str = "HTLM_BACKEND_URL";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;
pub const DEFAULT_ATTEMPTS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: usize, message: String },
    #[error("backend returned {status}: {message}")]
    Server { status: u16, message: String },
    #[error("malformed backend response: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillRequest {
    pub prompt: String,
    pub max_new_tokens: Option<usize>,
    pub num_return_sequences: usize,
}

impl InfillRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        InfillRequest {
            prompt: prompt.into(),
            max_new_tokens: None,
            num_return_sequences: 1,
        }
    }

    fn check(&self, mask_token: &str) -> Result<(), BackendError> {
        if !self.prompt.contains(mask_token) {
            return Err(BackendError::Precondition(format!(
                "prompt contains no {mask_token} sentinel"
            )));
        }
        if self.num_return_sequences == 0 {
            return Err(BackendError::Precondition(
                "num_return_sequences must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredText {
    pub text: String,
    /// Total negative log-likelihood in nats.
    pub nll: f64,
    pub token_count: usize,
}

impl ScoredText {
    pub fn perplexity(&self) -> f64 {
        (self.nll / self.token_count as f64).exp()
    }

    fn check(&self) -> Result<(), BackendError> {
        if self.token_count == 0 {
            return Err(BackendError::Protocol("token_count is 0".into()));
        }
        if !(self.nll >= 0.0 && self.nll.is_finite()) {
            return Err(BackendError::Protocol(format!("invalid nll {}", self.nll)));
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn infill(&self, req: &InfillRequest) -> Result<Vec<ScoredText>, BackendError>;
    fn score(&self, text: &str) -> Result<ScoredText, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn infill(&self, req: &InfillRequest) -> Result<Vec<ScoredText>, BackendError> {
        (**self).infill(req)
    }
    fn score(&self, text: &str) -> Result<ScoredText, BackendError> {
        (**self).score(text)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn infill(&self, req: &InfillRequest) -> Result<Vec<ScoredText>, BackendError> {
        (**self).infill(req)
    }
    fn score(&self, text: &str) -> Result<ScoredText, BackendError> {
        (**self).score(text)
    }
}

fn check_score_text(text: &str) -> Result<(), BackendError> {
    if text.is_empty() {
        return Err(BackendError::Precondition("cannot score empty text".into()));
    }
    Ok(())
}

/// Replaces each sentinel (mask token plus optional hint digits) in turn.
pub fn replace_sentinels(text: &str, mask_token: &str, mut fill: impl FnMut(usize) -> String) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut i = 0;
    while let Some(pos) = rest.find(mask_token) {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + mask_token.len()..];
        let digits = after.len() - after.trim_start_matches(|c: char| c.is_ascii_digit()).len();
        out.push_str(&fill(i));
        i += 1;
        rest = &after[digits..];
    }
    out.push_str(rest);
    out
}

/// Replaces every sentinel with configured text. Scores are `nll = 0` and a
/// whitespace token count.
#[derive(Debug, Clone)]
pub struct EchoBackend {
    fills: Vec<String>,
    mask_token: String,
}

impl EchoBackend {
    pub fn new(fill: impl Into<String>) -> Self {
        Self::with_fills(vec![fill.into()])
    }

    /// The i-th sentinel gets `fills[i]`; later sentinels reuse the last fill.
    pub fn with_fills(fills: Vec<String>) -> Self {
        EchoBackend {
            fills,
            mask_token: MASK_TOKEN.to_string(),
        }
    }

    pub fn with_mask_token(mut self, token: impl Into<String>) -> Self {
        self.mask_token = token.into();
        self
    }

    fn scored(text: String) -> ScoredText {
        let token_count = text.split_whitespace().count().max(1);
        ScoredText {
            text,
            nll: 0.0,
            token_count,
        }
    }
}

impl Backend for EchoBackend {
    fn infill(&self, req: &InfillRequest) -> Result<Vec<ScoredText>, BackendError> {
        req.check(&self.mask_token)?;
        let text = replace_sentinels(&req.prompt, &self.mask_token, |i| {
            self.fills
                .get(i)
                .or(self.fills.last())
                .cloned()
                .unwrap_or_default()
        });
        Ok(vec![Self::scored(text); req.num_return_sequences])
    }

    fn score(&self, text: &str) -> Result<ScoredText, BackendError> {
        check_score_text(text)?;
        Ok(Self::scored(text.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScoreRule {
    Exact(String),
    Contains(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoggedCall {
    Infill(InfillRequest),
    Score(String),
}

/// Replays an ordered table of infill responses and answers score calls from
/// a rule table (first matching rule wins).
#[derive(Debug, Default)]
pub struct ScriptBackend {
    infills: Mutex<VecDeque<Result<Vec<ScoredText>, BackendError>>>,
    rules: Vec<(ScoreRule, f64, usize)>,
    log: Mutex<Vec<LoggedCall>>,
}

impl ScriptBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_infill(self, outputs: Vec<ScoredText>) -> Self {
        self.infills.lock().unwrap().push_back(Ok(outputs));
        self
    }

    /// Queues a single-output infill response.
    pub fn push_text(self, text: impl Into<String>, nll: f64, token_count: usize) -> Self {
        self.push_infill(vec![ScoredText {
            text: text.into(),
            nll,
            token_count,
        }])
    }

    pub fn push_error(self, err: BackendError) -> Self {
        self.infills.lock().unwrap().push_back(Err(err));
        self
    }

    pub fn score_rule(mut self, rule: ScoreRule, nll: f64, token_count: usize) -> Self {
        self.rules.push((rule, nll, token_count));
        self
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().unwrap().clone()
    }

    pub fn infill_prompts(&self) -> Vec<String> {
        self.calls()
            .into_iter()
            .filter_map(|c| match c {
                LoggedCall::Infill(r) => Some(r.prompt),
                LoggedCall::Score(_) => None,
            })
            .collect()
    }

    pub fn remaining(&self) -> usize {
        self.infills.lock().unwrap().len()
    }
}

impl Backend for ScriptBackend {
    fn infill(&self, req: &InfillRequest) -> Result<Vec<ScoredText>, BackendError> {
        self.log.lock().unwrap().push(LoggedCall::Infill(req.clone()));
        req.check(MASK_TOKEN)?;
        self.infills
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(BackendError::Protocol("script exhausted".into())))
    }

    fn score(&self, text: &str) -> Result<ScoredText, BackendError> {
        self.log.lock().unwrap().push(LoggedCall::Score(text.to_string()));
        check_score_text(text)?;
        self.rules
            .iter()
            .find(|(rule, _, _)| match rule {
                ScoreRule::Exact(s) => s == text,
                ScoreRule::Contains(s) => text.contains(s.as_str()),
            })
            .map(|(_, nll, token_count)| ScoredText {
                text: text.to_string(),
                nll: *nll,
                token_count: *token_count,
            })
            .ok_or_else(|| BackendError::Protocol("no score rule matches".into()))
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Limiter {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone)]
pub struct HttpOptions {
    pub max_in_flight: usize,
    pub attempts: usize,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub timeout: Duration,
}

impl Default for HttpOptions {
    fn default() -> Self {
        HttpOptions {
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            attempts: DEFAULT_ATTEMPTS,
            backoff: Duration::from_millis(200),
            timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, Deserialize)]
struct InfillResponse {
    outputs: Vec<ScoredText>,
}

#[derive(Debug, Deserialize)]
struct ScoreResponse {
    nll: f64,
    token_count: usize,
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug, Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

/// Blocking HTTP client. Shareable across threads.
#[derive(Debug)]
pub struct HttpBackend {
    base: String,
    client: reqwest::blocking::Client,
    opts: HttpOptions,
    limiter: Limiter,
}

impl HttpBackend {
    pub fn new(base_url: &str) -> Result<Self, BackendError> {
        Self::with_options(base_url, HttpOptions::default())
    }

    pub fn with_options(base_url: &str, opts: HttpOptions) -> Result<Self, BackendError> {
        if opts.max_in_flight == 0 || opts.attempts == 0 {
            return Err(BackendError::Precondition(
                "max_in_flight and attempts must be at least 1".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(opts.timeout)
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(HttpBackend {
            base: base_url.trim_end_matches('/').to_string(),
            client,
            limiter: Limiter::new(opts.max_in_flight),
            opts,
        })
    }

    /// Uses `HTLM_BACKEND_URL`.
    pub fn from_env() -> Result<Self, BackendError> {
        let url = std::env::var(BACKEND_URL_ENV).map_err(|_| {
            BackendError::Precondition(format!("{BACKEND_URL_ENV} is not set"))
        })?;
        Self::new(&url)
    }

    pub fn base_url(&self) -> &str {
        &self.base
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let _permit = self.limiter.acquire();
        let url = format!("{}{}", self.base, path);
        let mut delay = self.opts.backoff;
        let mut last = String::new();
        for attempt in 1..=self.opts.attempts {
            if attempt > 1 {
                log::warn!("{url}: attempt {} failed ({last}), retrying", attempt - 1);
                std::thread::sleep(delay);
                delay *= 2;
            }
            let resp = match self.client.post(&url).json(body).send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            let bytes = match resp.bytes() {
                Ok(b) => b,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            if status.is_success() {
                return serde_json::from_slice(&bytes)
                    .map_err(|e| BackendError::Protocol(e.to_string()));
            }
            let message = serde_json::from_slice::<ErrorBody>(&bytes)
                .map(|b| b.error)
                .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
            if status.is_server_error() {
                last = format!("{status}: {message}");
                continue;
            }
            return Err(BackendError::Server {
                status: status.as_u16(),
                message,
            });
        }
        Err(BackendError::Transport {
            attempts: self.opts.attempts,
            message: last,
        })
    }
}

impl Backend for HttpBackend {
    fn infill(&self, req: &InfillRequest) -> Result<Vec<ScoredText>, BackendError> {
        req.check(MASK_TOKEN)?;
        let resp: InfillResponse = self.post("/v1/infill", req)?;
        if resp.outputs.len() != req.num_return_sequences {
            return Err(BackendError::Protocol(format!(
                "expected {} outputs, got {}",
                req.num_return_sequences,
                resp.outputs.len()
            )));
        }
        for out in &resp.outputs {
            out.check()?;
        }
        Ok(resp.outputs)
    }

    fn score(&self, text: &str) -> Result<ScoredText, BackendError> {
        check_score_text(text)?;
        let resp: ScoreResponse = self.post("/v1/score", &ScoreRequest { text })?;
        let scored = ScoredText {
            text: text.to_string(),
            nll: resp.nll,
            token_count: resp.token_count,
        };
        scored.check()?;
        Ok(scored)
    }
}

/// Builds a backend from `echo`, `echo:TEXT`, or an `http(s)://` URL.
pub fn backend_from_spec(spec: &str) -> Result<Box<dyn Backend>, BackendError> {
    if spec == "echo" {
        return Ok(Box::new(EchoBackend::new("")));
    }
    if let Some(fill) = spec.strip_prefix("echo:") {
        return Ok(Box::new(EchoBackend::new(fill)));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        return Ok(Box::new(HttpBackend::new(spec)?));
    }
    Err(BackendError::Precondition(format!(
        "unknown backend {spec:?}; expected echo, echo:TEXT or a URL"
    )))
}
