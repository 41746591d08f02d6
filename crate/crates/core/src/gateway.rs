//! Text-generation backends behind one interface, plus the probability
//! arithmetic built on their token log-probabilities.
//!
//! Two backends ship: [`MockBackend`], which replays a JSON script verbatim,
//! and [`HttpBackend`], which talks to an OpenAI-style completions or chat
//! endpoint. [`Gateway`] wraps either with bounded retries and the common
//! post-processing (token cap, fenced-code unwrapping, logprob checks).

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::invocation::CharSpan;

pub const DEFAULT_MAX_NEW_TOKENS: usize = 256;
pub const DEFAULT_API_KEY_ENV: &str = "DAGKIT_API_KEY";

/// System prompt sent to chat-style (instruction-tuned) backends.
pub const CHAT_SYSTEM_PROMPT: &str = "You are code completion model. You generate code starting from the end of the prompt given to you. You will give your output surrounded by backticks.

Notably, the prompt requires you to complete an API invocation. Complete the API invocation and stop there. Do not write any code other than the single API invocation.

As an example you will be given a code input. And you should return your output as:
```python
<API_INVOCATION_HERE>
```";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend returned no token log-probabilities")]
    MissingLogprobs,
    #[error("backend cannot score continuations")]
    NoScoring,
    #[error("no scripted response for {0}")]
    NoScript(String),
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("no generated token overlaps characters {start}..{end}")]
    Misaligned { start: usize, end: usize },
    #[error("invalid mock script: {0}")]
    Script(String),
    #[error("cannot compute perplexity over zero tokens")]
    EmptyScore,
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// One greedy generation request. Decoding is always greedy (temperature 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub want_logprobs: bool,
    pub system_prompt: Option<String>,
    /// Identifies the task the request belongs to.
    pub task_id: Option<String>,
    /// 1 for the first pass, 2 for the regeneration after retrieval.
    pub pass: u32,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            want_logprobs: false,
            system_prompt: None,
            task_id: None,
            pass: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedToken {
    pub piece: String,
    pub logprob: f64,
    pub char_start: usize,
    pub char_end: usize,
}

/// Generated continuation. When `tokens` is present the pieces concatenate
/// to `text` and their character ranges tile it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub tokens: Option<Vec<GeneratedToken>>,
}

impl GenerationResult {
    pub fn text_only(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            tokens: None,
        }
    }

    pub fn from_pieces<S: AsRef<str>>(pieces: &[S], logprobs: &[f64]) -> Result<Self, GatewayError> {
        if pieces.len() != logprobs.len() {
            return Err(GatewayError::BadResponse(format!(
                "{} token pieces but {} logprobs",
                pieces.len(),
                logprobs.len()
            )));
        }
        let mut text = String::new();
        let mut tokens = Vec::with_capacity(pieces.len());
        let mut at = 0;
        for (piece, &lp) in pieces.iter().zip(logprobs) {
            if !(lp.is_finite() || lp == f64::NEG_INFINITY) || lp > 0.0 {
                return Err(GatewayError::BadResponse(format!("invalid logprob {lp}")));
            }
            let piece = piece.as_ref();
            let n = piece.chars().count();
            tokens.push(GeneratedToken {
                piece: piece.to_string(),
                logprob: lp,
                char_start: at,
                char_end: at + n,
            });
            text.push_str(piece);
            at += n;
        }
        Ok(Self {
            text,
            tokens: Some(tokens),
        })
    }

    /// Keeps only the first `max_tokens` tokens.
    pub fn truncated(mut self, max_tokens: usize) -> Self {
        if let Some(tokens) = &mut self.tokens {
            if tokens.len() > max_tokens {
                tokens.truncate(max_tokens);
                self.text = tokens.iter().map(|t| t.piece.as_str()).collect();
            }
        }
        self
    }

    /// Replaces the text by the body of its first fenced code block, clipping
    /// and re-basing token offsets. Text without a fence is returned as is.
    pub fn unwrap_fenced(self) -> Self {
        let chars: Vec<char> = self.text.chars().collect();
        let Some((from, to)) = fenced_body(&chars) else {
            return self;
        };
        let text: String = chars[from..to].iter().collect();
        let tokens = self.tokens.map(|tokens| {
            tokens
                .into_iter()
                .filter(|t| t.char_start < to && from < t.char_end)
                .map(|t| {
                    let s = t.char_start.max(from);
                    let e = t.char_end.min(to);
                    GeneratedToken {
                        piece: chars[s..e].iter().collect(),
                        logprob: t.logprob,
                        char_start: s - from,
                        char_end: e - from,
                    }
                })
                .collect()
        });
        Self { text, tokens }
    }
}

/// Character range of the first fenced block's body: after the opening
/// fence line, up to the closing fence (or the end of the text).
fn fenced_body(chars: &[char]) -> Option<(usize, usize)> {
    let fence = |i: usize| chars.get(i..i + 3) == Some(&['`', '`', '`'][..]);
    let open = (0..chars.len()).find(|&i| fence(i))?;
    let mut from = open + 3;
    while from < chars.len() && chars[from] != '\n' {
        from += 1;
    }
    from = (from + 1).min(chars.len());
    let close = (from..chars.len()).find(|&i| fence(i)).unwrap_or(chars.len());
    let mut to = close;
    if to > from && chars[to - 1] == '\n' {
        to -= 1;
    }
    Some((from, to.max(from)))
}

/// A text-generation backend. Implementations must be deterministic for a
/// fixed state and request, and safe to call from several threads.
pub trait Backend: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError>;

    /// Teacher-forced log-probabilities of `continuation` given `prompt`.
    fn score(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>, GatewayError>;

    fn supports_logprobs(&self) -> bool;

    /// Chat backends get the system prompt and have their fenced replies
    /// unwrapped.
    fn is_chat(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// Backend plus retry policy and the shared post-processing.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>, retry: RetryPolicy) -> Self {
        Self { backend, retry }
    }

    pub fn supports_logprobs(&self) -> bool {
        self.backend.supports_logprobs()
    }

    fn with_retries<T>(&self, mut op: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let wait = self.retry.delay(attempt);
                    log::warn!("retrying after {e} (attempt {}, waiting {wait:?})", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    /// Generates with the token cap applied, fenced replies unwrapped for chat
    /// backends, and log-probabilities enforced when requested.
    pub fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let mut request = request.clone();
        if self.backend.is_chat() && request.system_prompt.is_none() {
            request.system_prompt = Some(CHAT_SYSTEM_PROMPT.to_string());
        }
        let mut result = self
            .with_retries(|| self.backend.generate(&request))?
            .truncated(request.max_new_tokens);
        if self.backend.is_chat() {
            result = result.unwrap_fenced();
        }
        if request.want_logprobs && result.tokens.is_none() {
            return Err(GatewayError::MissingLogprobs);
        }
        Ok(result)
    }

    pub fn score(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>, GatewayError> {
        self.with_retries(|| self.backend.score(prompt, continuation))
    }
}

/// Minimum probability over the generated tokens that overlap `span`.
pub fn api_confidence(result: &GenerationResult, span: CharSpan) -> Result<f64, GatewayError> {
    let tokens = result.tokens.as_ref().ok_or(GatewayError::MissingLogprobs)?;
    tokens
        .iter()
        .filter(|t| span.overlaps(t.char_start, t.char_end))
        .map(|t| t.logprob.exp())
        .reduce(f64::min)
        .ok_or(GatewayError::Misaligned {
            start: span.start,
            end: span.end,
        })
}

/// exp(-(1/n) * sum of logprobs).
pub fn perplexity(logprobs: &[f64]) -> Result<f64, GatewayError> {
    if logprobs.is_empty() {
        return Err(GatewayError::EmptyScore);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Perplexity of the API name tokens when forced as the continuation of
/// `prompt`.
pub fn perplexity_over_api_tokens(
    gateway: &Gateway,
    prompt: &str,
    api_name_text: &str,
) -> Result<f64, GatewayError> {
    perplexity(&gateway.score(prompt, api_name_text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockEntry {
    /// A task id (exact) or a prompt substring.
    #[serde(rename = "match")]
    pub pattern: String,
    pub completion: String,
    #[serde(default)]
    pub token_pieces: Option<Vec<String>>,
    #[serde(default)]
    pub logprobs: Option<Vec<f64>>,
    /// Restricts the entry to one generation pass.
    #[serde(default)]
    pub pass: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScore {
    #[serde(rename = "match")]
    pub pattern: String,
    pub continuation: String,
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
    #[serde(default)]
    pub scores: Vec<MockScore>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Full(MockScript),
    Entries(Vec<MockEntry>),
}

/// Replays scripted completions. Token pieces and logprobs are returned
/// verbatim, never re-tokenized.
///
/// Lookup: the first entry whose `match` equals the request's task id wins;
/// failing that, the first entry whose `match` occurs in the prompt. Entries
/// with a `pass` only apply to that pass.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    script: MockScript,
    chat: bool,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, GatewayError> {
        for (i, e) in script.entries.iter().enumerate() {
            match (&e.token_pieces, &e.logprobs) {
                (Some(pieces), Some(lps)) => {
                    let r = GenerationResult::from_pieces(pieces, lps)
                        .map_err(|err| GatewayError::Script(format!("entries[{i}]: {err}")))?;
                    if r.text != e.completion {
                        return Err(GatewayError::Script(format!(
                            "entries[{i}]: token pieces do not concatenate to the completion"
                        )));
                    }
                }
                (None, None) => {}
                _ => {
                    return Err(GatewayError::Script(format!(
                        "entries[{i}]: token_pieces and logprobs must be given together"
                    )))
                }
            }
        }
        for (i, s) in script.scores.iter().enumerate() {
            if s.logprobs.iter().any(|lp| *lp > 0.0 || lp.is_nan()) {
                return Err(GatewayError::Script(format!("scores[{i}]: logprobs must be <= 0")));
            }
        }
        Ok(Self { script, chat: false })
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let file: ScriptFile =
            serde_json::from_str(text).map_err(|e| GatewayError::Script(e.to_string()))?;
        Self::new(match file {
            ScriptFile::Full(s) => s,
            ScriptFile::Entries(entries) => MockScript {
                entries,
                scores: vec![],
            },
        })
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Treat the script as a chat model's replies.
    pub fn chat(mut self, chat: bool) -> Self {
        self.chat = chat;
        self
    }

    fn find(&self, request: &GenerationRequest) -> Option<&MockEntry> {
        let pass_ok = |e: &&MockEntry| e.pass.is_none_or(|p| p == request.pass);
        let by_id = request.task_id.as_deref().and_then(|id| {
            self.script
                .entries
                .iter()
                .filter(pass_ok)
                .find(|e| e.pattern == id)
        });
        by_id.or_else(|| {
            self.script
                .entries
                .iter()
                .filter(pass_ok)
                .find(|e| request.prompt.contains(&e.pattern))
        })
    }
}

impl Backend for MockBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        let entry = self.find(request).ok_or_else(|| {
            GatewayError::NoScript(format!(
                "task {:?} pass {}",
                request.task_id.as_deref().unwrap_or("?"),
                request.pass
            ))
        })?;
        match (&entry.token_pieces, &entry.logprobs) {
            (Some(pieces), Some(lps)) => GenerationResult::from_pieces(pieces, lps),
            _ => Ok(GenerationResult::text_only(entry.completion.clone())),
        }
    }

    fn score(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>, GatewayError> {
        self.script
            .scores
            .iter()
            .find(|s| s.continuation == continuation && prompt.contains(&s.pattern))
            .map(|s| s.logprobs.clone())
            .ok_or_else(|| GatewayError::NoScript(format!("score of {continuation:?}")))
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn is_chat(&self) -> bool {
        self.chat
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL including the version prefix, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub chat: bool,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout() -> u64 {
    120
}

/// OpenAI-compatible completions / chat-completions client.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Self {
            config,
            client,
            api_key,
        })
    }

    fn post(&self, route: &str, body: &Value) -> Result<Value, GatewayError> {
        let url = format!("{}/{}", self.config.base_url.trim_end_matches('/'), route);
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse(e.to_string()))
    }

    fn completion_body(&self, request: &GenerationRequest) -> Value {
        json!({
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_new_tokens,
            "temperature": 0,
            "logprobs": 1,
        })
    }

    fn chat_body(&self, request: &GenerationRequest) -> Value {
        let system = request.system_prompt.as_deref().unwrap_or(CHAT_SYSTEM_PROMPT);
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": request.prompt},
            ],
            "max_tokens": request.max_new_tokens,
            "temperature": 0,
            "logprobs": true,
        })
    }
}

/// Builds a result from the returned pieces, dropping them (with a warning)
/// when they do not reproduce the text.
fn with_pieces(text: String, pieces: Option<(Vec<String>, Vec<f64>)>) -> GenerationResult {
    if let Some((pieces, lps)) = pieces {
        match GenerationResult::from_pieces(&pieces, &lps) {
            Ok(r) if r.text == text => return r,
            Ok(_) => log::warn!("token pieces do not reproduce the completion text; ignoring logprobs"),
            Err(e) => log::warn!("ignoring logprobs: {e}"),
        }
    }
    GenerationResult::text_only(text)
}

fn parse_completion(v: &Value) -> Result<GenerationResult, GatewayError> {
    let choice = &v["choices"][0];
    let text = choice["text"]
        .as_str()
        .ok_or_else(|| GatewayError::BadResponse("missing choices[0].text".into()))?
        .to_string();
    let lp = &choice["logprobs"];
    let pieces = match (lp["tokens"].as_array(), lp["token_logprobs"].as_array()) {
        (Some(toks), Some(lps)) => Some((
            toks.iter().map(|t| t.as_str().unwrap_or("").to_string()).collect(),
            lps.iter().map(|x| x.as_f64().unwrap_or(f64::NEG_INFINITY)).collect(),
        )),
        _ => None,
    };
    Ok(with_pieces(text, pieces))
}

fn parse_chat(v: &Value) -> Result<GenerationResult, GatewayError> {
    let choice = &v["choices"][0];
    let text = choice["message"]["content"]
        .as_str()
        .ok_or_else(|| GatewayError::BadResponse("missing choices[0].message.content".into()))?
        .to_string();
    let pieces = choice["logprobs"]["content"].as_array().map(|items| {
        items
            .iter()
            .map(|it| {
                (
                    it["token"].as_str().unwrap_or("").to_string(),
                    it["logprob"].as_f64().unwrap_or(f64::NEG_INFINITY),
                )
            })
            .unzip()
    });
    Ok(with_pieces(text, pieces))
}

impl Backend for HttpBackend {
    fn generate(&self, request: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
        if self.config.chat {
            parse_chat(&self.post("chat/completions", &self.chat_body(request))?)
        } else {
            parse_completion(&self.post("completions", &self.completion_body(request))?)
        }
    }

    /// Echoes prompt + continuation with zero new tokens and reads back the
    /// log-probabilities of the tokens that start inside the continuation.
    fn score(&self, prompt: &str, continuation: &str) -> Result<Vec<f64>, GatewayError> {
        if self.config.chat {
            return Err(GatewayError::NoScoring);
        }
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prompt}{continuation}"),
            "max_tokens": 0,
            "temperature": 0,
            "logprobs": 1,
            "echo": true,
        });
        let v = self.post("completions", &body)?;
        let lp = &v["choices"][0]["logprobs"];
        let (Some(offsets), Some(lps)) = (lp["text_offset"].as_array(), lp["token_logprobs"].as_array())
        else {
            return Err(GatewayError::NoScoring);
        };
        let cut = prompt.len() as u64;
        let scored: Vec<f64> = offsets
            .iter()
            .zip(lps)
            .filter(|(o, _)| o.as_u64().is_some_and(|o| o >= cut))
            .filter_map(|(_, lp)| lp.as_f64())
            .collect();
        if scored.is_empty() {
            return Err(GatewayError::EmptyScore);
        }
        Ok(scored)
    }

    fn supports_logprobs(&self) -> bool {
        true
    }

    fn is_chat(&self) -> bool {
        self.config.chat
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(p: f64) -> f64 {
        p.ln()
    }

    fn mock(json: &str) -> Gateway {
        Gateway::new(Arc::new(MockBackend::from_json(json).unwrap()), RetryPolicy::none())
    }

    #[test]
    fn scripted_echo() {
        let g = mock(
            r#"[{"match": "P", "completion": "client.f(a=1)",
                 "token_pieces": ["client", ".", "f", "(a=1)"],
                 "logprobs": [-0.01005033585350145, -0.01005033585350145, -0.01005033585350145, -0.01005033585350145]}]"#,
        );
        let mut req = GenerationRequest::new("P");
        req.want_logprobs = true;
        let r = g.generate(&req).unwrap();
        assert_eq!(r.text, "client.f(a=1)");
        let toks = r.tokens.unwrap();
        assert_eq!(toks.len(), 4);
        assert_eq!((toks[2].char_start, toks[2].char_end), (7, 8));
        assert!((toks[0].logprob.exp() - 0.99).abs() < 1e-12);
        assert_eq!(g.generate(&req).unwrap().text, "client.f(a=1)");
    }

    #[test]
    fn task_id_beats_substring_and_pass_filters() {
        let g = mock(
            r#"{"entries": [
                {"match": "shared", "completion": "a()"},
                {"match": "t1", "completion": "b()", "pass": 1},
                {"match": "t1", "completion": "c()", "pass": 2}
            ]}"#,
        );
        let mut req = GenerationRequest::new("shared prompt");
        req.task_id = Some("t1".into());
        assert_eq!(g.generate(&req).unwrap().text, "b()");
        req.pass = 2;
        assert_eq!(g.generate(&req).unwrap().text, "c()");
        req.task_id = Some("t9".into());
        assert_eq!(g.generate(&req).unwrap().text, "a()");
        let miss = GenerationRequest::new("nothing");
        assert!(matches!(g.generate(&miss), Err(GatewayError::NoScript(_))));
    }

    #[test]
    fn fenced_reply_is_unwrapped() {
        let pieces = ["```python\n", "client", ".delete", "_message", "(Q=1)", "\n```"];
        let lps = [-0.1, -0.2, -0.3, -0.4, -0.5, -0.6];
        let r = GenerationResult::from_pieces(&pieces, &lps).unwrap().unwrap_fenced();
        assert_eq!(r.text, "client.delete_message(Q=1)");
        let toks = r.tokens.unwrap();
        let joined: String = toks.iter().map(|t| t.piece.as_str()).collect();
        assert_eq!(joined, r.text);
        assert_eq!(toks.first().unwrap().logprob, -0.2);
        assert_eq!(toks.last().unwrap().logprob, -0.5);

        let backend = MockBackend::from_json(
            r#"[{"match": "x", "completion": "Sure:\n```python\nf(a=1)\n```\nDone."}]"#,
        )
        .unwrap()
        .chat(true);
        let g = Gateway::new(Arc::new(backend), RetryPolicy::none());
        assert_eq!(g.generate(&GenerationRequest::new("x")).unwrap().text, "f(a=1)");
        assert_eq!(
            GenerationResult::text_only("no fence").unwrap_fenced().text,
            "no fence"
        );
        assert_eq!(
            GenerationResult::text_only("```\nf(1)").unwrap_fenced().text,
            "f(1)"
        );
    }

    #[test]
    fn cap_truncates_scripted_tokens() {
        let pieces: Vec<String> = (0..300).map(|i| format!("t{i} ")).collect();
        let lps = vec![-0.5; 300];
        let entry = MockEntry {
            pattern: "p".into(),
            completion: pieces.concat(),
            token_pieces: Some(pieces.clone()),
            logprobs: Some(lps),
            pass: None,
        };
        let backend = MockBackend::new(MockScript {
            entries: vec![entry],
            scores: vec![],
        })
        .unwrap();
        let g = Gateway::new(Arc::new(backend), RetryPolicy::none());
        let r = g.generate(&GenerationRequest::new("p")).unwrap();
        assert_eq!(r.tokens.as_ref().unwrap().len(), 256);
        assert_eq!(r.text, pieces[..256].concat());
    }

    #[test]
    fn missing_logprobs_is_a_capability_error() {
        let g = mock(r#"[{"match": "p", "completion": "f()"}]"#);
        let mut req = GenerationRequest::new("p");
        assert!(g.generate(&req).is_ok());
        req.want_logprobs = true;
        assert_eq!(g.generate(&req), Err(GatewayError::MissingLogprobs));
    }

    #[test]
    fn script_validation() {
        assert!(MockBackend::from_json(
            r#"[{"match": "p", "completion": "ab", "token_pieces": ["a"], "logprobs": [-1]}]"#
        )
        .is_err());
        assert!(MockBackend::from_json(
            r#"[{"match": "p", "completion": "a", "token_pieces": ["a"], "logprobs": [0.5]}]"#
        )
        .is_err());
        assert!(MockBackend::from_json(r#"[{"match": "p", "completion": "a", "token_pieces": ["a"]}]"#).is_err());
    }

    fn result(pieces: &[&str], probs: &[f64]) -> GenerationResult {
        let lps: Vec<f64> = probs.iter().map(|p| ln(*p)).collect();
        GenerationResult::from_pieces(pieces, &lps).unwrap()
    }

    #[test]
    fn confidence_is_min_over_name_tokens() {
        // "client." "delete" "_mess" "age" "(" ; the name spans chars 7..21
        let r = result(&["client.", "delete", "_mess", "age", "("], &[0.1, 0.9, 0.6, 0.99, 0.05]);
        let c = api_confidence(&r, CharSpan { start: 7, end: 21 }).unwrap();
        assert_eq!(c, (0.6f64).ln().exp());
        assert!((c - 0.6).abs() < 1e-15);
        let single = result(&["x.", "put", "("], &[0.3, 0.8, 0.2]);
        assert!((api_confidence(&single, CharSpan { start: 2, end: 5 }).unwrap() - 0.8).abs() < 1e-15);
        assert!(matches!(
            api_confidence(&single, CharSpan { start: 40, end: 45 }),
            Err(GatewayError::Misaligned { .. })
        ));
        assert_eq!(
            api_confidence(&GenerationResult::text_only("f()"), CharSpan { start: 0, end: 1 }),
            Err(GatewayError::MissingLogprobs)
        );
    }

    #[test]
    fn perplexity_values() {
        assert!((perplexity(&[ln(0.5), ln(0.5)]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(perplexity(&[0.0, 0.0]).unwrap(), 1.0);
        let p = perplexity(&[ln(0.9), ln(0.6), ln(0.99)]).unwrap();
        assert!((p - 1.2321313710337647).abs() < 1e-12, "{p}");
        assert_eq!(perplexity(&[]), Err(GatewayError::EmptyScore));
    }

    #[test]
    fn mock_scoring() {
        let g = mock(
            r#"{"entries": [], "scores": [{"match": "import boto3", "continuation": "delete_message", "logprobs": [-0.6931471805599453, -0.6931471805599453]}]}"#,
        );
        let ppl = perplexity_over_api_tokens(&g, "import boto3\nc.", "delete_message").unwrap();
        assert!((ppl - 2.0).abs() < 1e-12);
        assert!(perplexity_over_api_tokens(&g, "other", "delete_message").is_err());
    }

    struct Flaky {
        fails: std::sync::atomic::AtomicU32,
        error: GatewayError,
    }

    impl Backend for Flaky {
        fn generate(&self, _: &GenerationRequest) -> Result<GenerationResult, GatewayError> {
            use std::sync::atomic::Ordering;
            if self.fails.load(Ordering::SeqCst) > 0 {
                self.fails.fetch_sub(1, Ordering::SeqCst);
                return Err(self.error.clone());
            }
            Ok(GenerationResult::text_only("ok()"))
        }
        fn score(&self, _: &str, _: &str) -> Result<Vec<f64>, GatewayError> {
            Err(GatewayError::NoScoring)
        }
        fn supports_logprobs(&self) -> bool {
            false
        }
    }

    #[test]
    fn retries_are_bounded() {
        let policy = RetryPolicy {
            max_retries: 2,
            base_delay_ms: 1,
            max_delay_ms: 2,
        };
        let flaky = |n: u32, error| {
            Gateway::new(
                Arc::new(Flaky {
                    fails: n.into(),
                    error,
                }),
                policy,
            )
        };
        let transport = GatewayError::Transport("reset".into());
        assert!(flaky(2, transport.clone()).generate(&GenerationRequest::new("")).is_ok());
        assert_eq!(
            flaky(3, transport.clone()).generate(&GenerationRequest::new("")),
            Err(transport)
        );
        let bad_request = GatewayError::Http {
            status: 400,
            body: String::new(),
        };
        assert_eq!(
            flaky(1, bad_request.clone()).generate(&GenerationRequest::new("")),
            Err(bad_request)
        );
        assert!(GatewayError::Http { status: 503, body: String::new() }.is_retryable());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn splitting_a_token_keeps_the_minimum(
                probs in proptest::collection::vec(0.01f64..=1.0, 1..6),
                split_at in 0usize..6,
            ) {
                let pieces: Vec<String> = (0..probs.len()).map(|i| format!("ab{i}")).collect();
                let lps: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
                let whole = GenerationResult::from_pieces(&pieces, &lps).unwrap();
                let k = split_at % pieces.len();
                let mut fine_pieces = Vec::new();
                let mut fine_lps = Vec::new();
                for (i, p) in pieces.iter().enumerate() {
                    if i == k {
                        fine_pieces.push(p[..1].to_string());
                        fine_pieces.push(p[1..].to_string());
                        fine_lps.extend([lps[i], lps[i]]);
                    } else {
                        fine_pieces.push(p.clone());
                        fine_lps.push(lps[i]);
                    }
                }
                let fine = GenerationResult::from_pieces(&fine_pieces, &fine_lps).unwrap();
                let span = CharSpan { start: 1, end: whole.text.chars().count() - 1 };
                prop_assert_eq!(api_confidence(&whole, span).unwrap(), api_confidence(&fine, span).unwrap());
            }

            #[test]
            fn perplexity_at_least_one(probs in proptest::collection::vec(0.001f64..=1.0, 1..10)) {
                let lps: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
                let p = perplexity(&lps).unwrap();
                prop_assert!(p >= 1.0 - 1e-12);
                if probs.iter().all(|p| *p == 1.0) {
                    prop_assert_eq!(p, 1.0);
                }
            }
        }
    }
}
