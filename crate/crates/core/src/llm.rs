//! Chat-completion backends.
//!
//! [`LlmProvider`] is the strategy trait; [`LlmClient`] wraps a provider with
//! the retry policy, the in-flight limiter and call logging. Backends are
//! registered by name (`scripted`, `echo`, `http`) and chosen per role
//! (summarizer, updater, generator) from configuration.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embeddings::{http_error, read_token};
use crate::error::{Error, Result};
use crate::prompts::{tag_content, RenderedPrompt};
use crate::registry::Registry;

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String>;

    /// Providers whose output depends on call order (e.g. replay queues)
    /// return `true`; the client then admits one call at a time.
    fn single_flight(&self) -> bool {
        false
    }
}

/// Replays a fixed queue of responses, optionally cycling.
pub struct ScriptedLlm {
    script: Vec<String>,
    queue: Mutex<VecDeque<String>>,
    cycle: bool,
    seen: Mutex<Vec<RenderedPrompt>>,
}

impl ScriptedLlm {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let script: Vec<String> = responses.into_iter().map(Into::into).collect();
        Self {
            queue: Mutex::new(script.iter().cloned().collect()),
            script,
            cycle: false,
            seen: Mutex::new(Vec::new()),
        }
    }

    /// Restart from the top of the script instead of failing on exhaustion.
    pub fn cycling(mut self) -> Self {
        self.cycle = true;
        self
    }

    /// Prompts received so far, in call order.
    pub fn prompts(&self) -> Vec<RenderedPrompt> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl LlmProvider for ScriptedLlm {
    fn name(&self) -> &str {
        "scripted"
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String> {
        self.seen.lock().unwrap_or_else(|e| e.into_inner()).push(prompt.clone());
        let mut q = self.queue.lock().unwrap_or_else(|e| e.into_inner());
        if q.is_empty() && self.cycle && !self.script.is_empty() {
            q.extend(self.script.iter().cloned());
        }
        q.pop_front()
            .ok_or_else(|| Error::provider("scripted", "script exhausted", false))
    }

    fn single_flight(&self) -> bool {
        true
    }
}

/// Responds by calling a closure; handy for prompt-dependent test doubles.
pub struct FnLlm<F> {
    name: String,
    respond: F,
}

impl<F> FnLlm<F>
where
    F: Fn(&RenderedPrompt) -> Result<String> + Send + Sync,
{
    pub fn new(name: impl Into<String>, respond: F) -> Self {
        Self {
            name: name.into(),
            respond,
        }
    }
}

impl<F> LlmProvider for FnLlm<F>
where
    F: Fn(&RenderedPrompt) -> Result<String> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String> {
        (self.respond)(prompt)
    }
}

/// Returns the first `words` words of the prompt's `<Raw_Text>` block, or of
/// the whole user message when there is none. A stand-in summarizer.
pub struct EchoLlm {
    words: usize,
}

impl EchoLlm {
    pub fn new(words: usize) -> Self {
        Self { words }
    }
}

impl LlmProvider for EchoLlm {
    fn name(&self) -> &str {
        "echo"
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String> {
        let source = tag_content(&prompt.user, "Raw_Text").unwrap_or(&prompt.user);
        Ok(source.split_whitespace().take(self.words).collect::<Vec<_>>().join(" "))
    }
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
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// OpenAI-style `/chat/completions` client.
pub struct HttpLlm {
    endpoint: String,
    model: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpLlm {
    pub fn new(config: &LlmConfig) -> Result<Self> {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| Error::Config("http llm needs an endpoint".into()))?;
        let model = config
            .model
            .clone()
            .ok_or_else(|| Error::Config("http llm needs a model name".into()))?;
        Ok(Self {
            endpoint,
            model,
            token: read_token(config.token_env.as_deref())?,
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(config.timeout_secs))
                .build(),
        })
    }
}

impl LlmProvider for HttpLlm {
    fn name(&self) -> &str {
        "http"
    }

    fn complete(&self, prompt: &RenderedPrompt) -> Result<String> {
        let mut messages = Vec::with_capacity(2);
        if !prompt.system.is_empty() {
            messages.push(ChatMessage {
                role: "system",
                content: &prompt.system,
            });
        }
        messages.push(ChatMessage {
            role: "user",
            content: &prompt.user,
        });
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: 0.0,
        };
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp: ChatResponse = req
            .send_json(body)
            .map_err(|e| http_error("http-llm", e))?
            .into_json()
            .map_err(|e| Error::provider("http-llm", format!("bad response body: {e}"), false))?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::provider("http-llm", "response has no message content", false))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay_ms: 250,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.min(16)))
    }
}

struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

/// Rough token count used for call logging (four bytes per token).
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

/// A provider plus retry, concurrency limiting and call accounting.
pub struct LlmClient {
    provider: Arc<dyn LlmProvider>,
    retry: RetryPolicy,
    limiter: Limiter,
    calls: AtomicUsize,
}

impl LlmClient {
    pub fn new(provider: Arc<dyn LlmProvider>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        let max = if provider.single_flight() { 1 } else { max_in_flight };
        Self {
            provider,
            retry,
            limiter: Limiter::new(max),
            calls: AtomicUsize::new(0),
        }
    }

    /// A client with no retries and the default limit; for tests and
    /// offline providers.
    pub fn simple(provider: impl LlmProvider + 'static) -> Self {
        Self::new(Arc::new(provider), RetryPolicy::none(), 4)
    }

    pub fn from_config(config: &LlmConfig) -> Result<Self> {
        let provider = default_registry().create(&config.kind, config)?;
        Ok(Self::new(
            Arc::from(provider),
            RetryPolicy {
                max_retries: config.max_retries,
                base_delay_ms: config.backoff_ms,
            },
            config.max_in_flight,
        ))
    }

    pub fn name(&self) -> &str {
        self.provider.name()
    }

    pub fn single_flight(&self) -> bool {
        self.provider.single_flight()
    }

    /// Number of provider invocations, including retries.
    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, prompt: &RenderedPrompt) -> Result<String> {
        let _slot = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            self.calls.fetch_add(1, Ordering::SeqCst);
            log::debug!(
                "llm call provider={} template={} est_tokens={} attempt={}",
                self.provider.name(),
                prompt.template_id,
                estimate_tokens(&prompt.system) + estimate_tokens(&prompt.user),
                attempt
            );
            match self.provider.complete(prompt) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    log::warn!("{} call failed ({e}); retrying", self.provider.name());
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Convenience wrapper matching the `(provider, system, user)` call shape.
pub fn complete(client: &LlmClient, system: &str, user: &str) -> Result<String> {
    client.complete(&RenderedPrompt {
        template_id: "adhoc".into(),
        system: system.into(),
        user: user.into(),
    })
}

fn default_timeout() -> u64 {
    60
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> u64 {
    250
}

fn default_in_flight() -> usize {
    4
}

fn default_echo_words() -> usize {
    50
}

/// Per-role LLM configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    /// `scripted`, `echo` or `http`.
    pub kind: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub token_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// Replay queue for `scripted`.
    #[serde(default)]
    pub responses: Vec<String>,
    /// Whether `scripted` restarts its queue when exhausted.
    #[serde(default)]
    pub cycle: bool,
    /// Word budget for `echo`.
    #[serde(default = "default_echo_words")]
    pub words: usize,
}

impl LlmConfig {
    pub fn echo(words: usize) -> Self {
        Self {
            words,
            ..Self::of_kind("echo")
        }
    }

    pub fn scripted<S: Into<String>>(responses: impl IntoIterator<Item = S>, cycle: bool) -> Self {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
            cycle,
            ..Self::of_kind("scripted")
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: Some(endpoint.into()),
            model: Some(model.into()),
            ..Self::of_kind("http")
        }
    }

    fn of_kind(kind: &str) -> Self {
        Self {
            kind: kind.into(),
            endpoint: None,
            model: None,
            token_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
            responses: Vec::new(),
            cycle: false,
            words: default_echo_words(),
        }
    }
}

pub fn default_registry() -> Registry<dyn LlmProvider, LlmConfig> {
    let mut reg: Registry<dyn LlmProvider, LlmConfig> = Registry::new("llm");
    reg.register("scripted", |c: &LlmConfig| {
        let s = ScriptedLlm::new(c.responses.clone());
        Ok(Box::new(if c.cycle { s.cycling() } else { s }))
    });
    reg.register("echo", |c: &LlmConfig| Ok(Box::new(EchoLlm::new(c.words))));
    reg.register("http", |c: &LlmConfig| Ok(Box::new(HttpLlm::new(c)?)));
    reg
}
