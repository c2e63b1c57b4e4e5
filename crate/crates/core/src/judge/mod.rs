//! Verdict backends for classifier prompts: a remote chat-completion judge
//! and a deterministic rule-driven judge, behind one caching, retrying,
//! rate-limited front end.

mod cache;
mod limit;
mod remote;
mod scripted;

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::VerdictCache;
pub use limit::TokenBucket;
pub use remote::{RemoteBackend, RemoteConfig, API_KEY_ENV};
pub use scripted::{Predicate, Rule, RuleFile, ScriptedBackend};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: transport failure, rate limiting, server error.
    #[error("transient backend failure: {0}")]
    Transient(String),
    #[error("backend rejected request: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum JudgeError {
    #[error("judge gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("{0}")]
    Backend(String),
    #[error("verdict cache is corrupt: {0}")]
    CacheCorrupt(String),
    #[error("verdict cache i/o: {0}")]
    CacheIo(String),
    #[error("no prompt renderings supplied")]
    NoRenderings,
    #[error("invalid judge config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictValue {
    Yes,
    No,
    Unsure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub value: VerdictValue,
    pub raw: String,
    pub classifier_id: String,
    pub fingerprint: String,
}

fn verdict_token() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(yes|no|unsure)\b").unwrap())
}

/// First whole-word, case-insensitive `yes`/`no`/`unsure` in the reply.
pub fn parse_verdict(reply: &str) -> Option<VerdictValue> {
    verdict_token()
        .find(reply)
        .map(|m| match m.as_str().to_ascii_lowercase().as_str() {
            "yes" => VerdictValue::Yes,
            "no" => VerdictValue::No,
            _ => VerdictValue::Unsure,
        })
}

/// Total version of [`parse_verdict`]: unparseable replies are `Unsure`.
pub fn verdict_of(reply: &str) -> VerdictValue {
    parse_verdict(reply).unwrap_or(VerdictValue::Unsure)
}

/// Content hash identifying a classification unit.
pub fn fingerprint(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// One question put to a backend.
#[derive(Debug, Clone)]
pub struct JudgeRequest<'a> {
    pub classifier_id: &'a str,
    /// Full rendered prompt.
    pub prompt: &'a str,
    /// Text of the unit alone (no context, no template); scripted rules
    /// match against this.
    pub unit_text: &'a str,
    pub fingerprint: &'a str,
}

pub trait Backend: Send + Sync {
    fn complete(&self, request: &JudgeRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles for each later attempt.
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u64 << (attempt - 2).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RephrasingVote {
    #[default]
    Off,
    Majority,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub capacity: f64,
    pub refill_per_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub remote: Option<RemoteConfig>,
    /// Scripted rule file; required for the scripted backend.
    #[serde(default)]
    pub rules: Option<PathBuf>,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    #[serde(default)]
    pub rate_limit: Option<RateLimit>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub rephrasing_vote: RephrasingVote,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            backend: BackendKind::Scripted,
            remote: None,
            rules: None,
            max_concurrency: 1,
            retry: RetryPolicy::default(),
            rate_limit: None,
            cache_dir: None,
            rephrasing_vote: RephrasingVote::Off,
        }
    }
}

impl JudgeConfig {
    pub fn validate(&self) -> Result<(), JudgeError> {
        if self.max_concurrency < 1 {
            return Err(JudgeError::Config("max concurrency must be at least 1".into()));
        }
        if self.retry.max_attempts < 1 {
            return Err(JudgeError::Config("retry attempts must be at least 1".into()));
        }
        if let Some(rl) = self.rate_limit {
            if !(rl.capacity >= 1.0 && rl.refill_per_sec > 0.0) {
                return Err(JudgeError::Config(
                    "rate limit needs capacity >= 1 and a positive refill rate".into(),
                ));
            }
        }
        Ok(())
    }

    /// Builds a judge for this config. `namespace` separates cache entries of
    /// different taxonomy versions.
    pub fn build(&self, namespace: &str) -> Result<Judge, JudgeError> {
        self.validate()?;
        let backend: Arc<dyn Backend> = match self.backend {
            BackendKind::Scripted => {
                let path = self.rules.as_ref().ok_or_else(|| {
                    JudgeError::Config("scripted judge needs a rules file".into())
                })?;
                Arc::new(
                    ScriptedBackend::load(path).map_err(|e| JudgeError::Config(e.to_string()))?,
                )
            }
            BackendKind::Remote => {
                let cfg = self.remote.clone().ok_or_else(|| {
                    JudgeError::Config("remote judge needs an endpoint".into())
                })?;
                Arc::new(RemoteBackend::new(cfg))
            }
        };
        let cache = match &self.cache_dir {
            Some(dir) => VerdictCache::open(dir)?,
            None => VerdictCache::in_memory(),
        };
        let mut judge = Judge::new(backend, cache, self.retry, namespace);
        if let Some(rl) = self.rate_limit {
            judge = judge.with_rate_limit(TokenBucket::new(rl.capacity, rl.refill_per_sec));
        }
        judge.vote = self.rephrasing_vote;
        Ok(judge)
    }
}

/// Caching, retrying front end over a [`Backend`]. Safe to share across
/// worker threads.
pub struct Judge {
    backend: Arc<dyn Backend>,
    cache: VerdictCache,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    namespace: String,
    calls: AtomicU64,
    pub vote: RephrasingVote,
}

impl Judge {
    pub fn new(
        backend: Arc<dyn Backend>,
        cache: VerdictCache,
        retry: RetryPolicy,
        namespace: impl Into<String>,
    ) -> Self {
        Judge {
            backend,
            cache,
            retry,
            limiter: None,
            namespace: namespace.into(),
            calls: AtomicU64::new(0),
            vote: RephrasingVote::Off,
        }
    }

    pub fn scripted(backend: ScriptedBackend) -> Self {
        Self::new(
            Arc::new(backend),
            VerdictCache::in_memory(),
            RetryPolicy {
                max_attempts: 1,
                backoff_base_ms: 0,
            },
            "",
        )
    }

    pub fn with_rate_limit(mut self, bucket: TokenBucket) -> Self {
        self.limiter = Some(bucket);
        self
    }

    /// Backend attempts issued so far (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn cache_key(&self, req: &JudgeRequest<'_>) -> String {
        let mut h = Sha256::new();
        for part in [
            self.namespace.as_str(),
            req.classifier_id,
            &fingerprint(req.prompt),
            req.fingerprint,
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    fn call_with_retries(
        &self,
        req: &JudgeRequest<'_>,
        need_verdict: bool,
    ) -> Result<String, JudgeError> {
        let mut last = String::new();
        let mut last_reply = None;
        for attempt in 1..=self.retry.max_attempts {
            let delay = self.retry.delay_before(attempt);
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
            if let Some(l) = &self.limiter {
                l.acquire();
            }
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(req) {
                Ok(reply) => {
                    if !need_verdict || parse_verdict(&reply).is_some() {
                        return Ok(reply);
                    }
                    last = format!("unparseable reply: {reply:?}");
                    last_reply = Some(reply);
                }
                Err(BackendError::Fatal(e)) => return Err(JudgeError::Backend(e)),
                Err(BackendError::Transient(e)) => last = e,
            }
        }
        // An unparseable reply still counts as an answer; it reads as unsure.
        match last_reply {
            Some(reply) => Ok(reply),
            None => Err(JudgeError::Exhausted {
                attempts: self.retry.max_attempts,
                last,
            }),
        }
    }

    fn reply(&self, req: &JudgeRequest<'_>, need_verdict: bool) -> Result<String, JudgeError> {
        let key = self.cache_key(req);
        let slot = self.cache.slot(&key);
        let outcome = slot.get_or_init(|| {
            if let Some(hit) = self.cache.stored(&key) {
                return Ok(hit);
            }
            let reply = self.call_with_retries(req, need_verdict)?;
            self.cache.persist(&key, req.classifier_id, req.fingerprint, &reply)?;
            Ok(reply)
        });
        outcome.clone()
    }

    /// Judges one rendered prompt.
    pub fn classify(&self, req: &JudgeRequest<'_>) -> Result<Verdict, JudgeError> {
        let raw = self.reply(req, true)?;
        Ok(Verdict {
            value: verdict_of(&raw),
            raw,
            classifier_id: req.classifier_id.to_string(),
            fingerprint: req.fingerprint.to_string(),
        })
    }

    /// Free-text completion (summaries, category names), cached like verdicts.
    pub fn complete_text(&self, req: &JudgeRequest<'_>) -> Result<String, JudgeError> {
        self.reply(req, false)
    }

    /// Judges several renderings of the same unit and takes a strict
    /// majority of `yes`; anything short of that is `no`. A single rendering
    /// behaves exactly like [`classify`](Self::classify).
    pub fn classify_voted(
        &self,
        renderings: &[String],
        classifier_id: &str,
        unit_text: &str,
        fingerprint: &str,
    ) -> Result<Verdict, JudgeError> {
        let verdicts = renderings
            .iter()
            .map(|prompt| {
                self.classify(&JudgeRequest {
                    classifier_id,
                    prompt,
                    unit_text,
                    fingerprint,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        combine_votes(verdicts).ok_or(JudgeError::NoRenderings)
    }
}

/// Strict-majority `yes` vote; ties and unsure pluralities become `no`.
pub fn combine_votes(mut verdicts: Vec<Verdict>) -> Option<Verdict> {
    match verdicts.len() {
        0 => None,
        1 => verdicts.pop(),
        n => {
            let yes = verdicts.iter().filter(|v| v.value == VerdictValue::Yes).count();
            let value = if 2 * yes > n {
                VerdictValue::Yes
            } else {
                VerdictValue::No
            };
            let raw = verdicts
                .iter()
                .map(|v| v.raw.as_str())
                .collect::<Vec<_>>()
                .join("\n---\n");
            let first = &verdicts[0];
            Some(Verdict {
                value,
                raw,
                classifier_id: first.classifier_id.clone(),
                fingerprint: first.fingerprint.clone(),
            })
        }
    }
}
