//! Zero-shot speaker attribution with an instruction-following model.
//!
//! A prompt lists the context, the quotation and the numbered candidates;
//! the free-text answer is scored with [`lenient_match`]. Transport is
//! behind [`LlmClient`]; this module ships an offline [`StubClient`] and a
//! content-addressed [`ResponseCache`]. Each quotation gets exactly one
//! request.
//!
//! Default prompt:
//!
//! ```text
//! Identify the speaker of the quotation marked below.
//! Context: <left context> [QUOTE] <quotation> [/QUOTE] <right context>
//! Candidates:
//! 1. <canonical name> (also: <aliases>)
//! ...
//! Answer with the name of the speaker.
//! ```
//!
//! The chain-of-thought style replaces the last line with
//! `Think step by step, then give the name of the speaker.`

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::io::read_jsonl;
use crate::corpus::{CharacterRoster, NovelCorpus, QuotationInstance, QuoteKey, SplitSpec};
use crate::error::{Error, Result};
use crate::evaluation::{check_coverage, lenient_match, FoldReport, Outcome};
use crate::sha256_hex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    #[default]
    Plain,
    ChainOfThought,
}

pub fn build_prompt(instance: &QuotationInstance, roster: &CharacterRoster, style: PromptStyle) -> String {
    let mut p = String::from("Identify the speaker of the quotation marked below.\nContext:");
    for part in [
        instance.left_context.trim(),
        "[QUOTE]",
        instance.text.trim(),
        "[/QUOTE]",
        instance.right_context.trim(),
    ] {
        if !part.is_empty() {
            p.push(' ');
            p.push_str(part);
        }
    }
    p.push_str("\nCandidates:\n");
    for (i, e) in roster.entries.iter().enumerate() {
        p.push_str(&format!("{}. {}", i + 1, e.canonical_name));
        if !e.aliases.is_empty() {
            p.push_str(&format!(" (also: {})", e.aliases.join(", ")));
        }
        p.push('\n');
    }
    p.push_str(match style {
        PromptStyle::Plain => "Answer with the name of the speaker.",
        PromptStyle::ChainOfThought => "Think step by step, then give the name of the speaker.",
    });
    p
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmRequest {
    #[serde(flatten)]
    pub key: QuoteKey,
    pub prompt: String,
}

pub trait LlmClient: Send + Sync {
    /// Identifier recorded in run manifests.
    fn name(&self) -> &str;

    /// Raw completion text. Transport failures should be
    /// [`Error::Client`] with `retriable` set.
    fn complete(&self, request: &LlmRequest) -> Result<String>;
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CannedResponse {
    #[serde(flatten)]
    key: QuoteKey,
    response: String,
}

/// Offline client answering from canned responses.
pub struct StubClient {
    responses: HashMap<QuoteKey, String>,
    fallback: String,
}

impl StubClient {
    pub fn new(responses: HashMap<QuoteKey, String>) -> Self {
        StubClient {
            responses,
            fallback: "I cannot tell who is speaking.".into(),
        }
    }

    /// Reads `{"novel_id", "quote_id", "response"}` lines.
    pub fn from_fixture(path: &Path) -> Result<Self> {
        let rows: Vec<CannedResponse> = read_jsonl(path)?;
        Ok(Self::new(rows.into_iter().map(|r| (r.key, r.response)).collect()))
    }

    /// Answers every quotation with its gold speaker.
    pub fn gold(corpus: &NovelCorpus) -> Self {
        let responses = corpus
            .novels
            .values()
            .flat_map(|n| {
                n.quotations.iter().map(|q| {
                    let name = n.roster.get(&q.speaker_id).map_or("", |e| e.canonical_name.as_str());
                    (q.key(), format!("The speaker is {name}."))
                })
            })
            .collect();
        Self::new(responses)
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }
}

impl LlmClient for StubClient {
    fn name(&self) -> &str {
        "stub"
    }

    fn complete(&self, request: &LlmRequest) -> Result<String> {
        Ok(self.responses.get(&request.key).cloned().unwrap_or_else(|| self.fallback.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    #[serde(flatten)]
    pub key: QuoteKey,
    pub prompt_sha256: String,
    pub response: String,
}

/// One JSON file per `(quotation, prompt)` named by its SHA-256.
#[derive(Clone, Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache { dir })
    }

    fn path(&self, request: &LlmRequest) -> PathBuf {
        let id = sha256_hex(
            format!("{}\0{}\0{}", request.key.novel_id, request.key.quote_id, request.prompt).as_bytes(),
        );
        self.dir.join(format!("{id}.json"))
    }

    pub fn get(&self, request: &LlmRequest) -> Result<Option<String>> {
        let path = self.path(request);
        if !path.exists() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entry: CacheEntry = serde_json::from_str(&raw)?;
        Ok(Some(entry.response))
    }

    pub fn put(&self, request: &LlmRequest, response: &str) -> Result<()> {
        let entry = CacheEntry {
            key: request.key.clone(),
            prompt_sha256: sha256_hex(request.prompt.as_bytes()),
            response: response.to_string(),
        };
        let path = self.path(request);
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&entry)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: usize,
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

impl RetryPolicy {
    fn backoff(&self, attempt: usize) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

/// Enforces a minimum interval between request starts.
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let interval = if requests == 0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(60.0 / requests as f64)
        };
        RateLimiter {
            interval,
            next: Mutex::new(Instant::now()),
        }
    }

    pub fn acquire(&self) {
        let wait = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub style: PromptStyle,
    /// Maximum concurrent requests.
    pub parallelism: usize,
    /// Zero disables rate limiting.
    pub requests_per_minute: u32,
    pub retry: RetryPolicy,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            style: PromptStyle::Plain,
            parallelism: 4,
            requests_per_minute: 0,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmAnswer {
    #[serde(flatten)]
    pub key: QuoteKey,
    pub response: String,
    pub cached: bool,
}

struct Runner<'a> {
    client: &'a dyn LlmClient,
    cache: Option<&'a ResponseCache>,
    retry: &'a RetryPolicy,
    limiter: Option<&'a RateLimiter>,
}

impl Runner<'_> {
    fn run(&self, request: &LlmRequest) -> Result<LlmAnswer> {
        if let Some(response) = self.cache.map(|c| c.get(request)).transpose()?.flatten() {
            return Ok(LlmAnswer {
                key: request.key.clone(),
                response,
                cached: true,
            });
        }
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        let response = loop {
            if let Some(l) = self.limiter {
                l.acquire();
            }
            match self.client.complete(request) {
                Ok(r) => break r,
                Err(Error::Client { message, retriable: true }) if attempt + 1 < attempts => {
                    let wait = self.retry.backoff(attempt);
                    log::warn!("request for {} failed ({message}), retrying in {wait:?}", request.key);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(c) = self.cache {
            c.put(request, &response)?;
        }
        Ok(LlmAnswer {
            key: request.key.clone(),
            response,
            cached: false,
        })
    }
}

/// One zero-shot answer for a quotation, read from or written to `cache`.
pub fn llm_zero_shot(
    instance: &QuotationInstance,
    roster: &CharacterRoster,
    client: &dyn LlmClient,
    style: PromptStyle,
    cache: Option<&ResponseCache>,
    retry: &RetryPolicy,
) -> Result<LlmAnswer> {
    let request = LlmRequest {
        key: instance.key(),
        prompt: build_prompt(instance, roster, style),
    };
    Runner {
        client,
        cache,
        retry,
        limiter: None,
    }
    .run(&request)
}

/// Answers for every selected quotation in corpus order, with at most
/// `config.parallelism` requests in flight.
pub fn run_zero_shot(
    corpus: &NovelCorpus,
    keys: &std::collections::BTreeSet<QuoteKey>,
    client: &dyn LlmClient,
    config: &ZeroShotConfig,
    cache: Option<&ResponseCache>,
) -> Result<Vec<LlmAnswer>> {
    let requests: Vec<LlmRequest> = corpus
        .select(keys)
        .map(|q| {
            let roster = corpus
                .roster(&q.novel_id)
                .ok_or_else(|| Error::InvalidCorpus(format!("no roster for `{}`", q.novel_id)))?;
            Ok(LlmRequest {
                key: q.key(),
                prompt: build_prompt(q, roster, config.style),
            })
        })
        .collect::<Result<_>>()?;
    let limiter = (config.requests_per_minute > 0).then(|| RateLimiter::per_minute(config.requests_per_minute));
    let runner = Runner {
        client,
        cache,
        retry: &config.retry,
        limiter: limiter.as_ref(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    pool.install(|| requests.par_iter().map(|r| runner.run(r)).collect())
}

/// Accuracy under lenient matching: a response is correct when it contains
/// any name of the gold speaker.
pub fn evaluate_lenient(answers: &[LlmAnswer], corpus: &NovelCorpus, split: &SplitSpec) -> Result<FoldReport> {
    check_coverage(answers.iter().map(|a| &a.key), split)?;
    let outcomes = answers
        .iter()
        .map(|a| {
            let q = corpus
                .quotation(&a.key)
                .ok_or_else(|| Error::InvalidCorpus(format!("unknown quotation {}", a.key)))?;
            let gold = corpus
                .roster(&q.novel_id)
                .and_then(|r| r.get(&q.speaker_id))
                .ok_or_else(|| Error::InvalidCorpus(format!("no gold speaker entry for {}", a.key)))?;
            Ok(Outcome {
                key: a.key.clone(),
                quote_type: q.quote_type,
                correct: lenient_match(&a.response, gold),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldReport::from_outcomes(split, &outcomes, None))
}
