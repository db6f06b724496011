//! Sequence-to-sequence backends.
//!
//! A backend owns tokenization and exposes the three model operations the
//! rest of the crate needs: teacher-forced per-step probabilities of a target
//! given a source, free generation, and (for trainable backends) one
//! optimizer step on a batch. Everything outside this module works with text
//! and backend-reported token counts.
//!
//! Two implementations live here:
//!
//! * [`oracle::OracleBackend`]: a lookup table from (source, target prefix)
//!   to next-token distribution, for exact hand-computed tests.
//! * [`tiny::TinyBackend`]: a small attention encoder-decoder trained from
//!   scratch on CPU.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::templates::SourceTokenizer;

pub(crate) mod encoder;
pub mod oracle;
pub mod tiny;
pub mod vocab;

pub type TokenId = u32;

/// Source and target token ids of one example.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequencePair {
    pub source_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
}

impl SequencePair {
    pub fn new(source_tokens: Vec<TokenId>, target_tokens: Vec<TokenId>) -> Self {
        SequencePair {
            source_tokens,
            target_tokens,
        }
    }
}

/// `p(t_c | t_<c, X)` for every target position `c`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepProbabilities(Vec<f64>);

impl StepProbabilities {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Backend(format!("step probability {p} outside (0, 1]")));
        }
        Ok(StepProbabilities(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of `-log p` over steps: the sequence negative log-likelihood.
    pub fn nll(&self) -> f64 {
        self.0.iter().map(|p| -p.ln()).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    #[default]
    Greedy,
    Beam(usize),
}

/// Contract shared by every sequence-to-sequence model.
///
/// Scoring and generation take `&self` and must not depend on any state
/// shared across calls; `fit_step` takes `&mut self`.
pub trait Seq2SeqBackend: SourceTokenizer + Send + Sync {
    /// Stable identifier recorded in manifests.
    fn kind(&self) -> &str;

    /// Source token ids including the backend's sequence markers.
    fn encode_source(&self, text: &str) -> Result<Vec<TokenId>>;

    /// Target token ids, including an end-of-sequence token if the backend
    /// uses one.
    fn encode_target(&self, text: &str) -> Result<Vec<TokenId>>;

    /// Text of target tokens, special tokens removed.
    fn decode(&self, tokens: &[TokenId]) -> String;

    fn eos(&self) -> Option<TokenId>;

    fn vocab_size(&self) -> usize;

    fn max_source_len(&self) -> usize;

    /// Full next-token distribution after `prefix`, indexed by token id.
    fn next_token_distribution(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>>;

    fn teacher_forced_probs(&self, pair: &SequencePair) -> Result<StepProbabilities> {
        self.check_source(&pair.source_tokens)?;
        let mut probs = Vec::with_capacity(pair.target_tokens.len());
        for c in 0..pair.target_tokens.len() {
            let dist = self.next_token_distribution(&pair.source_tokens, &pair.target_tokens[..c])?;
            let t = pair.target_tokens[c] as usize;
            probs.push(*dist.get(t).ok_or_else(|| Error::Backend(format!("token id {t} out of range")))?);
        }
        StepProbabilities::new(probs)
    }

    fn teacher_forced_probs_batch(&self, pairs: &[SequencePair]) -> Result<Vec<StepProbabilities>> {
        pairs.iter().map(|p| self.teacher_forced_probs(p)).collect()
    }

    /// Decodes without constraints until end-of-sequence or `max_length`
    /// tokens. The end-of-sequence token, when produced, is included.
    fn free_generate(
        &self,
        source: &[TokenId],
        max_length: usize,
        strategy: DecodeStrategy,
    ) -> Result<Vec<TokenId>> {
        self.check_source(source)?;
        match strategy {
            DecodeStrategy::Greedy => greedy_decode(self, source, max_length),
            DecodeStrategy::Beam(width) => beam_decode(self, source, max_length, width),
        }
    }

    fn supports_embeddings(&self) -> bool {
        false
    }

    /// Final decoder hidden state for every target token.
    fn target_token_embeddings(&self, _pair: &SequencePair) -> Result<Vec<Vec<f32>>> {
        Err(Error::EmbeddingsUnsupported)
    }

    /// One optimizer update; returns the batch mean of the summed target
    /// negative log-likelihood computed before the update.
    fn fit_step(&mut self, _batch: &[SequencePair]) -> Result<f64> {
        Err(Error::NotTrainable)
    }

    fn trainable(&self) -> bool {
        false
    }

    fn set_learning_rate(&mut self, _lr: f64) -> Result<()> {
        Err(Error::NotTrainable)
    }

    /// Writes weights, tokenizer assets and a model description to `dir`.
    fn save(&self, _dir: &Path) -> Result<()> {
        Err(Error::NotTrainable)
    }

    /// Optimizer and architecture settings, recorded in training manifests.
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": self.kind() })
    }

    fn check_source(&self, source: &[TokenId]) -> Result<()> {
        if source.len() > self.max_source_len() {
            return Err(Error::SourceTooLong {
                len: source.len(),
                max: self.max_source_len(),
            });
        }
        Ok(())
    }
}

/// Index of the largest value; the lowest index wins ties.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn greedy_decode<B: Seq2SeqBackend + ?Sized>(
    backend: &B,
    source: &[TokenId],
    max_length: usize,
) -> Result<Vec<TokenId>> {
    let mut out = Vec::new();
    while out.len() < max_length {
        let dist = backend.next_token_distribution(source, &out)?;
        let next = argmax(&dist) as TokenId;
        out.push(next);
        if Some(next) == backend.eos() {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    log_prob: f64,
    finished: bool,
}

/// Beam search ranked by summed log-probability. Candidates with equal
/// score are ordered by their token sequence, so width 1 matches greedy.
fn beam_decode<B: Seq2SeqBackend + ?Sized>(
    backend: &B,
    source: &[TokenId],
    max_length: usize,
    width: usize,
) -> Result<Vec<TokenId>> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_length {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let dist = backend.next_token_distribution(source, &hyp.tokens)?;
            for (t, p) in dist.iter().enumerate() {
                if *p <= 0.0 {
                    continue;
                }
                let mut tokens = hyp.tokens.clone();
                tokens.push(t as TokenId);
                candidates.push(Hypothesis {
                    finished: Some(t as TokenId) == backend.eos(),
                    tokens,
                    log_prob: hyp.log_prob + p.ln(),
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .total_cmp(&a.log_prob)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        beam = candidates;
    }
    Ok(beam.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

/// Model description stored as `model.json` in a checkpoint directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCard {
    pub kind: String,
    #[serde(flatten)]
    pub settings: serde_json::Value,
}

pub const MODEL_CARD_FILE: &str = "model.json";

/// Loads any backend this crate can restore from a checkpoint directory.
pub fn load_backend(dir: &Path) -> Result<Box<dyn Seq2SeqBackend>> {
    let path = dir.join(MODEL_CARD_FILE);
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let card: ModelCard = serde_json::from_str(&raw)?;
    match card.kind.as_str() {
        tiny::KIND => Ok(Box::new(tiny::TinyBackend::load(dir)?)),
        other => Err(Error::InvalidConfig(format!("unknown backend kind `{other}` in {}", path.display()))),
    }
}
