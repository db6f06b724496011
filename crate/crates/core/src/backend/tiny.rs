//! A small attention encoder-decoder trained from scratch on CPU.
//!
//! Encoder: tied word embeddings plus a relative-position embedding anchored
//! at the first `<mask>`, a three-token local window, and one residual
//! self-attention layer. Decoder: GRU over the previous token and previous
//! attention context, dot-product attention over encoder states, and an
//! output layer over the state, the context and the previous token, tied to
//! the input embeddings.
//!
//! All arithmetic is `f64`, so scores and training losses agree to rounding.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{load_vars, save_vars, Init, SourceEncoder};
use super::vocab::{self, WordVocab, BOS_ID, EOS_ID};
use super::{DecodeStrategy, ModelCard, Seq2SeqBackend, SequencePair, TokenId, MODEL_CARD_FILE};
use crate::corpus::NovelCorpus;
use crate::error::{Error, Result};
use crate::templates::{self, SourceTokenizer};

pub const KIND: &str = "tiny";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TinyConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Relative positions are clipped to `[-max_relative, max_relative]`.
    pub max_relative: usize,
    pub max_source_len: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TinyConfig {
    fn default() -> Self {
        TinyConfig {
            embed_dim: 32,
            hidden_dim: 64,
            max_relative: 24,
            max_source_len: 512,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TinyConfig {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_source_len < 2 {
            return Err(Error::InvalidConfig("tiny model dimensions must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Vocabulary covering the corpus text, every roster name and the words of
/// every catalog template.
pub fn corpus_vocab(corpus: &NovelCorpus) -> WordVocab {
    let mut texts: Vec<String> = Vec::new();
    for (id, novel) in &corpus.novels {
        texts.push(id.as_str().to_string());
        for entry in &novel.roster.entries {
            texts.extend(entry.names().map(str::to_string));
        }
        for q in &novel.quotations {
            texts.push(q.left_context.clone());
            texts.push(q.text.clone());
            texts.push(q.right_context.clone());
        }
    }
    for t in templates::template_catalog() {
        texts.extend([t.source_infix, t.target_prefix, t.aux_source_infix, t.aux_target_prefix]);
    }
    texts.extend(
        [templates::EMPTY_ADDRESSEES, templates::GENDER_PREFIX, templates::FICTION_PREFIX, "female male"]
            .map(str::to_string),
    );
    WordVocab::build(texts.iter().map(String::as_str), 1)
}

struct Params {
    enc: SourceEncoder,
    w_init: Var,
    b_init: Var,
    w_x: Var,
    b_x: Var,
    w_h: Var,
    b_h: Var,
    w_att: Var,
    w_out: Var,
    b_out: Var,
    out_bias: Var,
}

impl Params {
    fn init(vocab: usize, cfg: &TinyConfig) -> Result<Self> {
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        Ok(Params {
            enc: SourceEncoder::new(&mut init, vocab, d, h, cfg.max_relative)?,
            w_init: init.glorot(h, h)?,
            b_init: init.zeros(h)?,
            w_x: init.uniform(d + h, 3 * h, (6.0 / (d + 2 * h) as f64).sqrt())?,
            b_x: init.zeros(3 * h)?,
            w_h: init.uniform(h, 3 * h, (3.0 / h as f64).sqrt())?,
            b_h: init.zeros(3 * h)?,
            w_att: init.glorot(h, h)?,
            w_out: init.glorot(2 * h + d, d)?,
            b_out: init.zeros(d)?,
            out_bias: init.zeros(vocab)?,
        })
    }

    fn named(&self) -> Vec<(&'static str, &Var)> {
        let mut all = self.enc.named();
        all.extend([
            ("w_init", &self.w_init),
            ("b_init", &self.b_init),
            ("w_x", &self.w_x),
            ("b_x", &self.b_x),
            ("w_h", &self.w_h),
            ("b_h", &self.b_h),
            ("w_att", &self.w_att),
            ("w_out", &self.w_out),
            ("b_out", &self.b_out),
            ("out_bias", &self.out_bias),
        ]);
        all
    }
}

struct Encoded {
    states: Tensor,
    keys: Tensor,
    init: Tensor,
}

struct DecoderState {
    hidden: Tensor,
    context: Tensor,
}

struct Step {
    state: DecoderState,
    output: Tensor,
    log_probs: Tensor,
}

pub struct TinyBackend {
    vocab: WordVocab,
    config: TinyConfig,
    params: Params,
    optimizer: Option<AdamW>,
}

fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

impl TinyBackend {
    pub fn new(vocab: WordVocab, config: TinyConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(vocab.len(), &config)?;
        Ok(TinyBackend {
            vocab,
            config,
            params,
            optimizer: None,
        })
    }

    pub fn for_corpus(corpus: &NovelCorpus, config: TinyConfig) -> Result<Self> {
        Self::new(corpus_vocab(corpus), config)
    }

    pub fn config(&self) -> &TinyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &WordVocab {
        &self.vocab
    }

    pub fn parameter_count(&self) -> usize {
        self.params.named().iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let card_path = dir.join(MODEL_CARD_FILE);
        let raw = std::fs::read_to_string(&card_path).map_err(|e| Error::io(&card_path, e))?;
        let card: ModelCard = serde_json::from_str(&raw)?;
        if card.kind != KIND {
            return Err(Error::InvalidConfig(format!("checkpoint kind `{}` is not `{KIND}`", card.kind)));
        }
        let config: TinyConfig = serde_json::from_value(card.settings)?;
        let vocab = WordVocab::load(&dir.join(VOCAB_FILE))?;
        let backend = Self::new(vocab, config)?;
        load_vars(&dir.join(WEIGHTS_FILE), &backend.params.named())?;
        Ok(backend)
    }

    fn encode(&self, source: &[TokenId]) -> Result<Encoded> {
        let p = &self.params;
        let (states, anchor) = p.enc.forward(source)?;
        let keys = states.matmul(&p.w_att)?;
        let init = states
            .narrow(0, anchor, 1)?
            .matmul(&p.w_init)?
            .broadcast_add(&p.b_init)?
            .tanh()?;
        Ok(Encoded { states, keys, init })
    }

    fn start(&self, enc: &Encoded) -> Result<DecoderState> {
        Ok(DecoderState {
            hidden: enc.init.clone(),
            context: Tensor::zeros((1, self.config.hidden_dim), DType::F64, &Device::Cpu)?,
        })
    }

    fn step(&self, enc: &Encoded, state: &DecoderState, prev: TokenId) -> Result<Step> {
        let p = &self.params;
        let h = self.config.hidden_dim;
        let e = p.enc.emb.index_select(&Tensor::new(&[prev], &Device::Cpu)?, 0)?;
        let input = Tensor::cat(&[&e, &state.context], 1)?;
        let gx = input.matmul(&p.w_x)?.broadcast_add(&p.b_x)?;
        let gh = state.hidden.matmul(&p.w_h)?.broadcast_add(&p.b_h)?;
        let z = sigmoid(&(gx.narrow(1, 0, h)? + gh.narrow(1, 0, h)?)?)?;
        let r = sigmoid(&(gx.narrow(1, h, h)? + gh.narrow(1, h, h)?)?)?;
        let cand = (gx.narrow(1, 2 * h, h)? + (r * gh.narrow(1, 2 * h, h)?)?)?.tanh()?;
        let hidden = (&cand + (z * (&state.hidden - &cand)?)?)?;
        let scores = hidden.matmul(&enc.keys.t()?)?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let context = attn.matmul(&enc.states)?;
        let output = Tensor::cat(&[&hidden, &context, &e], 1)?
            .matmul(&p.w_out)?
            .broadcast_add(&p.b_out)?
            .tanh()?;
        let logits = output.matmul(&p.enc.emb.t()?)?.broadcast_add(&p.out_bias)?;
        let log_probs = candle_nn::ops::log_softmax(&logits, D::Minus1)?;
        Ok(Step {
            state: DecoderState { hidden, context },
            output,
            log_probs,
        })
    }

    /// Log-probability rows `[m, V]` and decoder outputs `[m, d]` under
    /// teacher forcing.
    fn run_target(&self, enc: &Encoded, target: &[TokenId]) -> Result<(Tensor, Tensor)> {
        if target.is_empty() {
            return Err(Error::Backend("empty target sequence".into()));
        }
        let mut state = self.start(enc)?;
        let mut prev = BOS_ID;
        let mut rows = Vec::with_capacity(target.len());
        let mut outputs = Vec::with_capacity(target.len());
        for &t in target {
            let step = self.step(enc, &state, prev)?;
            rows.push(step.log_probs);
            outputs.push(step.output);
            state = step.state;
            prev = t;
        }
        Ok((Tensor::cat(&rows, 0)?, Tensor::cat(&outputs, 0)?))
    }

    fn check_target(&self, target: &[TokenId]) -> Result<()> {
        match target.iter().find(|t| **t as usize >= self.vocab.len()) {
            Some(t) => Err(Error::Backend(format!("token id {t} out of range"))),
            None => Ok(()),
        }
    }

    /// Summed target negative log-likelihood, differentiable.
    fn pair_nll(&self, pair: &SequencePair) -> Result<Tensor> {
        self.check_source(&pair.source_tokens)?;
        self.check_target(&pair.target_tokens)?;
        let enc = self.encode(&pair.source_tokens)?;
        let (log_probs, _) = self.run_target(&enc, &pair.target_tokens)?;
        let idx = Tensor::new(pair.target_tokens.as_slice(), &Device::Cpu)?.unsqueeze(1)?;
        Ok(log_probs.gather(&idx, 1)?.sum_all()?.neg()?)
    }

    fn probs_with(&self, enc: &Encoded, target: &[TokenId]) -> Result<super::StepProbabilities> {
        self.check_target(target)?;
        let (log_probs, _) = self.run_target(enc, target)?;
        let idx = Tensor::new(target, &Device::Cpu)?.unsqueeze(1)?;
        let picked: Vec<f64> = log_probs.gather(&idx, 1)?.flatten_all()?.to_vec1()?;
        super::StepProbabilities::new(picked.into_iter().map(f64::exp).collect())
    }

    fn optimizer(&mut self) -> Result<&mut AdamW> {
        if self.optimizer.is_none() {
            let vars = self.params.named().iter().map(|(_, v)| (*v).clone()).collect();
            let opt = AdamW::new(
                vars,
                ParamsAdamW {
                    lr: self.config.learning_rate,
                    weight_decay: self.config.weight_decay,
                    ..Default::default()
                },
            )?;
            self.optimizer = Some(opt);
        }
        Ok(self.optimizer.as_mut().expect("optimizer initialised"))
    }
}

impl SourceTokenizer for TinyBackend {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        vocab::word_spans(text)
    }

    fn mask_token(&self) -> &str {
        vocab::MASK
    }

    fn marker_count(&self) -> usize {
        2
    }
}

impl Seq2SeqBackend for TinyBackend {
    fn kind(&self) -> &str {
        KIND
    }

    fn encode_source(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.vocab.encode(text));
        ids.push(EOS_ID);
        Ok(ids)
    }

    fn encode_target(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.vocab.encode(text);
        ids.push(EOS_ID);
        Ok(ids)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        self.vocab.decode(tokens)
    }

    fn eos(&self) -> Option<TokenId> {
        Some(EOS_ID)
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn max_source_len(&self) -> usize {
        self.config.max_source_len
    }

    fn next_token_distribution(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_source(source)?;
        self.check_target(prefix)?;
        let enc = self.encode(source)?;
        let mut state = self.start(&enc)?;
        let mut prev = BOS_ID;
        for &t in prefix {
            state = self.step(&enc, &state, prev)?.state;
            prev = t;
        }
        let step = self.step(&enc, &state, prev)?;
        Ok(step.log_probs.exp()?.flatten_all()?.to_vec1()?)
    }

    fn teacher_forced_probs(&self, pair: &SequencePair) -> Result<super::StepProbabilities> {
        self.check_source(&pair.source_tokens)?;
        let enc = self.encode(&pair.source_tokens)?;
        self.probs_with(&enc, &pair.target_tokens)
    }

    /// Encodes each distinct source once.
    fn teacher_forced_probs_batch(&self, pairs: &[SequencePair]) -> Result<Vec<super::StepProbabilities>> {
        let mut cache: HashMap<&[TokenId], Encoded> = HashMap::new();
        let mut out = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let src = pair.source_tokens.as_slice();
            if !cache.contains_key(src) {
                self.check_source(src)?;
                cache.insert(src, self.encode(src)?);
            }
            out.push(self.probs_with(&cache[src], &pair.target_tokens)?);
        }
        Ok(out)
    }

    fn free_generate(&self, source: &[TokenId], max_length: usize, strategy: DecodeStrategy) -> Result<Vec<TokenId>> {
        self.check_source(source)?;
        if let DecodeStrategy::Beam(width) = strategy {
            return super::beam_decode(self, source, max_length, width);
        }
        let enc = self.encode(source)?;
        let mut state = self.start(&enc)?;
        let mut prev = BOS_ID;
        let mut out = Vec::new();
        while out.len() < max_length {
            let step = self.step(&enc, &state, prev)?;
            let dist: Vec<f64> = step.log_probs.flatten_all()?.to_vec1()?;
            let next = super::argmax(&dist) as TokenId;
            out.push(next);
            if next == EOS_ID {
                break;
            }
            state = step.state;
            prev = next;
        }
        Ok(out)
    }

    fn supports_embeddings(&self) -> bool {
        true
    }

    fn target_token_embeddings(&self, pair: &SequencePair) -> Result<Vec<Vec<f32>>> {
        self.check_source(&pair.source_tokens)?;
        self.check_target(&pair.target_tokens)?;
        let enc = self.encode(&pair.source_tokens)?;
        let (_, outputs) = self.run_target(&enc, &pair.target_tokens)?;
        Ok(outputs.to_dtype(DType::F32)?.to_vec2()?)
    }

    fn fit_step(&mut self, batch: &[SequencePair]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total: Option<Tensor> = None;
        for pair in batch {
            let nll = self.pair_nll(pair)?;
            total = Some(match total {
                Some(t) => (t + nll)?,
                None => nll,
            });
        }
        let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
        let value = loss.to_scalar::<f64>()?;
        self.optimizer()?.backward_step(&loss)?;
        Ok(value)
    }

    fn trainable(&self) -> bool {
        true
    }

    fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {lr}")));
        }
        self.config.learning_rate = lr;
        if let Some(opt) = self.optimizer.as_mut() {
            opt.set_learning_rate(lr);
        }
        Ok(())
    }

    fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_vars(&dir.join(WEIGHTS_FILE), &self.params.named())?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let card = ModelCard {
            kind: KIND.to_string(),
            settings: serde_json::to_value(&self.config)?,
        };
        let path = dir.join(MODEL_CARD_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&card)?).map_err(|e| Error::io(&path, e))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": KIND,
            "config": self.config,
            "vocab_size": self.vocab.len(),
            "parameters": self.parameter_count(),
            "optimizer": "adamw",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend(seed: u64) -> TinyBackend {
        let vocab = WordVocab::build(["\"Hello.\" replied by: <mask> Speaker: Anna Ben"], 1);
        let config = TinyConfig {
            embed_dim: 8,
            hidden_dim: 12,
            seed,
            learning_rate: 0.05,
            ..Default::default()
        };
        TinyBackend::new(vocab, config).unwrap()
    }

    fn pair(b: &TinyBackend, target: &str) -> SequencePair {
        SequencePair::new(
            b.encode_source("\"Hello.\" replied by: <mask>").unwrap(),
            b.encode_target(target).unwrap(),
        )
    }

    #[test]
    fn distributions_are_normalised() {
        let b = backend(1);
        let p = pair(&b, "Speaker: Anna");
        let dist = b.next_token_distribution(&p.source_tokens, &p.target_tokens[..1]).unwrap();
        assert_eq!(dist.len(), b.vocab_size());
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn teacher_forcing_matches_stepwise_distributions() {
        let b = backend(2);
        let p = pair(&b, "Speaker: Ben");
        let probs = b.teacher_forced_probs(&p).unwrap();
        assert_eq!(probs.len(), 4);
        for c in 0..p.target_tokens.len() {
            let dist = b.next_token_distribution(&p.source_tokens, &p.target_tokens[..c]).unwrap();
            assert!((dist[p.target_tokens[c] as usize] - probs.as_slice()[c]).abs() < 1e-12);
        }
        let batch = b.teacher_forced_probs_batch(&[p.clone(), pair(&b, "Speaker: Anna"), p.clone()]).unwrap();
        assert_eq!(batch[0], probs);
        assert_eq!(batch[2], probs);
    }

    #[test]
    fn same_seed_same_weights() {
        let (a, b) = (backend(7), backend(7));
        let p = pair(&a, "Speaker: Anna");
        assert_eq!(a.teacher_forced_probs(&p).unwrap(), b.teacher_forced_probs(&p).unwrap());
        assert_ne!(a.teacher_forced_probs(&p).unwrap(), backend(8).teacher_forced_probs(&p).unwrap());
    }

    #[test]
    fn fit_step_reports_pre_update_loss_and_learns() {
        let mut b = backend(3);
        let batch = vec![pair(&b, "Speaker: Ben")];
        let before = b.teacher_forced_probs(&batch[0]).unwrap().nll();
        let loss = b.fit_step(&batch).unwrap();
        assert!((loss - before).abs() < 1e-9);
        for _ in 0..100 {
            b.fit_step(&batch).unwrap();
        }
        assert!(b.teacher_forced_probs(&batch[0]).unwrap().nll() < before);
        let src = batch[0].source_tokens.clone();
        let out = b.free_generate(&src, 8, DecodeStrategy::Greedy).unwrap();
        assert_eq!(b.decode(&out), "Speaker: Ben");
        assert_eq!(b.free_generate(&src, 8, DecodeStrategy::Beam(2)).unwrap(), out);
        assert!(matches!(b.fit_step(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn save_and_load_round_trip() {
        let mut b = backend(4);
        let p = pair(&b, "Speaker: Anna");
        b.fit_step(&[p.clone()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.save(dir.path()).unwrap();
        let loaded = super::super::load_backend(dir.path()).unwrap();
        assert_eq!(loaded.kind(), KIND);
        assert_eq!(loaded.teacher_forced_probs(&p).unwrap(), b.teacher_forced_probs(&p).unwrap());
    }

    #[test]
    fn embeddings_have_one_row_per_target_token() {
        let b = backend(5);
        let p = pair(&b, "Speaker: Anna");
        let rows = b.target_token_embeddings(&p).unwrap();
        assert_eq!(rows.len(), p.target_tokens.len());
        assert!(rows.iter().all(|r| r.len() == 8));
    }

    #[test]
    fn rejects_long_sources() {
        let vocab = WordVocab::build(["a b"], 1);
        let b = TinyBackend::new(vocab, TinyConfig { max_source_len: 3, ..Default::default() }).unwrap();
        let src = b.encode_source("a b").unwrap();
        let p = SequencePair::new(src, b.encode_target("a").unwrap());
        assert!(matches!(b.teacher_forced_probs(&p), Err(Error::SourceTooLong { len: 4, max: 3 })));
    }
}
