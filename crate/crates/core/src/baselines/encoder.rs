//! Encoder-only speaker classifier over a fixed label space.
//!
//! The source is rendered with the same prompt template as generation, run
//! through the shared source encoder and classified from the state at the
//! mask position (the sequence start when the template has no mask).
//! Labels are `(novel, character)` pairs seen as gold speakers in training,
//! so the classifier only works when every test novel also appears in
//! training. Speakers absent from the label space are never predicted.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use candle_core::{Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::encoder::{load_vars, save_vars, Init, SourceEncoder};
use crate::backend::tiny::corpus_vocab;
use crate::backend::vocab::{self, WordVocab, BOS_ID, EOS_ID};
use crate::backend::{ModelCard, StepProbabilities, TokenId, MODEL_CARD_FILE};
use crate::corpus::{CharacterId, CharacterRoster, NovelCorpus, NovelId, QuotationInstance, QuoteKey, Side, SplitSpec};
use crate::error::{Error, Result};
use crate::inference::{CandidateScore, Prediction, RankedPrediction};
use crate::templates::{self, PromptTemplate, SourceTokenizer};
use crate::training::EpochLoss;

pub const KIND: &str = "encoder-classifier";
const WEIGHTS_FILE: &str = "weights.safetensors";
const VOCAB_FILE: &str = "vocab.json";
const LABELS_FILE: &str = "labels.json";

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label {
    pub novel_id: NovelId,
    pub character_id: CharacterId,
}

/// Ordered, duplicate-free list of labels with an index map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    labels: Vec<Label>,
    index: HashMap<Label, usize>,
}

impl LabelSpace {
    pub fn new(labels: Vec<Label>) -> Result<Self> {
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate label {}/{}",
                    l.novel_id, l.character_id
                )));
            }
        }
        Ok(LabelSpace { labels, index })
    }

    /// Gold speakers of `keys`, novels in corpus order and characters in
    /// roster order.
    pub fn observed(corpus: &NovelCorpus, keys: &BTreeSet<QuoteKey>) -> Result<Self> {
        let seen: BTreeSet<Label> = corpus
            .select(keys)
            .map(|q| Label {
                novel_id: q.novel_id.clone(),
                character_id: q.speaker_id.clone(),
            })
            .collect();
        let mut labels = Vec::with_capacity(seen.len());
        for (novel_id, novel) in &corpus.novels {
            for e in &novel.roster.entries {
                let l = Label {
                    novel_id: novel_id.clone(),
                    character_id: e.character_id.clone(),
                };
                if seen.contains(&l) {
                    labels.push(l);
                }
            }
        }
        Self::new(labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn index(&self, label: &Label) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.labels)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(serde_json::from_str(&raw)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub template: String,
    pub budget: Option<usize>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub max_relative: usize,
    pub max_source_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            template: templates::DEFAULT_TEMPLATE.to_string(),
            budget: None,
            embed_dim: 32,
            hidden_dim: 64,
            max_relative: 24,
            max_source_len: 512,
            epochs: 10,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<PromptTemplate> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.max_source_len < 3 {
            return Err(Error::InvalidConfig("encoder dimensions must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        templates::find_template(&self.template)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown template `{}`", self.template)))
    }
}

pub struct EncoderClassifier {
    vocab: WordVocab,
    config: EncoderConfig,
    template: PromptTemplate,
    labels: LabelSpace,
    enc: SourceEncoder,
    w_head: Var,
    b_head: Var,
}

impl SourceTokenizer for EncoderClassifier {
    fn token_spans(&self, text: &str) -> Vec<std::ops::Range<usize>> {
        vocab::word_spans(text)
    }

    fn mask_token(&self) -> &str {
        vocab::MASK
    }

    fn marker_count(&self) -> usize {
        2
    }
}

impl EncoderClassifier {
    pub fn new(vocab: WordVocab, labels: LabelSpace, config: EncoderConfig) -> Result<Self> {
        let template = config.validate()?;
        if labels.is_empty() {
            return Err(Error::InvalidArgument("empty label space".into()));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let enc = SourceEncoder::new(&mut init, vocab.len(), config.embed_dim, config.hidden_dim, config.max_relative)?;
        let w_head = init.glorot(config.hidden_dim, labels.len())?;
        let b_head = init.zeros(labels.len())?;
        Ok(EncoderClassifier {
            vocab,
            config,
            template,
            labels,
            enc,
            w_head,
            b_head,
        })
    }

    pub fn labels(&self) -> &LabelSpace {
        &self.labels
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn named(&self) -> Vec<(&'static str, &Var)> {
        let mut v = self.enc.named();
        v.push(("w_head", &self.w_head));
        v.push(("b_head", &self.b_head));
        v
    }

    fn source_tokens(&self, instance: &QuotationInstance) -> Result<Vec<TokenId>> {
        let budget = self.config.budget.map_or(self.config.max_source_len, |b| b.min(self.config.max_source_len));
        let rendered = templates::render_source(instance, &self.template, self, budget)?;
        let mut ids = vec![BOS_ID];
        ids.extend(self.vocab.encode(&rendered.text));
        ids.push(EOS_ID);
        if ids.len() > self.config.max_source_len {
            return Err(Error::SourceTooLong {
                len: ids.len(),
                max: self.config.max_source_len,
            });
        }
        Ok(ids)
    }

    /// Log-probabilities over the whole label space, shape `[labels]`.
    fn log_probs(&self, source: &[TokenId]) -> Result<Tensor> {
        let (states, anchor) = self.enc.forward(source)?;
        let logits = states
            .narrow(0, anchor, 1)?
            .matmul(&self.w_head)?
            .broadcast_add(&self.b_head)?
            .squeeze(0)?;
        Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?)
    }

    /// Candidates of the quotation's novel ranked by class probability,
    /// renormalised within the novel. Ties keep label-space order.
    pub fn predict(&self, instance: &QuotationInstance, roster: &CharacterRoster) -> Result<RankedPrediction> {
        let members: Vec<(usize, &Label)> = self
            .labels
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| l.novel_id == instance.novel_id)
            .collect();
        if members.is_empty() {
            return Err(Error::UnseenSpeakers(format!("novel `{}` has no trained labels", instance.novel_id)));
        }
        let all: Vec<f64> = self.log_probs(&self.source_tokens(instance)?)?.exp()?.to_vec1()?;
        let mass: f64 = members.iter().map(|(i, _)| all[*i]).sum();
        let mut ranked: Vec<CandidateScore> = members
            .iter()
            .map(|(i, l)| CandidateScore {
                character_id: l.character_id.clone(),
                target_text: roster
                    .get(&l.character_id)
                    .map_or_else(|| l.character_id.to_string(), |e| e.canonical_name.clone()),
                score: all[*i] / mass,
                step_probs: StepProbabilities::default(),
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(RankedPrediction {
            key: instance.key(),
            chosen: ranked[0].character_id.clone(),
            ranked,
        })
    }

    pub fn predict_all(&self, corpus: &NovelCorpus, keys: &BTreeSet<QuoteKey>) -> Result<Vec<Prediction>> {
        let quotes: Vec<&QuotationInstance> = corpus.select(keys).collect();
        quotes
            .par_iter()
            .map(|q| {
                let roster = corpus
                    .roster(&q.novel_id)
                    .ok_or_else(|| Error::InvalidCorpus(format!("no roster for `{}`", q.novel_id)))?;
                self.predict(q, roster).map(Prediction::Sig)
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_vars(&dir.join(WEIGHTS_FILE), &self.named())?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        self.labels.save(&dir.join(LABELS_FILE))?;
        let card = ModelCard {
            kind: KIND.to_string(),
            settings: serde_json::to_value(&self.config)?,
        };
        let path = dir.join(MODEL_CARD_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&card)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let card_path = dir.join(MODEL_CARD_FILE);
        let raw = std::fs::read_to_string(&card_path).map_err(|e| Error::io(&card_path, e))?;
        let card: ModelCard = serde_json::from_str(&raw)?;
        if card.kind != KIND {
            return Err(Error::InvalidConfig(format!("checkpoint kind `{}` is not `{KIND}`", card.kind)));
        }
        let config: EncoderConfig = serde_json::from_value(card.settings)?;
        let vocab = WordVocab::load(&dir.join(VOCAB_FILE))?;
        let labels = LabelSpace::load(&dir.join(LABELS_FILE))?;
        let model = Self::new(vocab, labels, config)?;
        load_vars(&dir.join(WEIGHTS_FILE), &model.named())?;
        Ok(model)
    }
}

/// Trains a classifier on the training side of an in-domain split.
pub fn train_encoder(
    corpus: &NovelCorpus,
    split: &SplitSpec,
    config: &EncoderConfig,
) -> Result<(EncoderClassifier, Vec<EpochLoss>)> {
    let train_novels = split.novels(Side::Train);
    let unseen: Vec<String> = split
        .novels(Side::Test)
        .into_iter()
        .filter(|n| !train_novels.contains(n))
        .map(|n| n.to_string())
        .collect();
    if !unseen.is_empty() {
        return Err(Error::UnseenSpeakers(format!("test novels without training data: {}", unseen.join(", "))));
    }
    let labels = LabelSpace::observed(corpus, split.ids(Side::Train))?;
    let model = EncoderClassifier::new(corpus_vocab(corpus), labels, config.clone())?;

    let examples: Vec<(Vec<TokenId>, u32)> = corpus
        .select(split.ids(Side::Train))
        .map(|q| {
            let label = Label {
                novel_id: q.novel_id.clone(),
                character_id: q.speaker_id.clone(),
            };
            let idx = model.labels.index(&label).expect("label space built from training speakers");
            Ok((model.source_tokens(q)?, idx as u32))
        })
        .collect::<Result<_>>()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }

    let vars: Vec<Var> = model.named().into_iter().map(|(_, v)| v.clone()).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut sum: Option<Tensor> = None;
            for i in chunk {
                let (tokens, label) = &examples[*i];
                let nll = model.log_probs(tokens)?.get(*label as usize)?.neg()?;
                sum = Some(match sum {
                    Some(s) => (s + nll)?,
                    None => nll,
                });
            }
            let loss = (sum.expect("non-empty chunk") / chunk.len() as f64)?;
            total += loss.to_scalar::<f64>()? * chunk.len() as f64;
            opt.backward_step(&loss)?;
        }
        let mean_loss = total / examples.len() as f64;
        log::info!("encoder epoch {epoch}: mean loss {mean_loss:.4}");
        losses.push(EpochLoss { epoch, mean_loss });
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_cross_domain_splits, make_holdout_split};
    use crate::evaluation::evaluate_predictions;
    use crate::synthetic::{generate_synthetic, SyntheticConfig};

    fn small() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            hidden_dim: 24,
            epochs: 3,
            learning_rate: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn label_space_is_unique_and_ordered() {
        let l = |n: &str, c: &str| Label {
            novel_id: n.into(),
            character_id: c.into(),
        };
        assert!(LabelSpace::new(vec![l("a", "x"), l("a", "x")]).is_err());
        let space = LabelSpace::new(vec![l("a", "y"), l("a", "x")]).unwrap();
        assert_eq!(space.index(&l("a", "x")), Some(1));
        let dir = tempfile::tempdir().unwrap();
        space.save(&dir.path().join("l.json")).unwrap();
        assert_eq!(LabelSpace::load(&dir.path().join("l.json")).unwrap(), space);
    }

    #[test]
    fn cross_domain_split_is_rejected() {
        let corpus = generate_synthetic(&SyntheticConfig { novels: 2, quotes_per_novel: 10, ..Default::default() }).unwrap();
        let split = &make_cross_domain_splits(&corpus, 1, 1, 0).unwrap()[0];
        let err = train_encoder(&corpus, split, &small()).err().unwrap();
        assert!(err.to_string().contains("cannot handle unseen speakers"), "{err}");
    }

    #[test]
    fn single_label_is_always_right() {
        let mut corpus = generate_synthetic(&SyntheticConfig { novels: 1, quotes_per_novel: 12, ..Default::default() }).unwrap();
        let novel = corpus.novels.values_mut().next().unwrap();
        let first = novel.roster.entries[0].character_id.clone();
        for q in &mut novel.quotations {
            q.speaker_id = first.clone();
        }
        let split = make_holdout_split(&corpus, 0.25, 0).unwrap();
        let (model, _) = train_encoder(&corpus, &split, &EncoderConfig { epochs: 1, ..small() }).unwrap();
        assert_eq!(model.labels().len(), 1);
        let preds = model.predict_all(&corpus, &split.test_ids).unwrap();
        let report = evaluate_predictions(&preds, &corpus, &split).unwrap();
        assert_eq!(report.overall.accuracy(), 1.0);
    }

    #[test]
    fn learns_and_round_trips() {
        let corpus = generate_synthetic(&SyntheticConfig { novels: 1, quotes_per_novel: 80, ..Default::default() }).unwrap();
        let split = make_holdout_split(&corpus, 0.25, 0).unwrap();
        let (model, losses) = train_encoder(&corpus, &split, &EncoderConfig { epochs: 6, ..small() }).unwrap();
        assert!(losses.last().unwrap().mean_loss < losses[0].mean_loss);

        let q = corpus.select(&split.test_ids).next().unwrap();
        let roster = corpus.roster(&q.novel_id).unwrap();
        let pred = model.predict(q, roster).unwrap();
        assert_eq!(pred.ranked.len(), model.labels().len());
        let total: f64 = pred.ranked.iter().map(|c| c.score).sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(pred.ranked.windows(2).all(|w| w[0].score >= w[1].score));

        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = EncoderClassifier::load(dir.path()).unwrap();
        assert_eq!(back.predict(q, roster).unwrap(), pred);
        assert!(EncoderClassifier::load(&dir.path().join("missing")).is_err());
    }
}
