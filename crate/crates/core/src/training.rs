//! Training pairs and the teacher-forced fine-tuning loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Seq2SeqBackend, SequencePair};
use crate::corpus::{CharacterEntry, NovelCorpus, QuoteKey, Side, SplitSpec};
use crate::error::{Error, Result};
use crate::hash::sha256_hex;
use crate::templates::{find_template, render_source, render_target, AuxInput, AuxTask, PromptTemplate, RenderedPair};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAIRS_FILE: &str = "training_pairs.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub template: String,
    /// Must agree with the template's auxiliary task when set.
    pub aux_task: Option<AuxTask>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides the backend's learning rate when set.
    pub learning_rate: Option<f64>,
    /// Source token budget; the backend maximum when unset.
    pub budget: Option<usize>,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
    /// Continue from the manifest already in `checkpoint_dir`.
    pub resume: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            template: crate::templates::DEFAULT_TEMPLATE.into(),
            aux_task: None,
            epochs: 10,
            batch_size: 16,
            learning_rate: None,
            budget: None,
            seed: 0,
            checkpoint_dir: PathBuf::from("checkpoint"),
            resume: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<PromptTemplate> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        let template = find_template(&self.template)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown template `{}`", self.template)))?;
        if let Some(task) = self.aux_task {
            if task != template.aux_task {
                return Err(Error::InvalidConfig(format!(
                    "template `{}` trains auxiliary task {:?}, not {task:?}",
                    template.name, template.aux_task
                )));
            }
        }
        Ok(template)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub template: String,
    pub aux_task: AuxTask,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub budget: usize,
    pub split: String,
    pub fold: usize,
    pub pair_count: usize,
    pub dataset_fingerprint: String,
    pub epoch_losses: Vec<EpochLoss>,
    pub backend: serde_json::Value,
}

impl TrainingManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// One pair per quotation on `side`, ordered by (novel id, quote id). The
/// target names the gold speaker by canonical name; addressees are listed
/// in roster order.
pub fn build_training_pairs(
    corpus: &NovelCorpus,
    split: &SplitSpec,
    side: Side,
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    budget: usize,
) -> Result<Vec<RenderedPair>> {
    split.ids(side).iter().map(|key| training_pair(corpus, key, template, backend, budget)).collect()
}

fn training_pair(
    corpus: &NovelCorpus,
    key: &QuoteKey,
    template: &PromptTemplate,
    backend: &dyn Seq2SeqBackend,
    budget: usize,
) -> Result<RenderedPair> {
    let q = corpus
        .quotation(key)
        .ok_or_else(|| Error::InvalidCorpus(format!("split names {key}, which is not in the corpus")))?;
    let roster = corpus
        .roster(&key.novel_id)
        .ok_or_else(|| Error::InvalidCorpus(format!("{key}: novel has no roster")))?;
    let speaker = roster
        .get(&q.speaker_id)
        .ok_or_else(|| Error::InvalidCorpus(format!("{key}: speaker `{}` not in roster", q.speaker_id)))?;
    let mut addressees: Vec<(usize, &CharacterEntry)> = q
        .addressee_ids
        .iter()
        .map(|id| {
            let pos = roster
                .position(id)
                .ok_or_else(|| Error::InvalidCorpus(format!("{key}: addressee `{id}` not in roster")))?;
            Ok((pos, &roster.entries[pos]))
        })
        .collect::<Result<_>>()?;
    addressees.sort_by_key(|(pos, _)| *pos);
    addressees.dedup_by_key(|(pos, _)| *pos);
    let addressees: Vec<&CharacterEntry> = addressees.into_iter().map(|(_, e)| e).collect();
    let aux = match template.aux_task {
        AuxTask::Addressee => Some(AuxInput::Addressees(&addressees)),
        AuxTask::Fiction => Some(AuxInput::Fiction(key.novel_id.as_str())),
        _ => None,
    };
    Ok(RenderedPair {
        source: render_source(q, template, backend, budget)?,
        target_text: render_target(speaker, template, aux)?,
    })
}

/// Content hash of the pair dump: one JSON line per pair.
pub fn pairs_dump(pairs: &[RenderedPair]) -> Result<String> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&serde_json::json!({
            "source": p.source.text,
            "target": p.target_text,
        }))?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs `config.epochs` epochs of seeded mini-batch updates on the train
/// side of `split`, then saves the backend and a manifest to the
/// checkpoint directory.
pub fn train(
    corpus: &NovelCorpus,
    split: &SplitSpec,
    config: &TrainingConfig,
    backend: &mut dyn Seq2SeqBackend,
) -> Result<TrainingManifest> {
    let template = config.validate()?;
    if !backend.trainable() {
        return Err(Error::NotTrainable);
    }
    if let Some(lr) = config.learning_rate {
        backend.set_learning_rate(lr)?;
    }
    let budget = config.budget.map_or(backend.max_source_len(), |b| b.min(backend.max_source_len()));
    let pairs = build_training_pairs(corpus, split, Side::Train, &template, &*backend, budget)?;
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let dump = pairs_dump(&pairs)?;
    let fingerprint = sha256_hex(dump.as_bytes());

    let mut losses = Vec::new();
    if config.resume {
        let previous = TrainingManifest::read(&config.checkpoint_dir)?;
        if previous.dataset_fingerprint != fingerprint {
            return Err(Error::InvalidConfig(format!(
                "checkpoint in {} was trained on different data",
                config.checkpoint_dir.display()
            )));
        }
        losses = previous.epoch_losses;
    }

    let encoded: Vec<SequencePair> = pairs
        .iter()
        .map(|p| {
            Ok(SequencePair::new(
                backend.encode_source(&p.source.text)?,
                backend.encode_target(&p.target_text)?,
            ))
        })
        .collect::<Result<_>>()?;

    let first = losses.len() + 1;
    for epoch in first..first + config.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<SequencePair> = chunk.iter().map(|i| encoded[*i].clone()).collect();
            total += backend.fit_step(&batch)? * batch.len() as f64;
        }
        let mean_loss = total / encoded.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.4}");
        losses.push(EpochLoss { epoch, mean_loss });
    }

    let dir = &config.checkpoint_dir;
    backend.save(dir)?;
    let path = dir.join(PAIRS_FILE);
    std::fs::write(&path, &dump).map_err(|e| Error::io(&path, e))?;
    let manifest = TrainingManifest {
        template: template.name.clone(),
        aux_task: template.aux_task,
        seed: config.seed,
        epochs: losses.len(),
        batch_size: config.batch_size,
        budget,
        split: split.name.clone(),
        fold: split.fold_index,
        pair_count: pairs.len(),
        dataset_fingerprint: fingerprint,
        epoch_losses: losses,
        backend: backend.describe(),
    };
    manifest.write(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::OracleBackend;
    use crate::backend::tiny::{TinyBackend, TinyConfig};
    use crate::corpus::fixtures::{corpus, entry, quote};
    use crate::corpus::{make_holdout_split, CharacterRoster, QuoteType};
    use crate::templates::default_template;

    fn figure_corpus() -> NovelCorpus {
        let roster = CharacterRoster::new(
            "emma",
            vec![entry("E", "Emma"), entry("M", "Mrs Elton"), entry("H", "Harriet")],
        )
        .unwrap();
        let mut qs = Vec::new();
        for (id, speaker, addressees) in [("q3", "M", vec!["H", "E"]), ("q1", "M", vec!["E"]), ("q2", "E", vec![])] {
            let mut q = quote("emma", id, speaker, QuoteType::Explicit);
            q.addressee_ids = addressees.into_iter().map(Into::into).collect();
            qs.push(q);
        }
        let mut c = NovelCorpus::new();
        c.insert(roster, qs).unwrap();
        c
    }

    fn all_train(c: &NovelCorpus) -> SplitSpec {
        SplitSpec {
            name: "all".into(),
            fold_index: 0,
            train_ids: c.quotations().map(|q| q.key()).collect(),
            test_ids: Default::default(),
        }
    }

    #[test]
    fn targets_and_order() {
        let c = figure_corpus();
        let b = OracleBackend::new(["x"]);
        let pairs = build_training_pairs(&c, &all_train(&c), Side::Train, &default_template(), &b, 512).unwrap();
        let targets: Vec<&str> = pairs.iter().map(|p| p.target_text.as_str()).collect();
        assert_eq!(
            targets,
            ["Speaker: Mrs Elton Addressee: Emma", "Speaker: Emma Addressee: none", "Speaker: Mrs Elton Addressee: Emma, Harriet"]
        );
        let plain = find_template("replied-by.speaker").unwrap();
        let pairs = build_training_pairs(&c, &all_train(&c), Side::Train, &plain, &b, 512).unwrap();
        assert_eq!(pairs[0].target_text, "Speaker: Mrs Elton");
        assert!(pairs[0].source.text.contains("replied by: <mask>"));
    }

    #[test]
    fn unknown_speaker_names_the_record() {
        let mut c = figure_corpus();
        let novel = c.novels.get_mut(&"emma".into()).unwrap();
        novel.quotations[0].speaker_id = "Z".into();
        let b = OracleBackend::new(["x"]);
        let err = build_training_pairs(&c, &all_train(&c), Side::Train, &default_template(), &b, 512).unwrap_err();
        assert!(err.to_string().contains("emma/"), "{err}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainingConfig { epochs: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainingConfig { aux_task: Some(AuxTask::Gender), ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrainingConfig::default().validate().is_ok());
    }

    #[test]
    fn oracle_is_not_trainable() {
        let c = corpus(1, 4);
        let split = make_holdout_split(&c, 0.25, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut b = OracleBackend::new(["x"]);
        let cfg = TrainingConfig { checkpoint_dir: dir.path().into(), ..Default::default() };
        assert!(matches!(train(&c, &split, &cfg, &mut b), Err(Error::NotTrainable)));
    }

    #[test]
    fn loss_falls_and_resume_continues_numbering() {
        let c = corpus(2, 6);
        let split = make_holdout_split(&c, 0.25, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tiny = TinyConfig { embed_dim: 8, hidden_dim: 12, learning_rate: 0.02, ..Default::default() };
        let mut b = TinyBackend::for_corpus(&c, tiny).unwrap();
        let cfg = TrainingConfig {
            template: "replied-by.speaker".into(),
            epochs: 4,
            batch_size: 4,
            checkpoint_dir: dir.path().into(),
            ..Default::default()
        };
        let m = train(&c, &split, &cfg, &mut b).unwrap();
        assert_eq!(m.epoch_losses.len(), 4);
        assert!(m.epoch_losses[3].mean_loss < m.epoch_losses[0].mean_loss);
        assert_eq!(m.pair_count, split.train_ids.len());
        assert!(dir.path().join(PAIRS_FILE).exists());

        let mut again = TinyBackend::load(dir.path()).unwrap();
        let resumed = train(&c, &split, &TrainingConfig { epochs: 2, resume: true, ..cfg }, &mut again).unwrap();
        let epochs: Vec<usize> = resumed.epoch_losses.iter().map(|e| e.epoch).collect();
        assert_eq!(epochs, [1, 2, 3, 4, 5, 6]);
        assert_eq!(TrainingManifest::read(dir.path()).unwrap(), resumed);
    }

    #[test]
    fn same_seed_same_pairs_and_losses() {
        let c = corpus(1, 6);
        let split = make_holdout_split(&c, 0.25, 2).unwrap();
        let run = || {
            let dir = tempfile::tempdir().unwrap();
            let tiny = TinyConfig { embed_dim: 8, hidden_dim: 8, ..Default::default() };
            let mut b = TinyBackend::for_corpus(&c, tiny).unwrap();
            let cfg = TrainingConfig { epochs: 2, checkpoint_dir: dir.path().into(), ..Default::default() };
            train(&c, &split, &cfg, &mut b).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.dataset_fingerprint, b.dataset_fingerprint);
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }
}
