//! Train/test split protocols.
//!
//! * cross-domain: whole novels are held out; each fold's test novels are
//!   disjoint from every other fold's.
//! * in-domain: explicit quotations train, anaphoric and implicit test.
//! * holdout: a seeded random fraction of quotations is held out.
//!
//! Splits serialize as one JSON line per `(fold, side, novel_id, quote_id)`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{read_jsonl, write_jsonl};
use super::{NovelCorpus, NovelId, QuoteId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuoteKey {
    pub novel_id: NovelId,
    pub quote_id: QuoteId,
}

impl QuoteKey {
    pub fn new(novel_id: impl Into<NovelId>, quote_id: impl Into<QuoteId>) -> Self {
        QuoteKey {
            novel_id: novel_id.into(),
            quote_id: quote_id.into(),
        }
    }
}

impl std::fmt::Display for QuoteKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.novel_id, self.quote_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub fold_index: usize,
    pub train_ids: BTreeSet<QuoteKey>,
    pub test_ids: BTreeSet<QuoteKey>,
}

impl SplitSpec {
    pub fn ids(&self, side: Side) -> &BTreeSet<QuoteKey> {
        match side {
            Side::Train => &self.train_ids,
            Side::Test => &self.test_ids,
        }
    }

    pub fn novels(&self, side: Side) -> BTreeSet<&NovelId> {
        self.ids(side).iter().map(|k| &k.novel_id).collect()
    }

    pub fn side_of(&self, key: &QuoteKey) -> Option<Side> {
        if self.train_ids.contains(key) {
            Some(Side::Train)
        } else if self.test_ids.contains(key) {
            Some(Side::Test)
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.train_ids.intersection(&self.test_ids).next() {
            return Err(Error::InvalidArgument(format!(
                "split `{}` fold {} has {k} on both sides",
                self.name, self.fold_index
            )));
        }
        Ok(())
    }
}

/// Holds out `test_novels_per_fold` whole novels per fold. Novel order is a
/// seeded shuffle of the sorted novel ids; fold `i` tests on the `i`-th chunk
/// and trains on every other novel.
pub fn make_cross_domain_splits(
    corpus: &NovelCorpus,
    n_folds: usize,
    test_novels_per_fold: usize,
    seed: u64,
) -> Result<Vec<SplitSpec>> {
    let needed = n_folds * test_novels_per_fold;
    if n_folds == 0 || needed > corpus.novel_count() {
        return Err(Error::TooFewNovels {
            folds: n_folds,
            per_fold: test_novels_per_fold,
            needed,
            available: corpus.novel_count(),
        });
    }
    let mut novels: Vec<&NovelId> = corpus.novels.keys().collect();
    novels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let folds = (0..n_folds)
        .map(|fold| {
            let test: BTreeSet<&NovelId> = novels[fold * test_novels_per_fold..(fold + 1) * test_novels_per_fold]
                .iter()
                .copied()
                .collect();
            let (mut train_ids, mut test_ids) = (BTreeSet::new(), BTreeSet::new());
            for q in corpus.quotations() {
                if test.contains(&q.novel_id) {
                    test_ids.insert(q.key());
                } else {
                    train_ids.insert(q.key());
                }
            }
            SplitSpec {
                name: format!("cross-domain-s{seed}"),
                fold_index: fold,
                train_ids,
                test_ids,
            }
        })
        .collect();
    Ok(folds)
}

/// Explicit quotations train; anaphoric and implicit quotations test.
pub fn make_in_domain_split(corpus: &NovelCorpus) -> Result<SplitSpec> {
    if corpus.quotation_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let (train, test): (Vec<_>, Vec<_>) = corpus.quotations().partition(|q| q.quote_type.is_explicit());
    Ok(SplitSpec {
        name: "in-domain".into(),
        fold_index: 0,
        train_ids: train.into_iter().map(|q| q.key()).collect(),
        test_ids: test.into_iter().map(|q| q.key()).collect(),
    })
}

/// Holds out `round(test_fraction × n)` quotations chosen by a seeded shuffle.
pub fn make_holdout_split(corpus: &NovelCorpus, test_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    if corpus.quotation_count() == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut keys: Vec<QuoteKey> = corpus.quotations().map(|q| q.key()).collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * keys.len() as f64).round() as usize;
    let test_ids: BTreeSet<_> = keys.drain(..n_test).collect();
    Ok(SplitSpec {
        name: format!("holdout-s{seed}"),
        fold_index: 0,
        train_ids: keys.into_iter().collect(),
        test_ids,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    split: String,
    fold: usize,
    side: Side,
    novel_id: NovelId,
    quote_id: QuoteId,
}

pub fn write_splits(path: &Path, splits: &[SplitSpec]) -> Result<()> {
    let records = splits.iter().flat_map(|s| {
        [Side::Train, Side::Test].into_iter().flat_map(move |side| {
            s.ids(side).iter().map(move |k| SplitRecord {
                split: s.name.clone(),
                fold: s.fold_index,
                side,
                novel_id: k.novel_id.clone(),
                quote_id: k.quote_id.clone(),
            })
        })
    });
    write_jsonl(path, records)
}

/// Reads splits back, ordered by fold index. Folds with no records on one
/// side come back with that side empty.
pub fn read_splits(path: &Path) -> Result<Vec<SplitSpec>> {
    let records: Vec<SplitRecord> = read_jsonl(path)?;
    let mut folds: BTreeMap<usize, SplitSpec> = BTreeMap::new();
    for r in records {
        let spec = folds.entry(r.fold).or_insert_with(|| SplitSpec {
            name: r.split.clone(),
            fold_index: r.fold,
            train_ids: BTreeSet::new(),
            test_ids: BTreeSet::new(),
        });
        let key = QuoteKey::new(r.novel_id, r.quote_id);
        match r.side {
            Side::Train => spec.train_ids.insert(key),
            Side::Test => spec.test_ids.insert(key),
        };
    }
    let specs: Vec<SplitSpec> = folds.into_values().collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{self, entry, quote};
    use crate::corpus::{CharacterRoster, QuoteType};

    #[test]
    fn six_novel_two_folds() {
        let corpus = fixtures::corpus(6, 5);
        let folds = make_cross_domain_splits(&corpus, 2, 2, 7).unwrap();
        assert_eq!(folds.len(), 2);
        for f in &folds {
            assert_eq!(f.novels(Side::Test).len(), 2);
            assert_eq!(f.novels(Side::Train).len(), 4);
            assert!(f.novels(Side::Test).is_disjoint(&f.novels(Side::Train)));
            assert_eq!(f.train_ids.len() + f.test_ids.len(), 30);
        }
        assert!(folds[0].novels(Side::Test).is_disjoint(&folds[1].novels(Side::Test)));
    }

    #[test]
    fn degenerate_zero_test_novels() {
        let corpus = fixtures::corpus(3, 2);
        let folds = make_cross_domain_splits(&corpus, 1, 0, 0).unwrap();
        assert_eq!(folds.len(), 1);
        assert!(folds[0].test_ids.is_empty());
        assert_eq!(folds[0].train_ids.len(), 6);
    }

    #[test]
    fn too_few_novels_states_arithmetic() {
        let corpus = fixtures::corpus(5, 1);
        let err = make_cross_domain_splits(&corpus, 2, 3, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("needs 6") && msg.contains("has 5"), "{msg}");
    }

    #[test]
    fn in_domain_partitions_by_type() {
        let roster = CharacterRoster::new("n", vec![entry("a", "Anna")]).unwrap();
        let types = [
            QuoteType::Explicit,
            QuoteType::Implicit,
            QuoteType::Explicit,
            QuoteType::Implicit,
            QuoteType::Implicit,
        ];
        let quotes = types
            .iter()
            .enumerate()
            .map(|(i, t)| quote("n", &i.to_string(), "a", *t))
            .collect();
        let mut corpus = NovelCorpus::new();
        corpus.insert(roster, quotes).unwrap();
        let split = make_in_domain_split(&corpus).unwrap();
        assert_eq!(split.train_ids.len(), 2);
        assert_eq!(split.test_ids.len(), 3);
        assert_eq!(split.novels(Side::Train), split.novels(Side::Test));
    }

    #[test]
    fn in_domain_on_empty_corpus_fails() {
        assert!(matches!(make_in_domain_split(&NovelCorpus::new()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn serialization_round_trip_is_byte_stable() {
        let corpus = fixtures::corpus(6, 4);
        let folds = make_cross_domain_splits(&corpus, 3, 2, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_splits(&a, &folds).unwrap();
        let back = read_splits(&a).unwrap();
        assert_eq!(back, folds);
        write_splits(&b, &make_cross_domain_splits(&corpus, 3, 2, 11).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn holdout_fraction() {
        let corpus = fixtures::corpus(2, 10);
        let split = make_holdout_split(&corpus, 0.2, 3).unwrap();
        assert_eq!(split.test_ids.len(), 4);
        assert_eq!(split.train_ids.len(), 16);
        split.validate().unwrap();
    }
}
