use std::collections::HashMap;

use super::{CharacterId, NovelCorpus};
use crate::error::{Error, Result};

/// Removes quotations whose speaker has fewer than `threshold` quotations in
/// the same novel. Rosters are kept whole: filtered characters stay valid
/// candidates and addressees.
pub fn filter_minor_speakers(corpus: &NovelCorpus, threshold: usize) -> Result<NovelCorpus> {
    if threshold == 0 {
        return Err(Error::InvalidArgument("minor-speaker threshold must be at least 1".into()));
    }
    let mut out = corpus.clone();
    for novel in out.novels.values_mut() {
        let mut counts: HashMap<&CharacterId, usize> = HashMap::new();
        for q in &novel.quotations {
            *counts.entry(&q.speaker_id).or_default() += 1;
        }
        let keep: Vec<bool> = novel
            .quotations
            .iter()
            .map(|q| counts[&q.speaker_id] >= threshold)
            .collect();
        let mut flags = keep.into_iter();
        novel.quotations.retain(|_| flags.next().unwrap_or(false));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures::{entry, quote};
    use crate::corpus::{CharacterRoster, QuoteType};
    use proptest::prelude::*;

    fn corpus_with_counts(counts: &[usize]) -> NovelCorpus {
        let entries = (0..counts.len())
            .map(|i| entry(&format!("c{i}"), &format!("Name {i}")))
            .collect();
        let roster = CharacterRoster::new("n", entries).unwrap();
        let mut quotes = Vec::new();
        let mut remaining = counts.to_vec();
        let mut k = 0;
        // interleave speakers to make order preservation observable
        while remaining.iter().any(|&r| r > 0) {
            for (i, r) in remaining.iter_mut().enumerate() {
                if *r > 0 {
                    *r -= 1;
                    quotes.push(quote("n", &format!("q{k:04}"), &format!("c{i}"), QuoteType::Implicit));
                    k += 1;
                }
            }
        }
        let mut corpus = NovelCorpus::new();
        corpus.insert(roster, quotes).unwrap();
        corpus
    }

    #[test]
    fn keeps_only_frequent_speakers() {
        let corpus = corpus_with_counts(&[3, 12]);
        let filtered = filter_minor_speakers(&corpus, 10).unwrap();
        assert_eq!(filtered.quotation_count(), 12);
        assert!(filtered.quotations().all(|q| q.speaker_id.as_str() == "c1"));
        assert_eq!(filtered.roster(&"n".into()).unwrap().len(), 2, "roster untouched");
    }

    #[test]
    fn threshold_one_is_identity() {
        let corpus = corpus_with_counts(&[1, 2, 5]);
        assert_eq!(filter_minor_speakers(&corpus, 1).unwrap(), corpus);
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(filter_minor_speakers(&corpus_with_counts(&[1]), 0).is_err());
    }

    proptest! {
        #[test]
        fn survivors_meet_threshold(counts in proptest::collection::vec(0usize..15, 1..6), t in 1usize..12) {
            let corpus = corpus_with_counts(&counts);
            let filtered = filter_minor_speakers(&corpus, t).unwrap();
            for q in filtered.quotations() {
                let original = corpus.quotations().filter(|o| o.speaker_id == q.speaker_id).count();
                prop_assert!(original >= t);
            }
            let expected: usize = counts.iter().filter(|&&c| c >= t).sum();
            prop_assert_eq!(filtered.quotation_count(), expected);
        }
    }
}
