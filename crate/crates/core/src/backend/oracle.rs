//! Table-driven backend with exactly known probabilities.
//!
//! Tokens are whitespace-separated words. The target vocabulary is fixed at
//! construction; source words outside it get stable hashed ids so that any
//! source text can be used as a table key. A table entry maps
//! `(source text, target prefix)` to a partial next-token distribution; the
//! probability mass not assigned explicitly is spread uniformly over the
//! remaining vocabulary. Lookups that miss the table fall back to the
//! configured default (uniform unless overridden).

use std::collections::HashMap;
use std::ops::Range;

use super::{Seq2SeqBackend, TokenId};
use crate::error::{Error, Result};
use crate::templates::SourceTokenizer;

pub const MASK: &str = "<mask>";

#[derive(Clone, Debug)]
struct Entry {
    dist: Vec<f64>,
    fixed: Vec<bool>,
}

#[derive(Clone, Debug, Default)]
pub struct OracleBackend {
    vocab: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: Option<TokenId>,
    table: HashMap<(Vec<TokenId>, Vec<TokenId>), Entry>,
    fallback: Option<Vec<f64>>,
    max_source_len: usize,
}

impl OracleBackend {
    /// Backend over the given target vocabulary, with a uniform fallback.
    pub fn new<I, S>(vocab: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let vocab: Vec<String> = vocab.into_iter().map(Into::into).collect();
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        OracleBackend {
            vocab,
            index,
            max_source_len: usize::MAX,
            ..Default::default()
        }
    }

    /// Marks `token` (which must be in the vocabulary) as end-of-sequence.
    /// `encode_target` then appends it.
    pub fn with_eos(mut self, token: &str) -> Result<Self> {
        self.eos = Some(self.token_id(token)?);
        Ok(self)
    }

    pub fn with_max_source_len(mut self, max: usize) -> Self {
        self.max_source_len = max;
        self
    }

    /// Replaces the uniform fallback with a fixed distribution.
    pub fn with_fallback(mut self, entries: &[(&str, f64)]) -> Result<Self> {
        self.fallback = Some(self.complete(entries)?);
        Ok(self)
    }

    pub fn token_id(&self, token: &str) -> Result<TokenId> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Backend(format!("token `{token}` not in oracle vocabulary")))
    }

    /// Sets the next-token distribution after `prefix` (space-separated
    /// target tokens) for `source`.
    pub fn set(&mut self, source: &str, prefix: &str, entries: &[(&str, f64)]) -> Result<()> {
        let dist = self.complete(entries)?;
        let mut fixed = vec![false; dist.len()];
        for (tok, _) in entries {
            fixed[self.token_id(tok)? as usize] = true;
        }
        let key = (self.source_ids(source), self.target_ids(prefix)?);
        self.table.insert(key, Entry { dist, fixed });
        Ok(())
    }

    /// Sets the table so that each token of `target` gets the matching
    /// probability under teacher forcing. Entries set by earlier calls are
    /// kept; only the unassigned mass is rescaled.
    pub fn set_path(&mut self, source: &str, target: &str, probs: &[f64]) -> Result<()> {
        let tokens: Vec<&str> = target.split_whitespace().collect();
        if tokens.len() != probs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} probabilities for {} target tokens",
                probs.len(),
                tokens.len()
            )));
        }
        for (c, (tok, p)) in tokens.iter().zip(probs).enumerate() {
            let prefix = tokens[..c].join(" ");
            let key = (self.source_ids(source), self.target_ids(&prefix)?);
            let mut entry = self.table.get(&key).cloned().unwrap_or_else(|| Entry {
                dist: self.default_dist(),
                fixed: vec![false; self.vocab.len()],
            });
            let id = self.token_id(tok)? as usize;
            fix_entry(&mut entry, id, *p)?;
            self.table.insert(key, entry);
        }
        Ok(())
    }

    fn complete(&self, entries: &[(&str, f64)]) -> Result<Vec<f64>> {
        let n = self.vocab.len();
        let mut dist = vec![f64::NAN; n];
        let mut assigned = 0.0;
        for (tok, p) in entries {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidArgument(format!("probability {p} for `{tok}`")));
            }
            dist[self.token_id(tok)? as usize] = *p;
            assigned += p;
        }
        if assigned > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!("distribution sums to {assigned}")));
        }
        let free = dist.iter().filter(|p| p.is_nan()).count();
        let share = if free == 0 { 0.0 } else { (1.0 - assigned).max(0.0) / free as f64 };
        for p in dist.iter_mut().filter(|p| p.is_nan()) {
            *p = share;
        }
        Ok(dist)
    }

    fn default_dist(&self) -> Vec<f64> {
        match &self.fallback {
            Some(d) => d.clone(),
            None => vec![1.0 / self.vocab.len() as f64; self.vocab.len()],
        }
    }

    fn source_ids(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| match self.index.get(w) {
                Some(id) => *id,
                None => self.vocab.len() as TokenId + (fnv1a(w) % (1 << 24)) as TokenId,
            })
            .collect()
    }

    fn target_ids(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.token_id(w)).collect()
    }
}

/// Fixes `dist[id] = p` and rescales the unfixed entries to keep the total
/// at 1.
fn fix_entry(entry: &mut Entry, id: usize, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p}")));
    }
    entry.dist[id] = p;
    entry.fixed[id] = true;
    let fixed_mass: f64 = entry.dist.iter().zip(&entry.fixed).filter(|(_, f)| **f).map(|(v, _)| v).sum();
    if fixed_mass > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("distribution sums to {fixed_mass}")));
    }
    let free: Vec<usize> = (0..entry.dist.len()).filter(|i| !entry.fixed[*i]).collect();
    let free_mass: f64 = free.iter().map(|i| entry.dist[*i]).sum();
    let target = (1.0 - fixed_mass).max(0.0);
    for i in &free {
        entry.dist[*i] = if free_mass > 0.0 {
            entry.dist[*i] * target / free_mass
        } else {
            target / free.len() as f64
        };
    }
    Ok(())
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl SourceTokenizer for OracleBackend {
    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    spans.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            spans.push(s..text.len());
        }
        spans
    }

    fn mask_token(&self) -> &str {
        MASK
    }

    fn marker_count(&self) -> usize {
        0
    }
}

impl Seq2SeqBackend for OracleBackend {
    fn kind(&self) -> &str {
        "oracle"
    }

    fn encode_source(&self, text: &str) -> Result<Vec<TokenId>> {
        Ok(self.source_ids(text))
    }

    fn encode_target(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.target_ids(text)?;
        if let Some(eos) = self.eos {
            ids.push(eos);
        }
        Ok(ids)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|t| Some(**t) != self.eos)
            .map(|t| self.vocab.get(*t as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn eos(&self) -> Option<TokenId> {
        self.eos
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn max_source_len(&self) -> usize {
        self.max_source_len
    }

    fn next_token_distribution(&self, source: &[TokenId], prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(self
            .table
            .get(&(source.to_vec(), prefix.to_vec()))
            .map(|e| e.dist.clone())
            .unwrap_or_else(|| self.default_dist()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{DecodeStrategy, SequencePair};

    fn backend() -> OracleBackend {
        OracleBackend::new(["Speaker:", "Emma", "Mrs", "Elton", "</s>"])
    }

    #[test]
    fn table_lookup() {
        let mut b = OracleBackend::new(["A", "B"]);
        b.set("x y", "", &[("A", 0.8)]).unwrap();
        let pair = SequencePair::new(b.encode_source("x y").unwrap(), b.encode_target("A").unwrap());
        assert_eq!(b.teacher_forced_probs(&pair).unwrap().as_slice(), &[0.8]);
        let dist = b.next_token_distribution(&pair.source_tokens, &[]).unwrap();
        assert!((dist[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn uniform_fallback() {
        let b = backend();
        let pair = SequencePair::new(b.encode_source("anything").unwrap(), b.encode_target("Speaker: Emma").unwrap());
        let probs = b.teacher_forced_probs(&pair).unwrap();
        assert_eq!(probs.len(), 2);
        assert!(probs.as_slice().iter().all(|p| *p == 1.0 / 5.0));
    }

    #[test]
    fn scripted_generation() {
        let mut b = backend().with_eos("</s>").unwrap();
        b.set_path("src", "Speaker: Emma </s>", &[0.9, 0.6, 0.7]).unwrap();
        let src = b.encode_source("src").unwrap();
        let out = b.free_generate(&src, 10, DecodeStrategy::Greedy).unwrap();
        assert_eq!(b.decode(&out), "Speaker: Emma");
        assert_eq!(out.len(), 3);
        assert_eq!(b.free_generate(&src, 10, DecodeStrategy::Beam(1)).unwrap(), out);
        assert_eq!(b.free_generate(&src, 1, DecodeStrategy::Greedy).unwrap().len(), 1);
        assert_eq!(b.free_generate(&src, 1, DecodeStrategy::Beam(3)).unwrap().len(), 1);
    }

    #[test]
    fn beam_finds_better_sequence_than_greedy() {
        // greedy takes "Mrs" (0.5) then a flat tail; beam prefers Emma (0.4) then a sure stop
        let mut b = backend().with_eos("</s>").unwrap();
        b.set("s", "", &[("Mrs", 0.5), ("Emma", 0.4), ("Speaker:", 0.1)]).unwrap();
        b.set("s", "Mrs", &[("Elton", 0.35), ("Emma", 0.25), ("</s>", 0.2), ("Mrs", 0.1), ("Speaker:", 0.1)]).unwrap();
        b.set("s", "Emma", &[("</s>", 1.0)]).unwrap();
        let src = b.encode_source("s").unwrap();
        let greedy = b.free_generate(&src, 2, DecodeStrategy::Greedy).unwrap();
        let beam = b.free_generate(&src, 2, DecodeStrategy::Beam(2)).unwrap();
        assert_eq!(b.decode(&greedy), "Mrs Elton");
        assert_eq!(b.decode(&beam), "Emma");
    }

    #[test]
    fn not_trainable_and_no_embeddings() {
        let mut b = backend();
        let pair = SequencePair::new(vec![0], vec![1]);
        assert!(matches!(b.fit_step(&[pair.clone()]), Err(Error::NotTrainable)));
        assert_eq!(b.fit_step(&[pair.clone()]).unwrap_err().to_string(), "backend not trainable");
        assert_eq!(
            b.target_token_embeddings(&pair).unwrap_err().to_string(),
            "embeddings unsupported"
        );
    }

    #[test]
    fn source_length_checked() {
        let b = backend().with_max_source_len(2);
        let pair = SequencePair::new(b.encode_source("a b c").unwrap(), vec![0]);
        assert!(matches!(b.teacher_forced_probs(&pair), Err(Error::SourceTooLong { len: 3, max: 2 })));
    }

    #[test]
    fn invalid_distributions_rejected() {
        let mut b = backend();
        assert!(b.set("s", "", &[("Emma", 0.7), ("Mrs", 0.7)]).is_err());
        assert!(b.set("s", "", &[("Nobody", 0.1)]).is_err());
        assert!(b.set_path("s", "Emma", &[0.5, 0.5]).is_err());
        b.set_path("t", "Mrs", &[0.7]).unwrap();
        assert!(b.set_path("t", "Emma", &[0.7]).is_err());
    }
}
