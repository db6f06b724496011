//! Word-level vocabulary used by the tiny backend.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::TokenId;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MASK: &str = "<mask>";

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const BOS_ID: TokenId = 2;
pub const EOS_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, BOS, EOS, MASK];

fn token_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<mask>|\w+|[^\w\s]").expect("valid token pattern"))
}

/// Words, single punctuation marks and `<mask>`.
pub fn word_spans(text: &str) -> Vec<Range<usize>> {
    token_regex().find_iter(text).map(|m| m.range()).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl WordVocab {
    /// Vocabulary of every token occurring at least `min_count` times,
    /// ordered by descending frequency then lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for span in word_spans(text) {
                *counts.entry(&text[span]).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !SPECIALS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        WordVocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        word_spans(text).into_iter().map(|r| self.id(&text[r])).collect()
    }

    /// Joins tokens with spaces, dropping special tokens and the space
    /// before punctuation.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        let mut joiner = true;
        for &id in ids {
            if id < SPECIALS.len() as TokenId && id != UNK_ID {
                continue;
            }
            let tok = self.token(id);
            let punct = tok.chars().all(|c| !c.is_alphanumeric() && c != '_') && tok != "\"";
            if !joiner && !punct {
                out.push(' ');
            }
            out.push_str(tok);
            joiner = matches!(tok, "-" | "'" | "\u{2019}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(&self.tokens)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&raw)?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidConfig(format!("{} is not a word vocabulary", path.display())));
        }
        Ok(Self::from_tokens(tokens))
    }
}
