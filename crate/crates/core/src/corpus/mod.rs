//! Normalized data model for annotated novels.
//!
//! A [`NovelCorpus`] maps each novel to its character roster and the ordered
//! list of annotated quotations. Source-specific adapters ([`pdnc`], [`wp`])
//! produce an [`IngestReport`]: the corpus plus every record that could not be
//! turned into a [`QuotationInstance`].

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normalize::normalize_name;

mod filter;
pub mod io;
pub mod pdnc;
pub mod split;
pub mod stats;
pub mod wp;

pub use filter::filter_minor_speakers;
pub use split::{
    make_cross_domain_splits, make_holdout_split, make_in_domain_split, QuoteKey, Side, SplitSpec,
};
pub use stats::{corpus_stats, Counts, SideStats, StatsReport};

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

id_type!(
    /// Identifier of a novel, unique within a corpus.
    NovelId
);
id_type!(
    /// Identifier of a character, unique within one novel's roster.
    CharacterId
);
id_type!(
    /// Identifier of a quotation, unique within one novel.
    QuoteId
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_lowercase().as_str() {
            "female" | "f" => Some(Gender::Female),
            "male" | "m" => Some(Gender::Male),
            "unknown" | "u" | "" | "x" => Some(Gender::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuoteType {
    Explicit,
    Anaphoric,
    Implicit,
}

impl QuoteType {
    pub const ALL: [QuoteType; 3] = [QuoteType::Explicit, QuoteType::Anaphoric, QuoteType::Implicit];

    pub fn parse(s: &str) -> Option<QuoteType> {
        match s.trim().to_lowercase().as_str() {
            "explicit" => Some(QuoteType::Explicit),
            "anaphoric" => Some(QuoteType::Anaphoric),
            "implicit" => Some(QuoteType::Implicit),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            QuoteType::Explicit => "explicit",
            QuoteType::Anaphoric => "anaphoric",
            QuoteType::Implicit => "implicit",
        }
    }

    pub fn is_explicit(self) -> bool {
        self == QuoteType::Explicit
    }
}

impl fmt::Display for QuoteType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterEntry {
    pub character_id: CharacterId,
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub gender: Option<Gender>,
}

impl CharacterEntry {
    pub fn new(id: impl Into<CharacterId>, canonical_name: impl Into<String>) -> Self {
        CharacterEntry {
            character_id: id.into(),
            canonical_name: canonical_name.into(),
            aliases: Vec::new(),
            gender: None,
        }
    }

    pub fn with_aliases<I, S>(mut self, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.aliases = aliases.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_gender(mut self, gender: Gender) -> Self {
        self.gender = Some(gender);
        self
    }

    /// Canonical name followed by aliases.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.canonical_name.as_str()).chain(self.aliases.iter().map(String::as_str))
    }
}

/// The candidate speakers of one novel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterRoster {
    pub novel_id: NovelId,
    pub entries: Vec<CharacterEntry>,
}

impl CharacterRoster {
    /// Builds a roster and checks its invariants.
    pub fn new(novel_id: impl Into<NovelId>, entries: Vec<CharacterEntry>) -> Result<Self> {
        let roster = CharacterRoster {
            novel_id: novel_id.into(),
            entries,
        };
        roster.validate()?;
        Ok(roster)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |message: String| Error::InvalidRoster {
            novel: self.novel_id.to_string(),
            message,
        };
        let mut ids = HashSet::new();
        let mut names: HashMap<String, &CharacterId> = HashMap::new();
        for entry in &self.entries {
            if !ids.insert(&entry.character_id) {
                return Err(invalid(format!("duplicate character id `{}`", entry.character_id)));
            }
            if entry.canonical_name.trim().is_empty() {
                return Err(invalid(format!("character `{}` has an empty name", entry.character_id)));
            }
            if entry.aliases.iter().any(|a| a == &entry.canonical_name) {
                return Err(invalid(format!(
                    "character `{}` repeats its canonical name among aliases",
                    entry.character_id
                )));
            }
            for name in entry.names() {
                let key = normalize_name(name);
                if key.is_empty() {
                    return Err(invalid(format!("character `{}` has a blank alias", entry.character_id)));
                }
                if let Some(other) = names.insert(key.clone(), &entry.character_id) {
                    return Err(invalid(format!(
                        "name `{name}` is shared by `{other}` and `{}`",
                        entry.character_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &CharacterId) -> Option<&CharacterEntry> {
        self.entries.iter().find(|e| &e.character_id == id)
    }

    pub fn contains(&self, id: &CharacterId) -> bool {
        self.get(id).is_some()
    }

    /// Index of a character in roster order.
    pub fn position(&self, id: &CharacterId) -> Option<usize> {
        self.entries.iter().position(|e| &e.character_id == id)
    }

    /// Exact lookup of a (normalized) name against canonical names and aliases.
    pub fn lookup_name(&self, name: &str) -> Option<&CharacterEntry> {
        let key = normalize_name(name);
        if key.is_empty() {
            return None;
        }
        self.entries
            .iter()
            .find(|e| e.names().any(|n| normalize_name(n) == key))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotationInstance {
    pub novel_id: NovelId,
    pub quote_id: QuoteId,
    pub text: String,
    pub left_context: String,
    pub right_context: String,
    pub quote_type: QuoteType,
    pub speaker_id: CharacterId,
    #[serde(default)]
    pub addressee_ids: Vec<CharacterId>,
}

impl QuotationInstance {
    pub fn key(&self) -> QuoteKey {
        QuoteKey::new(self.novel_id.clone(), self.quote_id.clone())
    }
}

/// One novel: roster plus quotations in source-text order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Novel {
    pub roster: CharacterRoster,
    pub quotations: Vec<QuotationInstance>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NovelCorpus {
    pub novels: BTreeMap<NovelId, Novel>,
}

impl NovelCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a novel after validating every quotation against the roster.
    pub fn insert(&mut self, roster: CharacterRoster, quotations: Vec<QuotationInstance>) -> Result<()> {
        let novel = Novel { roster, quotations };
        validate_novel(&novel)?;
        let id = novel.roster.novel_id.clone();
        if self.novels.insert(id.clone(), novel).is_some() {
            return Err(Error::InvalidCorpus(format!("novel `{id}` added twice")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (id, novel) in &self.novels {
            if &novel.roster.novel_id != id {
                return Err(Error::InvalidCorpus(format!(
                    "novel key `{id}` does not match roster novel id `{}`",
                    novel.roster.novel_id
                )));
            }
            validate_novel(novel)?;
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.novels.is_empty()
    }

    pub fn novel_count(&self) -> usize {
        self.novels.len()
    }

    pub fn quotation_count(&self) -> usize {
        self.novels.values().map(|n| n.quotations.len()).sum()
    }

    pub fn novel(&self, id: &NovelId) -> Option<&Novel> {
        self.novels.get(id)
    }

    pub fn roster(&self, id: &NovelId) -> Option<&CharacterRoster> {
        self.novels.get(id).map(|n| &n.roster)
    }

    /// All quotations, novels in id order, quotations in text order.
    pub fn quotations(&self) -> impl Iterator<Item = &QuotationInstance> {
        self.novels.values().flat_map(|n| n.quotations.iter())
    }

    pub fn quotation(&self, key: &QuoteKey) -> Option<&QuotationInstance> {
        self.novels
            .get(&key.novel_id)?
            .quotations
            .iter()
            .find(|q| q.quote_id == key.quote_id)
    }

    /// Quotations whose key is in `keys`, in corpus order.
    pub fn select<'a>(
        &'a self,
        keys: &'a std::collections::BTreeSet<QuoteKey>,
    ) -> impl Iterator<Item = &'a QuotationInstance> + 'a {
        self.quotations().filter(move |q| keys.contains(&q.key()))
    }
}

fn validate_novel(novel: &Novel) -> Result<()> {
    novel.roster.validate()?;
    let roster = &novel.roster;
    let mut seen = HashSet::new();
    for q in &novel.quotations {
        let bad = |message: String| {
            Error::InvalidCorpus(format!("{}/{}: {message}", q.novel_id, q.quote_id))
        };
        if q.novel_id != roster.novel_id {
            return Err(bad(format!("belongs to novel `{}`", roster.novel_id)));
        }
        if !seen.insert(&q.quote_id) {
            return Err(bad("duplicate quote id".into()));
        }
        if q.text.is_empty() {
            return Err(bad("empty quotation text".into()));
        }
        if !roster.contains(&q.speaker_id) {
            return Err(bad(format!("speaker `{}` not in roster", q.speaker_id)));
        }
        if let Some(a) = q.addressee_ids.iter().find(|a| !roster.contains(a)) {
            return Err(bad(format!("addressee `{a}` not in roster")));
        }
    }
    Ok(())
}

/// A source record that did not become a quotation, or was only partly used.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub novel_id: NovelId,
    pub record: String,
    pub kind: RejectKind,
    pub reason: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectKind {
    /// The whole record was excluded.
    Excluded,
    /// The record was kept but an addressee label was dropped.
    AddresseeDropped,
    /// A roster alias was dropped because several characters claim it.
    AliasDropped,
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub corpus: NovelCorpus,
    pub rejects: Vec<Reject>,
}

impl IngestReport {
    pub fn excluded(&self) -> usize {
        self.rejects
            .iter()
            .filter(|r| r.kind == RejectKind::Excluded)
            .count()
    }
}

/// Drops aliases claimed by several characters (or colliding with another
/// character's canonical name) so the roster satisfies the uniqueness
/// invariant. Canonical-name collisions cannot be repaired and are errors.
pub(crate) fn dedupe_roster_names(
    novel_id: &NovelId,
    entries: &mut [CharacterEntry],
    rejects: &mut Vec<Reject>,
) -> Result<()> {
    let mut canonical: HashMap<String, usize> = HashMap::new();
    for (i, e) in entries.iter().enumerate() {
        if let Some(j) = canonical.insert(normalize_name(&e.canonical_name), i) {
            return Err(Error::InvalidRoster {
                novel: novel_id.to_string(),
                message: format!(
                    "characters `{}` and `{}` share the name `{}`",
                    entries[j].character_id, e.character_id, e.canonical_name
                ),
            });
        }
    }
    let mut claims: HashMap<String, usize> = HashMap::new();
    for e in entries.iter() {
        let mut own = HashSet::new();
        for a in &e.aliases {
            let key = normalize_name(a);
            if own.insert(key.clone()) {
                *claims.entry(key).or_default() += 1;
            }
        }
    }
    for (i, e) in entries.iter_mut().enumerate() {
        let mut kept = Vec::new();
        let mut own = HashSet::new();
        let own_canonical = normalize_name(&e.canonical_name);
        for alias in std::mem::take(&mut e.aliases) {
            let key = normalize_name(&alias);
            if key.is_empty() || key == own_canonical || !own.insert(key.clone()) {
                continue;
            }
            let clashes_canonical = canonical.get(&key).is_some_and(|&j| j != i);
            if claims.get(&key).copied().unwrap_or(0) > 1 || clashes_canonical {
                rejects.push(Reject {
                    novel_id: novel_id.clone(),
                    record: e.character_id.to_string(),
                    kind: RejectKind::AliasDropped,
                    reason: format!("alias `{alias}` is ambiguous within the roster"),
                });
                continue;
            }
            kept.push(alias);
        }
        e.aliases = kept;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn entry(id: &str, name: &str) -> CharacterEntry {
        CharacterEntry::new(id, name)
    }

    pub fn quote(novel: &str, id: &str, speaker: &str, quote_type: QuoteType) -> QuotationInstance {
        QuotationInstance {
            novel_id: novel.into(),
            quote_id: id.into(),
            text: format!("\"Line {id}.\""),
            left_context: String::new(),
            right_context: String::new(),
            quote_type,
            speaker_id: speaker.into(),
            addressee_ids: Vec::new(),
        }
    }

    /// A corpus of `novels` novels, each with characters A and B and
    /// `quotes_per_novel` quotations alternating between them.
    pub fn corpus(novels: usize, quotes_per_novel: usize) -> NovelCorpus {
        let mut corpus = NovelCorpus::new();
        for n in 0..novels {
            let novel = format!("N{n:02}");
            let roster =
                CharacterRoster::new(novel.as_str(), vec![entry("A", "Anna"), entry("B", "Ben")]).unwrap();
            let quotes = (0..quotes_per_novel)
                .map(|i| {
                    let t = QuoteType::ALL[i % 3];
                    quote(&novel, &format!("Q{i:03}"), if i % 2 == 0 { "A" } else { "B" }, t)
                })
                .collect();
            corpus.insert(roster, quotes).unwrap();
        }
        corpus
    }
}
