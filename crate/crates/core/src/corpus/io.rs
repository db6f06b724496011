//! Normalized corpus interchange format.
//!
//! A corpus directory holds two line-delimited JSON files, UTF-8 with `\n`
//! line endings:
//!
//! * `rosters.jsonl`: `novel_id, character_id, canonical_name, aliases, gender`
//! * `quotations.jsonl`: `novel_id, quote_id, text, left_context,
//!   right_context, quote_type, speaker_id, addressee_ids`
//!
//! Novels appear in id order, roster entries in roster order and quotations
//! in text order. Ingest commands also write `rejects.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CharacterEntry, CharacterId, CharacterRoster, Gender, NovelCorpus, NovelId, QuotationInstance,
    Reject,
};
use crate::error::{Error, Result};

pub const ROSTERS_FILE: &str = "rosters.jsonl";
pub const QUOTATIONS_FILE: &str = "quotations.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";

#[derive(Serialize, Deserialize)]
struct RosterRecord {
    novel_id: NovelId,
    character_id: CharacterId,
    canonical_name: String,
    aliases: Vec<String>,
    gender: Option<Gender>,
}

/// Writes any serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON lines, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::malformed(path, i + 1, e.to_string()))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_corpus(dir: &Path, corpus: &NovelCorpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let rosters = corpus.novels.values().flat_map(|n| {
        n.roster.entries.iter().map(move |e| RosterRecord {
            novel_id: n.roster.novel_id.clone(),
            character_id: e.character_id.clone(),
            canonical_name: e.canonical_name.clone(),
            aliases: e.aliases.clone(),
            gender: e.gender,
        })
    });
    write_jsonl(&dir.join(ROSTERS_FILE), rosters)?;
    write_jsonl(&dir.join(QUOTATIONS_FILE), corpus.quotations())
}

pub fn write_rejects(dir: &Path, rejects: &[Reject]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&dir.join(REJECTS_FILE), rejects)
}

/// Reads a normalized corpus directory and validates it.
pub fn read_corpus(dir: &Path) -> Result<NovelCorpus> {
    let roster_records: Vec<RosterRecord> = read_jsonl(&dir.join(ROSTERS_FILE))?;
    let quotations: Vec<QuotationInstance> = read_jsonl(&dir.join(QUOTATIONS_FILE))?;

    let mut order: Vec<NovelId> = Vec::new();
    let mut entries: std::collections::HashMap<NovelId, Vec<CharacterEntry>> = Default::default();
    for r in roster_records {
        if !entries.contains_key(&r.novel_id) {
            order.push(r.novel_id.clone());
        }
        entries.entry(r.novel_id).or_default().push(CharacterEntry {
            character_id: r.character_id,
            canonical_name: r.canonical_name,
            aliases: r.aliases,
            gender: r.gender,
        });
    }
    let mut quotes: std::collections::HashMap<NovelId, Vec<QuotationInstance>> = Default::default();
    for q in quotations {
        if !entries.contains_key(&q.novel_id) {
            return Err(Error::MissingRoster {
                novel: q.novel_id.to_string(),
                expected: dir.join(ROSTERS_FILE),
            });
        }
        quotes.entry(q.novel_id.clone()).or_default().push(q);
    }
    let mut corpus = NovelCorpus::new();
    for novel in order {
        let roster = CharacterRoster::new(novel.clone(), entries.remove(&novel).unwrap_or_default())?;
        corpus.insert(roster, quotes.remove(&novel).unwrap_or_default())?;
    }
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::fixtures;
    use crate::corpus::QuoteType;
    use proptest::prelude::*;

    fn arb_text() -> impl Strategy<Value = String> {
        "[a-zA-Z \"'.,\u{e9}\u{201c}\n]{0,40}"
    }

    proptest! {
        #[test]
        fn corpus_round_trips(
            texts in proptest::collection::vec((arb_text(), arb_text(), arb_text(), 0usize..3), 1..12),
            alias in "[A-Z][a-z]{1,6}",
        ) {
            let roster = CharacterRoster::new(
                "novel",
                vec![
                    CharacterEntry::new("c1", "Emma Woodhouse").with_aliases([alias.clone() + "x"]).with_gender(Gender::Female),
                    CharacterEntry::new("c2", "Mr Knightley"),
                ],
            ).unwrap();
            let quotes: Vec<_> = texts.iter().enumerate().map(|(i, (t, l, r, ty))| QuotationInstance {
                novel_id: "novel".into(),
                quote_id: format!("q{i}").into(),
                text: format!("\"{t}\""),
                left_context: l.clone(),
                right_context: r.clone(),
                quote_type: QuoteType::ALL[*ty],
                speaker_id: if i % 2 == 0 { "c1".into() } else { "c2".into() },
                addressee_ids: if i % 3 == 0 { vec!["c2".into()] } else { vec![] },
            }).collect();
            let mut corpus = NovelCorpus::new();
            corpus.insert(roster, quotes).unwrap();

            let dir = tempfile::tempdir().unwrap();
            write_corpus(dir.path(), &corpus).unwrap();
            let back = read_corpus(dir.path()).unwrap();
            prop_assert_eq!(back, corpus);
        }
    }

    #[test]
    fn records_use_documented_keys() {
        let corpus = fixtures::corpus(1, 1);
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let roster = fs::read_to_string(dir.path().join(ROSTERS_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(roster.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["aliases", "canonical_name", "character_id", "gender", "novel_id"]);

        let quotes = fs::read_to_string(dir.path().join(QUOTATIONS_FILE)).unwrap();
        let first: serde_json::Value = serde_json::from_str(quotes.lines().next().unwrap()).unwrap();
        let mut keys: Vec<_> = first.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "addressee_ids",
                "left_context",
                "novel_id",
                "quote_id",
                "quote_type",
                "right_context",
                "speaker_id",
                "text"
            ]
        );
        assert!(!quotes.contains('\r'));
    }

    #[test]
    fn quotation_for_unknown_novel_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(ROSTERS_FILE), "").unwrap();
        let q = fixtures::quote("ghost", "1", "a", QuoteType::Implicit);
        write_jsonl(&dir.path().join(QUOTATIONS_FILE), [q]).unwrap();
        assert!(matches!(read_corpus(dir.path()), Err(Error::MissingRoster { .. })));
    }
}
