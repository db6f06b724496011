//! Adapter for the Project Dialogism Novel Corpus release layout.
//!
//! Expected layout: one subdirectory per novel under the corpus root; the
//! directory name is the novel id. Each novel directory contains
//!
//! * `character_info.csv` (required) with columns `Character ID`,
//!   `Main Name`, `Aliases`, `Gender`. Aliases are a Python-style set or list
//!   literal (`{'Emma', 'Miss Woodhouse'}`) or a `;`-separated string.
//! * `quotation_info.csv` (required) with columns `qID`, `quoteText`,
//!   `speaker`, `addressees`, `quoteType` and, optionally,
//!   `quoteByteSpans` (a list of `[start, end]` character offsets into
//!   `novel_text.txt`). Lower-case snake-case aliases of these headers
//!   (`quote_id`, `text`, `quote_type`, ...) are accepted as well.
//! * `novel_text.txt` (optional): the full text. When present together with
//!   spans, contexts are cut from it at paragraph granularity: the left
//!   context runs from the start of the paragraph preceding the quotation's
//!   paragraph up to the quotation; the right context runs from the end of
//!   the quotation to the end of the paragraph following it. Paragraphs are
//!   separated by blank lines. Explicit `left_context` / `right_context`
//!   columns take precedence.
//!
//! Speakers and addressees are matched by character id first, then by
//! normalized canonical name or alias. A speaker cell holding several names
//! is a multi-speaker quotation and goes to the rejects report.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{
    dedupe_roster_names, CharacterEntry, CharacterId, CharacterRoster, Gender, IngestReport, NovelCorpus,
    NovelId, QuotationInstance, QuoteType, Reject, RejectKind,
};
use crate::error::{Error, Result};

pub const CHARACTER_FILE: &str = "character_info.csv";
pub const QUOTATION_FILE: &str = "quotation_info.csv";
pub const TEXT_FILE: &str = "novel_text.txt";

/// Parses every novel directory under `root`.
pub fn parse_pdnc(root: &Path) -> Result<IngestReport> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();

    let parsed: Vec<Result<(CharacterRoster, Vec<QuotationInstance>, Vec<Reject>)>> =
        dirs.par_iter().map(|dir| parse_novel_dir(dir)).collect();

    let mut report = IngestReport::default();
    let mut corpus = NovelCorpus::new();
    for result in parsed {
        let (roster, quotes, rejects) = result?;
        corpus.insert(roster, quotes)?;
        report.rejects.extend(rejects);
    }
    report.corpus = corpus;
    Ok(report)
}

fn parse_novel_dir(dir: &Path) -> Result<(CharacterRoster, Vec<QuotationInstance>, Vec<Reject>)> {
    let novel_id = NovelId(
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    );
    let char_path = dir.join(CHARACTER_FILE);
    if !char_path.is_file() {
        return Err(Error::MissingRoster {
            novel: novel_id.to_string(),
            expected: char_path,
        });
    }
    let mut rejects = Vec::new();
    let roster = read_characters(&novel_id, &char_path, &mut rejects)?;

    let quote_path = dir.join(QUOTATION_FILE);
    if !quote_path.is_file() {
        return Err(Error::InvalidCorpus(format!(
            "novel `{novel_id}` has no {QUOTATION_FILE}"
        )));
    }
    let text_path = dir.join(TEXT_FILE);
    let text = if text_path.is_file() {
        Some(NovelText::new(
            fs::read_to_string(&text_path).map_err(|e| Error::io(&text_path, e))?,
        ))
    } else {
        None
    };
    let quotes = read_quotations(&novel_id, &quote_path, &roster, text.as_ref(), &mut rejects)?;
    Ok((roster, quotes, rejects))
}

struct Columns(HashMap<String, usize>);

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Columns(
            headers
                .iter()
                .enumerate()
                .map(|(i, h)| (h.trim().to_string(), i))
                .collect(),
        )
    }

    fn find(&self, names: &[&str]) -> Option<usize> {
        names.iter().find_map(|n| self.0.get(*n).copied())
    }

    fn require(&self, path: &Path, names: &[&str]) -> Result<usize> {
        self.find(names)
            .ok_or_else(|| Error::malformed(path, 1, format!("missing column {}", names[0])))
    }
}

fn read_characters(novel_id: &NovelId, path: &Path, rejects: &mut Vec<Reject>) -> Result<CharacterRoster> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    let cols = Columns::new(reader.headers().map_err(|e| Error::malformed(path, 1, e.to_string()))?);
    let id_col = cols.require(path, &["Character ID", "character_id", "id"])?;
    let name_col = cols.require(path, &["Main Name", "canonical_name", "name"])?;
    let alias_col = cols.find(&["Aliases", "aliases"]);
    let gender_col = cols.find(&["Gender", "gender"]);

    let mut entries = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::malformed(path, i + 2, e.to_string()))?;
        let get = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let name = get(name_col);
        if name.is_empty() {
            return Err(Error::malformed(path, i + 2, "empty character name"));
        }
        let aliases = alias_col
            .map(|c| parse_list_literal(&get(c)))
            .unwrap_or_default()
            .into_iter()
            .filter(|a| a != &name)
            .collect();
        let gender = gender_col.and_then(|c| Gender::parse(&get(c)));
        entries.push(CharacterEntry {
            character_id: CharacterId(get(id_col)),
            canonical_name: name,
            aliases,
            gender,
        });
    }
    dedupe_roster_names(novel_id, &mut entries, rejects)?;
    CharacterRoster::new(novel_id.clone(), entries)
}

fn read_quotations(
    novel_id: &NovelId,
    path: &Path,
    roster: &CharacterRoster,
    text: Option<&NovelText>,
    rejects: &mut Vec<Reject>,
) -> Result<Vec<QuotationInstance>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::malformed(path, 0, e.to_string()))?;
    let cols = Columns::new(reader.headers().map_err(|e| Error::malformed(path, 1, e.to_string()))?);
    let id_col = cols.require(path, &["qID", "quote_id", "id"])?;
    let text_col = cols.require(path, &["quoteText", "qText", "text"])?;
    let speaker_col = cols.require(path, &["speaker", "Speaker"])?;
    let type_col = cols.require(path, &["quoteType", "qType", "quote_type"])?;
    let addr_col = cols.find(&["addressees", "addressee", "addressee_ids"]);
    let span_col = cols.find(&["quoteByteSpans", "qSpan", "spans"]);
    let left_col = cols.find(&["left_context"]);
    let right_col = cols.find(&["right_context"]);

    let mut quotes: Vec<(usize, QuotationInstance)> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::malformed(path, line, e.to_string()))?;
        let get = |c: usize| record.get(c).unwrap_or("").trim().to_string();
        let quote_id = get(id_col);
        let reject = |reason: String| Reject {
            novel_id: novel_id.clone(),
            record: if quote_id.is_empty() { format!("line {line}") } else { quote_id.clone() },
            kind: RejectKind::Excluded,
            reason,
        };
        if quote_id.is_empty() {
            rejects.push(reject("missing quote id".into()));
            continue;
        }
        let quote_text = get(text_col);
        if quote_text.is_empty() {
            rejects.push(reject("empty quotation text".into()));
            continue;
        }
        let Some(quote_type) = QuoteType::parse(&get(type_col)) else {
            rejects.push(reject(format!("unknown quote type `{}`", get(type_col))));
            continue;
        };
        let speakers = parse_list_literal(&get(speaker_col));
        let speaker_id = match speakers.as_slice() {
            [] => {
                rejects.push(reject("missing speaker".into()));
                continue;
            }
            [one] => match resolve_label(roster, one) {
                Some(id) => id,
                None => {
                    rejects.push(reject(format!("unresolvable speaker `{one}`")));
                    continue;
                }
            },
            many => {
                rejects.push(reject(format!("multiple speakers: {}", many.join(", "))));
                continue;
            }
        };
        let mut addressee_ids = Vec::new();
        for label in addr_col.map(|c| parse_list_literal(&get(c))).unwrap_or_default() {
            match resolve_label(roster, &label) {
                Some(id) if !addressee_ids.contains(&id) => addressee_ids.push(id),
                Some(_) => {}
                None => rejects.push(Reject {
                    novel_id: novel_id.clone(),
                    record: quote_id.clone(),
                    kind: RejectKind::AddresseeDropped,
                    reason: format!("unresolvable addressee `{label}`"),
                }),
            }
        }
        let spans = span_col.map(|c| parse_spans(&get(c))).unwrap_or_default();
        let position = spans.first().map_or(usize::MAX, |s| s.0);
        let (mut left, mut right) = match (text, spans.first(), spans.last()) {
            (Some(t), Some(first), Some(last)) => t.contexts(first.0, last.1),
            _ => (String::new(), String::new()),
        };
        if let Some(c) = left_col {
            left = get(c);
        }
        if let Some(c) = right_col {
            right = get(c);
        }
        quotes.push((
            position,
            QuotationInstance {
                novel_id: novel_id.clone(),
                quote_id: quote_id.into(),
                text: quote_text,
                left_context: left,
                right_context: right,
                quote_type,
                speaker_id,
                addressee_ids,
            },
        ));
    }
    // stable: rows without spans keep file order
    quotes.sort_by_key(|(pos, _)| *pos);
    Ok(quotes.into_iter().map(|(_, q)| q).collect())
}

/// Resolves an annotation label by id, then by exact normalized name.
pub(crate) fn resolve_label(roster: &CharacterRoster, label: &str) -> Option<CharacterId> {
    let id = CharacterId(label.trim().to_string());
    if roster.contains(&id) {
        return Some(id);
    }
    roster.lookup_name(label).map(|e| e.character_id.clone())
}

/// Parses `['a', "b"]`, `{'a', 'b'}`, `a; b` or a bare value into items.
pub fn parse_list_literal(raw: &str) -> Vec<String> {
    let s = raw.trim();
    if s.is_empty() || s == "[]" || s == "{}" || s == "set()" || s.eq_ignore_ascii_case("nan") {
        return Vec::new();
    }
    let bracketed = (s.starts_with('[') && s.ends_with(']')) || (s.starts_with('{') && s.ends_with('}'));
    if !bracketed {
        return s
            .split(';')
            .map(|p| p.trim().to_string())
            .filter(|p| !p.is_empty())
            .collect();
    }
    let inner = &s[1..s.len() - 1];
    let mut items = Vec::new();
    let mut current = String::new();
    let mut quote: Option<char> = None;
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        match quote {
            Some(q) if c == '\\' => {
                if let Some(&next) = chars.peek() {
                    if next == q || next == '\\' {
                        current.push(next);
                        chars.next();
                        continue;
                    }
                }
                current.push(c);
            }
            Some(q) if c == q => quote = None,
            Some(_) => current.push(c),
            None if c == '\'' || c == '"' => quote = Some(c),
            None if c == ',' => {
                let item = current.trim().to_string();
                if !item.is_empty() {
                    items.push(item);
                }
                current.clear();
            }
            None => current.push(c),
        }
    }
    let item = current.trim().to_string();
    if !item.is_empty() {
        items.push(item);
    }
    items
}

/// Extracts `[start, end]` pairs from a nested list of integers.
pub fn parse_spans(raw: &str) -> Vec<(usize, usize)> {
    let numbers: Vec<usize> = raw
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect();
    numbers.chunks_exact(2).map(|p| (p[0], p[1])).collect()
}

/// Novel text addressed by character offsets.
struct NovelText {
    text: String,
    /// byte offset of each char, plus the total length
    offsets: Vec<usize>,
    /// paragraph boundaries as (start_char, end_char)
    paragraphs: Vec<(usize, usize)>,
}

impl NovelText {
    fn new(text: String) -> Self {
        let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        offsets.push(text.len());
        let chars: Vec<char> = text.chars().collect();
        let mut paragraphs = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            if chars[i] == '\n' {
                let mut j = i + 1;
                let mut blank = false;
                while j < chars.len() && chars[j].is_whitespace() {
                    if chars[j] == '\n' {
                        blank = true;
                    }
                    j += 1;
                }
                if blank {
                    paragraphs.push((start, i));
                    start = j;
                    i = j;
                    continue;
                }
            }
            i += 1;
        }
        paragraphs.push((start, chars.len()));
        NovelText {
            text,
            offsets,
            paragraphs,
        }
    }

    fn slice(&self, start: usize, end: usize) -> &str {
        let n = self.offsets.len() - 1;
        let (s, e) = (start.min(n), end.min(n));
        if s >= e {
            return "";
        }
        &self.text[self.offsets[s]..self.offsets[e]]
    }

    fn paragraph_of(&self, pos: usize) -> usize {
        self.paragraphs
            .iter()
            .position(|&(_, end)| pos < end)
            .unwrap_or(self.paragraphs.len().saturating_sub(1))
    }

    fn contexts(&self, start: usize, end: usize) -> (String, String) {
        let p = self.paragraph_of(start);
        let left_start = self.paragraphs[p.saturating_sub(1)].0;
        let q = self.paragraph_of(end.saturating_sub(1));
        let right_end = self.paragraphs[(q + 1).min(self.paragraphs.len() - 1)].1;
        let squash = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        (squash(self.slice(left_start, start)), squash(self.slice(end, right_end)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, content: &str) {
        fs::write(dir.join(name), content).unwrap();
    }

    /// One novel, two characters, three quotations plus one multi-speaker
    /// record and one with an unknown speaker.
    fn fixture() -> tempfile::TempDir {
        let root = tempfile::tempdir().unwrap();
        let novel = root.path().join("emma");
        fs::create_dir(&novel).unwrap();
        write(
            &novel,
            CHARACTER_FILE,
            "Character ID,Main Name,Aliases,Gender,Category\n\
             1,Emma Woodhouse,\"{'Emma', 'Miss Woodhouse'}\",F,major\n\
             2,Mrs Elton,\"{'Augusta'}\",F,minor\n",
        );
        let text = "Opening paragraph.\n\nEmma smiled. \"Well, we shall see.\" said Mrs Elton.\n\nEmma was almost ready. \"Indeed,\" she said.\n\nLast.";
        write(&novel, TEXT_FILE, text);
        let q1 = text.find("\"Well").unwrap();
        let q1_end = q1 + "\"Well, we shall see.\"".len();
        let q2 = text.find("\"Indeed").unwrap();
        let q2_end = q2 + "\"Indeed,\"".len();
        write(
            &novel,
            QUOTATION_FILE,
            &format!(
                "qID,quoteText,quoteByteSpans,speaker,addressees,quoteType\n\
                 Q2,\"\"\"Indeed,\"\"\",\"[[{q2}, {q2_end}]]\",Emma,['Mrs Elton'],Anaphoric\n\
                 Q1,\"\"\"Well, we shall see.\"\"\",\"[[{q1}, {q1_end}]]\",Mrs Elton,['Emma'],Explicit\n\
                 Q3,\"\"\"Hm.\"\"\",,Augusta,[],implicit\n\
                 Q4,\"\"\"Both!\"\"\",,\"['Emma', 'Mrs Elton']\",[],Implicit\n\
                 Q5,\"\"\"Who?\"\"\",,Gandalf,['Nobody'],Implicit\n"
            ),
        );
        root
    }

    #[test]
    fn fixture_counts() {
        let root = fixture();
        let report = parse_pdnc(root.path()).unwrap();
        let corpus = &report.corpus;
        assert_eq!(corpus.novel_count(), 1);
        assert_eq!(corpus.quotation_count(), 3, "{:?}", report.rejects);
        let novel = corpus.novel(&"emma".into()).unwrap();
        assert_eq!(novel.roster.len(), 2);
        let ids: Vec<_> = novel.quotations.iter().map(|q| q.quote_id.as_str()).collect();
        assert_eq!(ids, ["Q1", "Q2", "Q3"], "ordered by text position, span-less last");
        assert_eq!(report.excluded(), 2);
        assert!(report.rejects.iter().any(|r| r.reason.contains("multiple speakers")));
        assert!(report.rejects.iter().any(|r| r.reason.contains("Gandalf")));
        assert_eq!(novel.quotations[2].speaker_id.as_str(), "2", "alias resolves");
    }

    #[test]
    fn contexts_come_from_neighbouring_paragraphs() {
        let root = fixture();
        let corpus = parse_pdnc(root.path()).unwrap().corpus;
        let q1 = corpus.quotation(&QuoteKey::new("emma", "Q1")).unwrap();
        assert_eq!(q1.left_context, "Opening paragraph. Emma smiled.");
        assert_eq!(q1.right_context, "said Mrs Elton. Emma was almost ready. \"Indeed,\" she said.");
        assert_eq!(q1.addressee_ids, vec![CharacterId::from("1")]);
    }

    #[test]
    fn empty_directory_is_an_empty_corpus() {
        let root = tempfile::tempdir().unwrap();
        let report = parse_pdnc(root.path()).unwrap();
        assert!(report.corpus.is_empty());
        assert!(report.rejects.is_empty());
    }

    #[test]
    fn missing_roster_names_the_novel() {
        let root = tempfile::tempdir().unwrap();
        fs::create_dir(root.path().join("persuasion")).unwrap();
        let err = parse_pdnc(root.path()).unwrap_err();
        assert!(err.to_string().contains("persuasion"), "{err}");
    }

    #[test]
    fn list_literals() {
        assert_eq!(parse_list_literal("{'Emma', 'Miss Woodhouse'}"), ["Emma", "Miss Woodhouse"]);
        assert_eq!(parse_list_literal("[\"O'Brien\", 'x']"), ["O'Brien", "x"]);
        assert_eq!(parse_list_literal("['It\\'s']"), ["It's"]);
        assert_eq!(parse_list_literal("a; b"), ["a", "b"]);
        assert!(parse_list_literal("[]").is_empty());
        assert!(parse_list_literal("nan").is_empty());
        assert_eq!(parse_list_literal("Mr. Darcy"), ["Mr. Darcy"]);
        assert_eq!(parse_spans("[[10, 20], [25, 30]]"), [(10, 20), (25, 30)]);
    }

    use crate::corpus::QuoteKey;
}
