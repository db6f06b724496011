//! Adapter for single-novel WP-style annotations.
//!
//! Expected layout of the input directory:
//!
//! * `name_list.txt` (required): one role per line, tab-separated; the first
//!   field is the canonical name and any further fields are aliases. Blank
//!   lines and lines starting with `#` are ignored. Roles get ids `R001`,
//!   `R002`, ... in file order.
//! * `instances.jsonl` (required): one object per line with keys `id`,
//!   `quote`, `speaker`, and optionally `left_context`, `right_context`,
//!   `quote_type`, `addressees` (list of names).
//!
//! The novel id is the directory name. Instances without a `quote_type` are
//! typed `implicit`; WP results are reported as totals only.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::pdnc::resolve_label;
use super::{
    dedupe_roster_names, CharacterEntry, CharacterId, CharacterRoster, IngestReport, NovelCorpus, NovelId,
    QuotationInstance, QuoteType, Reject, RejectKind,
};
use crate::error::{Error, Result};

pub const NAME_LIST_FILE: &str = "name_list.txt";
pub const INSTANCES_FILE: &str = "instances.jsonl";

#[derive(Deserialize)]
struct WpInstance {
    id: serde_json::Value,
    quote: String,
    #[serde(default)]
    left_context: String,
    #[serde(default)]
    right_context: String,
    speaker: serde_json::Value,
    #[serde(default)]
    quote_type: Option<String>,
    #[serde(default)]
    addressees: Vec<String>,
}

pub fn parse_wp(dir: &Path) -> Result<IngestReport> {
    let novel_id = NovelId(
        dir.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "wp".into()),
    );
    let names_path = dir.join(NAME_LIST_FILE);
    if !names_path.is_file() {
        return Err(Error::MissingNameList(names_path));
    }
    let mut rejects = Vec::new();
    let names = fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
    let mut entries: Vec<CharacterEntry> = names
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, line)| {
            let mut fields = line.split('\t').map(str::trim).filter(|f| !f.is_empty());
            let canonical = fields.next().unwrap_or_default().to_string();
            let aliases = fields.filter(|a| *a != canonical).map(String::from).collect();
            CharacterEntry {
                character_id: CharacterId(format!("R{:03}", i + 1)),
                canonical_name: canonical,
                aliases,
                gender: None,
            }
        })
        .collect();
    dedupe_roster_names(&novel_id, &mut entries, &mut rejects)?;
    let roster = CharacterRoster::new(novel_id.clone(), entries)?;

    let inst_path = dir.join(INSTANCES_FILE);
    let raw = fs::read_to_string(&inst_path).map_err(|e| Error::io(&inst_path, e))?;
    let mut quotes = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: WpInstance =
            serde_json::from_str(line).map_err(|e| Error::malformed(&inst_path, i + 1, e.to_string()))?;
        let quote_id = match &inst.id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let reject = |reason: String| Reject {
            novel_id: novel_id.clone(),
            record: quote_id.clone(),
            kind: RejectKind::Excluded,
            reason,
        };
        let speaker = match &inst.speaker {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Array(items) if items.len() == 1 => {
                items[0].as_str().unwrap_or_default().to_string()
            }
            serde_json::Value::Array(items) if items.len() > 1 => {
                rejects.push(reject(format!("multiple speakers ({})", items.len())));
                continue;
            }
            _ => String::new(),
        };
        if inst.quote.is_empty() {
            rejects.push(reject("empty quotation text".into()));
            continue;
        }
        let Some(speaker_id) = resolve_label(&roster, &speaker) else {
            rejects.push(reject(format!("unresolvable speaker `{speaker}`")));
            continue;
        };
        let quote_type = match inst.quote_type.as_deref() {
            None | Some("") => QuoteType::Implicit,
            Some(t) => match QuoteType::parse(t) {
                Some(t) => t,
                None => {
                    rejects.push(reject(format!("unknown quote type `{t}`")));
                    continue;
                }
            },
        };
        let mut addressee_ids = Vec::new();
        for label in &inst.addressees {
            match resolve_label(&roster, label) {
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
        quotes.push(QuotationInstance {
            novel_id: novel_id.clone(),
            quote_id: quote_id.into(),
            text: inst.quote,
            left_context: inst.left_context,
            right_context: inst.right_context,
            quote_type,
            speaker_id,
            addressee_ids,
        });
    }
    let mut corpus = NovelCorpus::new();
    corpus.insert(roster, quotes)?;
    Ok(IngestReport { corpus, rejects })
}
