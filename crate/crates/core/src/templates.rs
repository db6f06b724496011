//! Prompt templates: verbalizing a quotation into a source sequence and a
//! candidate speaker into a target sequence.
//!
//! Source layout (segments joined by single spaces, empty segments skipped):
//!
//! ```text
//! <left context> <quotation> <source infix> [MASK] [<aux infix> MASK] <right context>
//! ```
//!
//! Sequence start/end markers and the mask string belong to the backend: the
//! renderer asks the [`SourceTokenizer`] for its mask token and how many
//! marker tokens it will add, and never writes marker strings itself.
//!
//! Targets are `<target prefix> <name>`, optionally followed by an auxiliary
//! clause such as `Addressee: Emma, Harriet` when training with an auxiliary
//! task. Scored targets never carry the auxiliary clause.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CharacterEntry, QuotationInstance};
use crate::error::{Error, Result};

/// Tokenization facts the renderer needs from a backend.
pub trait SourceTokenizer {
    /// Byte ranges of the tokens of `text`, in order.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    /// The backend's mask / infill placeholder.
    fn mask_token(&self) -> &str;

    /// Number of sequence marker tokens added around an encoded source.
    fn marker_count(&self) -> usize;

    fn count_tokens(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxTask {
    #[default]
    None,
    Addressee,
    Gender,
    Fiction,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub name: String,
    #[serde(default)]
    pub source_infix: String,
    #[serde(default)]
    pub use_mask: bool,
    /// Empty for the "no target template" variant.
    #[serde(default)]
    pub target_prefix: String,
    #[serde(default)]
    pub aux_task: AuxTask,
    #[serde(default)]
    pub aux_source_infix: String,
    #[serde(default)]
    pub aux_target_prefix: String,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.aux_task != AuxTask::None
            && (self.aux_source_infix.trim().is_empty() || self.aux_target_prefix.trim().is_empty())
        {
            return Err(Error::Template(format!(
                "template `{}` has an auxiliary task but no auxiliary prompt text",
                self.name
            )));
        }
        Ok(())
    }

    pub fn mask_count(&self) -> usize {
        usize::from(self.use_mask) + usize::from(self.aux_task != AuxTask::None)
    }

    /// Loads a template from a JSON or TOML-like JSON configuration file.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let template: PromptTemplate = serde_json::from_str(&raw)?;
        template.validate()?;
        Ok(template)
    }
}

/// Byte ranges of each segment inside [`RenderedSource::text`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundaries {
    pub left_context: Range<usize>,
    pub quotation: Range<usize>,
    pub infix: Option<Range<usize>>,
    pub masks: Vec<Range<usize>>,
    pub aux_infix: Option<Range<usize>>,
    pub right_context: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedSource {
    pub text: String,
    pub boundaries: Boundaries,
    /// Token count including sequence markers.
    pub token_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPair {
    pub source: RenderedSource,
    pub target_text: String,
}

struct Builder {
    text: String,
}

impl Builder {
    fn push(&mut self, segment: &str) -> Range<usize> {
        if segment.is_empty() {
            return self.text.len()..self.text.len();
        }
        if !self.text.is_empty() {
            self.text.push(' ');
        }
        let start = self.text.len();
        self.text.push_str(segment);
        start..self.text.len()
    }
}

/// Renders the model input for a quotation, truncating contexts to fit
/// `budget` tokens (markers included).
///
/// Context tokens are removed from the far ends: the beginning of the left
/// context and the end of the right context. The remaining budget is split
/// equally, the odd token going left; a side that needs less than its share
/// passes the surplus to the other side.
pub fn render_source(
    instance: &QuotationInstance,
    template: &PromptTemplate,
    tokenizer: &dyn SourceTokenizer,
    budget: usize,
) -> Result<RenderedSource> {
    template.validate()?;
    let mask = tokenizer.mask_token();
    let has_aux = template.aux_task != AuxTask::None;
    let mut required = tokenizer.marker_count()
        + tokenizer.count_tokens(&instance.text)
        + tokenizer.count_tokens(&template.source_infix);
    if template.use_mask {
        required += tokenizer.count_tokens(mask);
    }
    if has_aux {
        required += tokenizer.count_tokens(&template.aux_source_infix) + tokenizer.count_tokens(mask);
    }
    if required > budget {
        return Err(Error::BudgetExceeded { budget, required });
    }

    let left_spans = tokenizer.token_spans(&instance.left_context);
    let right_spans = tokenizer.token_spans(&instance.right_context);
    let (keep_left, keep_right) = split_budget(budget - required, left_spans.len(), right_spans.len());

    let left = if keep_left == 0 {
        ""
    } else {
        &instance.left_context[left_spans[left_spans.len() - keep_left].start..]
    };
    let right = if keep_right == 0 {
        ""
    } else {
        &instance.right_context[..right_spans[keep_right - 1].end]
    };

    let mut b = Builder { text: String::new() };
    let left_context = b.push(left.trim());
    let quotation = b.push(&instance.text);
    let infix = (!template.source_infix.is_empty()).then(|| b.push(&template.source_infix));
    let mut masks = Vec::new();
    if template.use_mask {
        masks.push(b.push(mask));
    }
    let aux_infix = if has_aux {
        let r = b.push(&template.aux_source_infix);
        masks.push(b.push(mask));
        Some(r)
    } else {
        None
    };
    let right_context = b.push(right.trim());
    Ok(RenderedSource {
        text: b.text,
        boundaries: Boundaries {
            left_context,
            quotation,
            infix,
            masks,
            aux_infix,
            right_context,
        },
        token_count: required + keep_left + keep_right,
    })
}

fn split_budget(remaining: usize, left_len: usize, right_len: usize) -> (usize, usize) {
    let left_share = remaining.div_ceil(2);
    let right_share = remaining / 2;
    let left = left_len.min(left_share + right_share.saturating_sub(right_len));
    let right = right_len.min(right_share + left_share.saturating_sub(left_len));
    (left, right)
}

/// Auxiliary information verbalized into a training target.
#[derive(Clone, Copy, Debug)]
pub enum AuxInput<'a> {
    /// Gold addressees, already in roster order.
    Addressees(&'a [&'a CharacterEntry]),
    /// Title of the novel the quotation comes from.
    Fiction(&'a str),
}

pub const EMPTY_ADDRESSEES: &str = "none";
pub const GENDER_PREFIX: &str = "Gender:";
pub const FICTION_PREFIX: &str = "Fiction:";

/// `<target_prefix> <canonical_name>`: the target scored at inference.
pub fn render_speaker_target(candidate: &CharacterEntry, template: &PromptTemplate) -> String {
    let mut b = Builder { text: String::new() };
    b.push(&template.target_prefix);
    b.push(&candidate.canonical_name);
    b.text
}

/// Full training target, including the auxiliary clause when the template
/// has an auxiliary task.
pub fn render_target(
    candidate: &CharacterEntry,
    template: &PromptTemplate,
    aux: Option<AuxInput<'_>>,
) -> Result<String> {
    template.validate()?;
    let mut b = Builder {
        text: render_speaker_target(candidate, template),
    };
    match (template.aux_task, aux) {
        (AuxTask::None, _) => {}
        (AuxTask::Addressee, Some(AuxInput::Addressees(list))) => {
            b.push(&template.aux_target_prefix);
            if list.is_empty() {
                b.push(EMPTY_ADDRESSEES);
            } else {
                let names: Vec<&str> = list.iter().map(|e| e.canonical_name.as_str()).collect();
                b.push(&names.join(", "));
            }
        }
        (AuxTask::Gender, _) => {
            b.push(&template.aux_target_prefix);
            b.push(candidate.gender.unwrap_or(crate::corpus::Gender::Unknown).as_str());
        }
        (AuxTask::Fiction, Some(AuxInput::Fiction(title))) => {
            b.push(&template.aux_target_prefix);
            b.push(title);
        }
        (task, _) => {
            return Err(Error::Template(format!(
                "template `{}` needs {task:?} input to render a training target",
                template.name
            )))
        }
    }
    Ok(b.text)
}

pub const DEFAULT_TEMPLATE: &str = "replied-by.speaker+addressee";

fn base(name: &str, infix: &str, use_mask: bool, prefix: &str) -> PromptTemplate {
    PromptTemplate {
        name: name.into(),
        source_infix: infix.into(),
        use_mask,
        target_prefix: prefix.into(),
        aux_task: AuxTask::None,
        aux_source_infix: String::new(),
        aux_target_prefix: String::new(),
    }
}

fn with_aux(mut t: PromptTemplate, name: &str, task: AuxTask, infix: &str, prefix: &str) -> PromptTemplate {
    t.name = name.into();
    t.aux_task = task;
    t.aux_source_infix = infix.into();
    t.aux_target_prefix = prefix.into();
    t
}

/// The six source/target template pairs plus the auxiliary-task variants of
/// the best pair. Names are stable identifiers.
pub fn template_catalog() -> Vec<PromptTemplate> {
    let best = base("replied-by.speaker", "replied by:", true, "Speaker:");
    vec![
        base("bare", "", false, ""),
        base("replied-by.none", "replied by:", true, ""),
        base("replied-by.replied-by", "replied by:", true, "replied by:"),
        best.clone(),
        base("speaker.replied-by", "Speaker:", true, "replied by:"),
        base("speaker.speaker", "Speaker:", true, "Speaker:"),
        with_aux(best.clone(), DEFAULT_TEMPLATE, AuxTask::Addressee, "is listened by", "Addressee:"),
        with_aux(best.clone(), "replied-by.speaker+gender", AuxTask::Gender, "whose gender is", GENDER_PREFIX),
        with_aux(best, "replied-by.speaker+fiction", AuxTask::Fiction, "which comes from", FICTION_PREFIX),
    ]
}

pub fn default_template() -> PromptTemplate {
    find_template(DEFAULT_TEMPLATE).expect("default template is in the catalog")
}

/// Looks up a catalog template by name; `default` names the default.
pub fn find_template(name: &str) -> Option<PromptTemplate> {
    let name = if name == "default" { DEFAULT_TEMPLATE } else { name };
    template_catalog().into_iter().find(|t| t.name == name)
}

#[cfg(test)]
pub(crate) mod test_tokenizer {
    use super::*;

    /// Whitespace tokenizer with `<mask>` and one start plus one end marker.
    pub struct Whitespace;

    impl SourceTokenizer for Whitespace {
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
            "<mask>"
        }

        fn marker_count(&self) -> usize {
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::test_tokenizer::Whitespace;
    use super::*;
    use crate::corpus::{Gender, QuoteType};
    use proptest::prelude::*;

    fn instance(left: &str, text: &str, right: &str) -> QuotationInstance {
        QuotationInstance {
            novel_id: "emma".into(),
            quote_id: "q1".into(),
            text: text.into(),
            left_context: left.into(),
            right_context: right.into(),
            quote_type: QuoteType::Explicit,
            speaker_id: "elton".into(),
            addressee_ids: vec![],
        }
    }

    fn template(name: &str) -> PromptTemplate {
        find_template(name).unwrap()
    }

    #[test]
    fn explicit_example_layout() {
        let inst = instance(
            "...",
            "\"Well, we shall see.\"",
            "said Mrs Elton. Emma was almost ready to answer.",
        );
        let src = render_source(&inst, &template("replied-by.speaker"), &Whitespace, 512).unwrap();
        assert_eq!(
            src.text,
            "... \"Well, we shall see.\" replied by: <mask> said Mrs Elton. Emma was almost ready to answer."
        );
        assert_eq!(&src.text[src.boundaries.quotation.clone()], inst.text);
        assert_eq!(src.boundaries.masks.len(), 1);
    }

    #[test]
    fn aux_masks_precede_right_context() {
        let inst = instance("L", "\"Q\"", "R");
        let src = render_source(&inst, &default_template(), &Whitespace, 64).unwrap();
        assert_eq!(src.text, "L \"Q\" replied by: <mask> is listened by <mask> R");
        assert_eq!(src.boundaries.masks.len(), 2);
    }

    #[test]
    fn empty_contexts() {
        let inst = instance("", "\"Hi.\"", "");
        let src = render_source(&inst, &template("replied-by.speaker"), &Whitespace, 64).unwrap();
        assert_eq!(src.text, "\"Hi.\" replied by: <mask>");
        // markers + quote + "replied" "by:" + mask
        assert_eq!(src.token_count, 2 + 1 + 2 + 1);
        let bare = render_source(&inst, &template("bare"), &Whitespace, 64).unwrap();
        assert_eq!(bare.text, "\"Hi.\"");
    }

    #[test]
    fn minimal_budget_drops_all_context() {
        let inst = instance("a b c", "\"q q\"", "d e f");
        let t = template("replied-by.speaker");
        let minimal = 2 + 2 + 2 + 1;
        let src = render_source(&inst, &t, &Whitespace, minimal).unwrap();
        assert_eq!(src.token_count, minimal);
        assert!(src.boundaries.left_context.is_empty());
        assert!(src.boundaries.right_context.is_empty());
        assert!(matches!(
            render_source(&inst, &t, &Whitespace, minimal - 1),
            Err(Error::BudgetExceeded { required: 7, .. })
        ));
    }

    #[test]
    fn truncation_keeps_near_ends_with_odd_token_left() {
        let inst = instance("l1 l2 l3 l4", "\"q\"", "r1 r2 r3 r4");
        let t = template("bare");
        // 3 tokens after markers + quote: 2 left, 1 right
        let src = render_source(&inst, &t, &Whitespace, 2 + 1 + 3).unwrap();
        assert_eq!(src.text, "l3 l4 \"q\" r1");
        // surplus flows to the longer side
        let inst = instance("l1", "\"q\"", "r1 r2 r3 r4");
        let src = render_source(&inst, &t, &Whitespace, 2 + 1 + 4).unwrap();
        assert_eq!(src.text, "l1 \"q\" r1 r2 r3");
    }

    #[test]
    fn aux_without_prompt_text_is_rejected() {
        let mut t = default_template();
        t.aux_target_prefix.clear();
        let inst = instance("", "\"q\"", "");
        assert!(matches!(render_source(&inst, &t, &Whitespace, 64), Err(Error::Template(_))));
    }

    #[test]
    fn speaker_targets() {
        let elton = CharacterEntry::new("e", "Mrs Elton");
        let emma = CharacterEntry::new("m", "Emma");
        let knightley = CharacterEntry::new("k", "Mr Knightley");
        let plain = template("replied-by.speaker");
        assert_eq!(render_target(&elton, &plain, None).unwrap(), "Speaker: Mrs Elton");
        let sig = default_template();
        assert_eq!(
            render_target(&emma, &sig, Some(AuxInput::Addressees(&[]))).unwrap(),
            "Speaker: Emma Addressee: none"
        );
        assert_eq!(
            render_target(&emma, &sig, Some(AuxInput::Addressees(&[&elton, &knightley]))).unwrap(),
            "Speaker: Emma Addressee: Mrs Elton, Mr Knightley"
        );
        assert!(render_target(&emma, &sig, None).is_err(), "aux needs addressees when training");
        assert_eq!(render_speaker_target(&emma, &sig), "Speaker: Emma");
        assert_eq!(render_target(&emma, &template("bare"), None).unwrap(), "Emma");
    }

    #[test]
    fn gender_and_fiction_targets() {
        let emma = CharacterEntry::new("m", "Emma").with_gender(Gender::Female);
        let g = template("replied-by.speaker+gender");
        assert_eq!(render_target(&emma, &g, None).unwrap(), "Speaker: Emma Gender: female");
        let f = template("replied-by.speaker+fiction");
        assert_eq!(
            render_target(&emma, &f, Some(AuxInput::Fiction("Emma"))).unwrap(),
            "Speaker: Emma Fiction: Emma"
        );
    }

    #[test]
    fn catalog_contents() {
        let catalog = template_catalog();
        assert_eq!(catalog.len(), 6 + 3);
        let default = default_template();
        assert_eq!(default.source_infix, "replied by:");
        assert_eq!(default.target_prefix, "Speaker:");
        assert_eq!(default.aux_task, AuxTask::Addressee);
        let bare = template("bare");
        assert!(bare.source_infix.is_empty() && bare.target_prefix.is_empty() && !bare.use_mask);
        let mut names: Vec<_> = catalog.iter().map(|t| t.name.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), catalog.len());
        for t in &catalog {
            t.validate().unwrap();
        }
        assert_eq!(find_template("default").unwrap(), default);
    }

    #[test]
    fn template_loads_from_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(
            &path,
            r#"{"name": "said", "source_infix": "said by:", "use_mask": true, "target_prefix": "Speaker:"}"#,
        )
        .unwrap();
        let t = PromptTemplate::from_json_file(&path).unwrap();
        assert_eq!(t.aux_task, AuxTask::None);
        assert_eq!(t.source_infix, "said by:");
    }

    fn word() -> impl Strategy<Value = String> {
        "[a-zA-Z,.!?]{1,8}"
    }

    proptest! {
        #[test]
        fn quotation_survives_any_budget(
            left in proptest::collection::vec(word(), 0..30),
            quote in proptest::collection::vec(word(), 1..8),
            right in proptest::collection::vec(word(), 0..30),
            extra in 0usize..70,
            which in 0usize..9,
        ) {
            let t = template_catalog().swap_remove(which);
            let inst = instance(&left.join(" "), &format!("\"{}\"", quote.join(" ")), &right.join(" "));
            let minimal = 2 + quote.len() + Whitespace.count_tokens(&t.source_infix)
                + usize::from(t.use_mask)
                + if t.aux_task != AuxTask::None { Whitespace.count_tokens(&t.aux_source_infix) + 1 } else { 0 };
            let src = render_source(&inst, &t, &Whitespace, minimal + extra).unwrap();
            prop_assert_eq!(src.text.matches(&inst.text).count(), 1);
            prop_assert_eq!(&src.text[src.boundaries.quotation.clone()], inst.text.as_str());
            prop_assert_eq!(src.text.matches("<mask>").count(), t.mask_count());
            prop_assert!(src.token_count <= minimal + extra);
            prop_assert_eq!(src.token_count, Whitespace.count_tokens(&src.text) + 2);
            let again = render_source(&inst, &t, &Whitespace, minimal + extra).unwrap();
            prop_assert_eq!(again, src);
        }

        #[test]
        fn target_starts_with_prefix(name in "[A-Z][a-z]{1,6}( [A-Z][a-z]{1,6})?", which in 0usize..9) {
            let t = template_catalog().swap_remove(which);
            let c = CharacterEntry::new("x", name.clone());
            let target = render_target(&c, &t, Some(AuxInput::Addressees(&[]))).or_else(|_| render_target(&c, &t, Some(AuxInput::Fiction("Book")))).unwrap();
            prop_assert!(target.starts_with(&t.target_prefix));
            let head = match t.aux_task {
                AuxTask::None => target.as_str(),
                _ => &target[..target.find(&t.aux_target_prefix).unwrap()],
            };
            prop_assert_eq!(head[t.target_prefix.len()..].matches(&name).count(), 1);
        }
    }
}
