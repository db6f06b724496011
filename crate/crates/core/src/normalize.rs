//! Name normalization shared by roster validation, alias resolution and
//! lenient matching.

/// Case-fold, trim, collapse internal whitespace and strip trailing
/// punctuation.
pub fn normalize_name(name: &str) -> String {
    let folded = name.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c) || c.is_whitespace())
        .to_string()
}

/// Case-fold and collapse whitespace only. Used for free text where
/// trailing punctuation belongs to the sentence, not a name.
pub fn normalize_text(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2014}' | '\u{2013}' | '\u{2026}'
    )
}

/// True when `needle` occurs in `haystack` with no alphanumeric character
/// directly on either side. Both arguments are expected to be normalized.
pub fn contains_phrase(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let before_ok = haystack[..start]
            .chars()
            .next_back()
            .map_or(true, |c| !c.is_alphanumeric());
        let after_ok = haystack[end..]
            .chars()
            .next()
            .map_or(true, |c| !c.is_alphanumeric());
        if before_ok && after_ok {
            return true;
        }
        // advance by one char to allow overlapping matches
        from = start + haystack[start..].chars().next().map_or(1, char::len_utf8);
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_name("  Mrs   Elton "), "mrs elton");
        assert_eq!(normalize_name("Mr. Beaver."), "mr. beaver");
        assert_eq!(normalize_name("Emma!?"), "emma");
        assert_eq!(normalize_name("Jo\u{2019}"), "jo");
        assert_eq!(normalize_name(""), "");
    }

    #[test]
    fn phrase_respects_word_boundaries() {
        assert!(contains_phrase("the speaker is mrs elton.", "mrs elton"));
        assert!(!contains_phrase("anne said so", "ann"));
        assert!(contains_phrase("ann, anne", "anne"));
        assert!(contains_phrase("mr. beaver", "beaver"));
        assert!(!contains_phrase("beavers", "beaver"));
        assert!(!contains_phrase("anything", ""));
    }
}
