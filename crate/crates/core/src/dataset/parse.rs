use std::collections::HashSet;

use super::{CategoryName, Rationale};

/// Strips a leading list marker (`-`, `*`, `•`, `3.` or `3)`), returning the
/// item text, or `None` if the line is not a list item.
fn strip_marker(line: &str) -> Option<&str> {
    for bullet in ['-', '*', '•'] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return Some(rest);
        }
    }
    let digits = line.len() - line.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(item) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(item);
        }
    }
    None
}

/// Extracts rationales from a language-model completion.
///
/// Lines starting with a bullet or a number marker are items. The first
/// non-empty line is also an item even without a marker, because the query
/// ends with a `-` primer that the completion continues. Other unmarked lines
/// are treated as commentary and dropped. Items are normalized and
/// deduplicated case-insensitively, keeping the first occurrence.
pub fn parse_rationale_response(text: &str, category: &CategoryName) -> Vec<Rationale> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let mut first = true;
    for raw in text.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let item = match strip_marker(line) {
            Some(item) => item,
            None if first => line,
            None => {
                first = false;
                continue;
            }
        };
        first = false;
        let item = item.trim().trim_end_matches(['.', ',', ';']);
        let Ok(rationale) = Rationale::new(item) else {
            continue;
        };
        if seen.insert(rationale.clone()) {
            out.push(rationale);
        }
    }
    if out.is_empty() {
        log::warn!("no rationales parsed for category {category:?}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Vec<String> {
        parse_rationale_response(text, &CategoryName::new("dog").unwrap())
            .into_iter()
            .map(String::from)
            .collect()
    }

    #[test]
    fn bullets_are_deduplicated() {
        assert_eq!(parse("- four legs\n- a tail\n- four legs"), ["four legs", "a tail"]);
        assert_eq!(parse("- Four Legs\n- four   legs"), ["four legs"]);
    }

    #[test]
    fn numbered_lists() {
        assert_eq!(parse("1. fur\n2. whiskers"), ["fur", "whiskers"]);
        assert_eq!(parse("1) fur\n10) whiskers."), ["fur", "whiskers"]);
    }

    #[test]
    fn primer_continuation_and_commentary() {
        assert_eq!(
            parse(" pointed ears\n- a wet nose\nThese features help identify dogs."),
            ["pointed ears", "a wet nose"]
        );
    }

    #[test]
    fn empty_input() {
        assert!(parse("").is_empty());
        assert!(parse("\n  \n-\n").is_empty());
    }
}
