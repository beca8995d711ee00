//! Canonical text forms shared by every stage.
//!
//! All comparisons downstream of ingestion (state values, sentence error
//! rate, fuzzy matching) operate on canonical strings: lowercase, single
//! spaces, no leading or trailing whitespace.

/// Characters that ASR output typically drops.
pub const SPECIAL_CHARS: [char; 6] = ['\'', ',', '.', ':', '?', '-'];

pub fn is_special(c: char) -> bool {
    SPECIAL_CHARS.contains(&c)
}

/// Lowercase, collapse whitespace runs to one space, trim.
pub fn canonicalize(text: &str) -> String {
    let lower = text.to_lowercase();
    let mut out = String::with_capacity(lower.len());
    for word in lower.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// Removes the special character set. Hyphens become spaces so that
/// "4-star" turns into "4 star"; the result is re-canonicalized.
pub fn strip_special(text: &str) -> String {
    let replaced: String = text
        .chars()
        .filter_map(|c| match c {
            '-' => Some(' '),
            c if is_special(c) => None,
            c => Some(c),
        })
        .collect();
    canonicalize(&replaced)
}

/// Byte spans of whitespace-separated tokens.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Splits a token into leading punctuation, core, and trailing punctuation.
/// Only sentence punctuation is peeled; apostrophes and colons inside the
/// core are kept.
pub fn split_punct(token: &str) -> (&str, &str, &str) {
    const EDGE: &[char] = &[',', '.', '?', '!', ';', '"', '(', ')'];
    let trimmed_start = token.trim_start_matches(EDGE);
    let lead = &token[..token.len() - trimmed_start.len()];
    let core = trimmed_start.trim_end_matches(EDGE);
    let trail = &trimmed_start[core.len()..];
    (lead, core, trail)
}

/// Finds `needle` in `haystack` at word boundaries (neighbours are not
/// alphanumeric). Returns byte offsets of non-overlapping matches.
pub fn find_word_bounded(haystack: &str, needle: &str) -> Vec<usize> {
    if needle.is_empty() {
        return Vec::new();
    }
    let mut hits = Vec::new();
    let mut from = 0;
    while let Some(rel) = haystack[from..].find(needle) {
        let at = from + rel;
        let end = at + needle.len();
        let before_ok = haystack[..at]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let after_ok = haystack[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if before_ok && after_ok {
            hits.push(at);
            from = end;
        } else {
            // advance by one char
            from = at + haystack[at..].chars().next().map_or(1, char::len_utf8);
        }
    }
    hits
}
