//! Tokenization and normalization shared by the search index, query
//! evaluation, embeddings and the no-fabrication audit.

/// Lowercased maximal runs of ASCII alphanumerics.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_ascii_lowercase())
        .collect()
}

/// Trim and collapse internal whitespace runs to a single space.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-fold, trim, collapse whitespace. Used to deduplicate search terms.
pub fn normalize_term(text: &str) -> String {
    collapse_whitespace(&text.to_lowercase())
}

/// Normalization applied before checking that a value occurs in a model
/// response: lowercase, unicode minus to ASCII, thousands separators
/// between digits removed, whitespace collapsed.
pub fn normalize_for_audit(text: &str) -> String {
    let lowered = text.to_lowercase().replace(['\u{2212}', '\u{2013}'], "-");
    let chars: Vec<char> = lowered.chars().collect();
    let mut out = String::with_capacity(lowered.len());
    for (i, &c) in chars.iter().enumerate() {
        if c == ',' || c == '\u{202f}' || c == '\u{2009}' {
            let prev = i.checked_sub(1).map(|j| chars[j]);
            let next = chars.get(i + 1..i + 4);
            let grouped = next.is_some_and(|n| n.iter().all(char::is_ascii_digit))
                && chars.get(i + 4).is_none_or(|c| !c.is_ascii_digit());
            if prev.is_some_and(|p| p.is_ascii_digit()) && grouped {
                continue;
            }
        }
        out.push(c);
    }
    collapse_whitespace(&out)
}

/// Byte offset of the largest char boundary not exceeding `max_chars` chars.
pub fn char_prefix(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((i, _)) => &text[..i],
        None => text,
    }
}
