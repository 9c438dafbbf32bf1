//! Shared lexical helpers.

/// True for characters stripped during normalization: ASCII punctuation and
/// the common typographic quotes and dashes.
pub fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2010}'..='\u{2027}' | '\u{00ab}' | '\u{00bb}' | '\u{00b4}' | '\u{2032}' | '\u{2033}'
        )
}

/// Lowercase, delete punctuation, split on whitespace.
pub fn simple_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !is_punct(*c))
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Number of whitespace-delimited words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
