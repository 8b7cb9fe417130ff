/// Lowercases, replaces every non-alphanumeric character with a space and
/// splits on whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Splits on sentence-final punctuation and newlines, then normalizes each
/// sentence. Always yields at least one (possibly empty) sentence.
pub fn split_sentences(text: &str) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = text
        .split(['.', '!', '?', '\n'])
        .map(normalize_tokens)
        .filter(|s| !s.is_empty())
        .collect();
    if out.is_empty() {
        out.push(Vec::new());
    }
    out
}
