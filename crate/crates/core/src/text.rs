//! Small text utilities shared by the pipeline stages.
//!
//! All offsets in this crate are Unicode scalar-value indices into a `str`,
//! never byte offsets.

/// Maps char offsets to byte offsets for one string.
#[derive(Debug, Clone)]
pub struct CharIndex<'a> {
    text: &'a str,
    // byte offset of every char, plus text.len() as the final sentinel
    bytes: Vec<usize>,
}

impl<'a> CharIndex<'a> {
    pub fn new(text: &'a str) -> Self {
        let mut bytes: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
        bytes.push(text.len());
        Self { text, bytes }
    }

    /// Number of chars in the text.
    pub fn len(&self) -> usize {
        self.bytes.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slice by char offsets, `None` when out of range or reversed.
    pub fn slice(&self, start: usize, end: usize) -> Option<&'a str> {
        if start > end || end > self.len() {
            return None;
        }
        Some(&self.text[self.bytes[start]..self.bytes[end]])
    }

    pub fn byte_to_char(&self, byte: usize) -> usize {
        match self.bytes.binary_search(&byte) {
            Ok(i) => i,
            Err(i) => i,
        }
    }
}

/// Length of a string in chars.
pub fn char_len(s: &str) -> usize {
    s.chars().count()
}

/// Lowercase and collapse runs of whitespace into single spaces.
pub fn normalize_term(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Item-label canonical key: [`normalize_term`] plus trailing punctuation removal.
pub fn normalize_label(s: &str) -> String {
    let t = normalize_term(s);
    strip_trailing_punct(&t).trim_end().to_string()
}

pub(crate) fn is_trailing_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?')
}

/// Strip trailing `.,;:!?` characters (and whitespace between them).
pub fn strip_trailing_punct(s: &str) -> &str {
    s.trim_end_matches(|c: char| is_trailing_punct(c) || c.is_whitespace())
}

/// Uppercase the first char, leave the rest untouched.
pub fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// A lowercase word token with char offsets into the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Split at Unicode whitespace and punctuation; a token is a maximal run of
/// alphanumeric chars.
pub fn word_tokens(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut pos = 0;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if current.is_empty() {
                start = pos;
            }
            current.extend(c.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(Token {
                text: std::mem::take(&mut current),
                start,
                end: pos,
            });
        }
        pos += 1;
    }
    if !current.is_empty() {
        tokens.push(Token {
            text: current,
            start,
            end: pos,
        });
    }
    tokens
}
