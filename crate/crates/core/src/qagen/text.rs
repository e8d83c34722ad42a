use serde::{Deserialize, Serialize};

use super::QagenError;

pub const MIN_CHUNK_CHARS: usize = 200;
pub const DEFAULT_CHUNK_CHARS: usize = 6000;

/// Lowercases and collapses every whitespace run to one space, trimming the ends.
pub fn preprocess_corpus(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub source_doc: String,
    pub text: String,
    /// Character (not byte) offsets into the source, end exclusive.
    pub char_span: (usize, usize),
}

impl Chunk {
    pub fn char_len(&self) -> usize {
        self.char_span.1 - self.char_span.0
    }
}

/// Splits `text` into ordered chunks of at most `chunk_chars` characters.
/// A chunk ends just after the last whitespace inside the final fifth of its
/// window; with no whitespace there it is cut hard at the limit.
pub fn chunk_corpus(source_doc: &str, text: &str, chunk_chars: usize) -> Result<Vec<Chunk>, QagenError> {
    if chunk_chars < MIN_CHUNK_CHARS {
        return Err(QagenError::BadConfig(format!("chunk_chars must be at least {MIN_CHUNK_CHARS}, got {chunk_chars}")));
    }
    let chars: Vec<char> = text.chars().collect();
    let tail = chunk_chars / 5;
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let limit = start + chunk_chars;
        let end = if limit >= chars.len() {
            chars.len()
        } else {
            (limit - tail..limit).rev().find(|&i| chars[i].is_whitespace()).map(|i| i + 1).unwrap_or(limit)
        };
        chunks.push(Chunk {
            id: format!("{source_doc}#{}", chunks.len()),
            source_doc: source_doc.to_string(),
            text: chars[start..end].iter().collect(),
            char_span: (start, end),
        });
        start = end;
    }
    Ok(chunks)
}
