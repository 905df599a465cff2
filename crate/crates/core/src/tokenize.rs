//! Shared tokenizer: lowercase maximal alphanumeric runs.
//!
//! Chunking, BM25 indexing, the hash embedder and the report fact checker all
//! count tokens the same way, so token counts and spans agree across modules.

use std::ops::Range;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

/// A token together with the byte range it occupies in the source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub text: String,
    pub span: Range<usize>,
}

/// Split `text` into lowercase alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text).into_iter().map(|t| t.text).collect()
}

/// Like [`tokenize`] but keeps byte offsets into `text`.
pub fn tokenize_with_spans(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if start.is_none() {
                start = Some(i);
            }
        } else if let Some(s) = start.take() {
            out.push(make_token(text, s..i));
        }
    }
    if let Some(s) = start {
        out.push(make_token(text, s..text.len()));
    }
    out
}

fn make_token(text: &str, span: Range<usize>) -> Token {
    Token {
        text: text[span.clone()].to_lowercase(),
        span,
    }
}

/// Common English function words, removed only when [`TokenizerOptions::stopwords`] is set.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "he",
    "her", "his", "if", "in", "into", "is", "it", "its", "no", "not", "of", "on", "or", "she",
    "so", "such", "that", "the", "their", "then", "there", "these", "they", "this", "to", "was",
    "were", "which", "will", "with",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Optional normalization applied on top of the base tokenizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerOptions {
    #[serde(default)]
    pub stopwords: bool,
    #[serde(default)]
    pub stem: bool,
}

impl TokenizerOptions {
    pub fn apply(&self, text: &str) -> Vec<String> {
        let tokens = tokenize(text);
        if !self.stopwords && !self.stem {
            return tokens;
        }
        let stemmer = self.stem.then(|| Stemmer::create(Algorithm::English));
        tokens
            .into_iter()
            .filter(|t| !self.stopwords || !is_stopword(t))
            .map(|t| match &stemmer {
                Some(s) => s.stem(&t).into_owned(),
                None => t,
            })
            .collect()
    }
}
