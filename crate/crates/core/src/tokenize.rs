//! Token counting, budgeted splitting and side truncation.
//!
//! The default scheme is model-agnostic: every whitespace-delimited word is
//! one token per started run of four characters, so `"a b c"` is three tokens
//! and an unbroken 4000-character run is 1000. External tokenizers plug in
//! through [`Tokenizer`] by reporting token byte spans.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Segment;

/// Identifier recorded in [`crate::Config`] for the built-in scheme.
pub const DEFAULT_SCHEME: &str = "whitespace-4cpt";

const CHARS_PER_TOKEN: usize = 4;

pub trait Tokenizer: Send + Sync {
    /// Name of the counting scheme, stored with every tree and report.
    fn scheme(&self) -> &str;

    /// Byte spans of every token in `text`, ordered and non-overlapping.
    fn token_spans(&self, text: &str) -> Vec<Range<usize>>;

    fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }
}

pub type TokenizerHandle = Arc<dyn Tokenizer>;

/// Whitespace words, each split into pieces of at most four characters.
#[derive(Debug, Clone, Copy, Default)]
pub struct WordPieceTokenizer;

impl Tokenizer for WordPieceTokenizer {
    fn scheme(&self) -> &str {
        DEFAULT_SCHEME
    }

    fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        let mut piece_start: Option<usize> = None;
        let mut piece_chars = 0;
        for (at, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(start) = piece_start.take() {
                    spans.push(start..at);
                }
                piece_chars = 0;
                continue;
            }
            if piece_start.is_some() && piece_chars == CHARS_PER_TOKEN {
                spans.push(piece_start.take().unwrap()..at);
                piece_chars = 0;
            }
            if piece_start.is_none() {
                piece_start = Some(at);
            }
            piece_chars += 1;
        }
        if let Some(start) = piece_start {
            spans.push(start..text.len());
        }
        spans
    }

    fn count(&self, text: &str) -> usize {
        text.split_whitespace()
            .map(|word| word.chars().count().div_ceil(CHARS_PER_TOKEN))
            .sum()
    }
}

pub fn default_tokenizer() -> TokenizerHandle {
    Arc::new(WordPieceTokenizer)
}

pub fn count_tokens(text: &str) -> usize {
    WordPieceTokenizer.count(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Retain the earliest tokens.
    KeepLeft,
    /// Retain the latest tokens.
    KeepRight,
}

/// Cut `text` down to at most `budget` tokens. Text already within budget is
/// returned unchanged.
pub fn truncate(tokenizer: &dyn Tokenizer, text: &str, budget: usize, side: Side) -> String {
    let spans = tokenizer.token_spans(text);
    if spans.len() <= budget {
        return text.to_string();
    }
    if budget == 0 {
        return String::new();
    }
    let kept = match side {
        Side::KeepLeft => &text[..spans[budget - 1].end],
        Side::KeepRight => &text[spans[spans.len() - budget].start..],
    };
    let mut out = kept.to_string();
    // Pluggable tokenizers may not be prefix-stable; shrink until the cap holds.
    let mut cap = budget;
    while tokenizer.count(&out) > budget && cap > 0 {
        cap -= 1;
        out = truncate(tokenizer, text, cap, side);
    }
    out
}

fn preceded_by_whitespace(text: &str, at: usize) -> bool {
    text[..at]
        .chars()
        .next_back()
        .is_some_and(char::is_whitespace)
}

/// Greedy left-to-right segmentation. Each cut lands at the start of a token
/// and is snapped backward to the nearest whitespace so words stay intact,
/// unless a single word is longer than the whole segment. Trailing whitespace
/// stays with the segment it follows, so the segment texts tile the input.
pub fn split_into_segments(
    tokenizer: &dyn Tokenizer,
    text: &str,
    segment_size: usize,
) -> Result<Vec<Segment>> {
    if text.is_empty() {
        return Err(Error::InvalidInput("cannot segment empty text".into()));
    }
    if segment_size == 0 {
        return Err(Error::InvalidInput("segment_size must be at least 1".into()));
    }
    let spans = tokenizer.token_spans(text);
    let mut cuts = vec![0usize];
    let mut first = 0usize;
    while spans.len() - first > segment_size {
        let limit = first + segment_size;
        let snapped = (first + 1..=limit)
            .rev()
            .find(|&k| preceded_by_whitespace(text, spans[k].start));
        let next = snapped.unwrap_or(limit);
        cuts.push(spans[next].start);
        first = next;
    }
    cuts.push(text.len());

    let mut segments = Vec::with_capacity(cuts.len() - 1);
    let mut char_offset = 0usize;
    for (index, window) in cuts.windows(2).enumerate() {
        let piece = &text[window[0]..window[1]];
        let chars = piece.chars().count();
        segments.push(Segment {
            index,
            text: piece.to_string(),
            token_count: tokenizer.count(piece),
            char_span: (char_offset, char_offset + chars),
        });
        char_offset += chars;
    }
    Ok(segments)
}
