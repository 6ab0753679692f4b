//! Deterministic Unicode word + punctuation tokenizer with a corpus-built vocab.
//!
//! Pieces are maximal runs of alphanumeric characters, single punctuation or
//! symbol characters, and the newline character. Other whitespace only
//! separates pieces. Newlines are kept as their own token because paragraph
//! joins are charged to token budgets downstream.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const UNK_TOKEN: &str = "<unk>";
pub const DOC_TOKEN: &str = "<|doc|>";
pub const NEWLINE_TOKEN: &str = "\n";

pub const UNK_ID: u32 = 0;
pub const DOC_ID: u32 = 1;
pub const NEWLINE_ID: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    #[default]
    UnicodeWordPunct,
}

/// Split text into pieces, borrowing from the input.
pub fn split_pieces(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_alphanumeric() || c == '_' {
            if word_start.is_none() {
                word_start = Some(i);
            }
            continue;
        }
        if let Some(s) = word_start.take() {
            out.push(&text[s..i]);
        }
        if c == '\n' {
            out.push(&text[i..i + 1]);
        } else if !c.is_whitespace() {
            out.push(&text[i..i + c.len_utf8()]);
        }
    }
    if let Some(s) = word_start {
        out.push(&text[s..]);
    }
    out
}

/// Number of tokens in `text`. Independent of the vocabulary.
pub fn count_tokens(text: &str) -> usize {
    split_pieces(text).len()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    kind: TokenizerKind,
    lowercase: bool,
    /// Token strings in id order.
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for Tokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.lowercase == other.lowercase && self.tokens == other.tokens
    }
}

impl Tokenizer {
    fn from_tokens(lowercase: bool, tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            kind: TokenizerKind::UnicodeWordPunct,
            lowercase,
            tokens,
            index,
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> u32 {
        UNK_ID
    }

    pub fn doc_id(&self) -> u32 {
        DOC_ID
    }

    pub fn newline_id(&self) -> u32 {
        NEWLINE_ID
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        if self.lowercase {
            self.index.get(&piece.to_lowercase()).copied()
        } else {
            self.index.get(piece).copied()
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_pieces(text)
            .into_iter()
            .map(|p| self.id_of(p).unwrap_or(UNK_ID))
            .collect()
    }

    pub fn count(&self, text: &str) -> usize {
        count_tokens(text)
    }

    /// Join token strings with single spaces; newlines are not padded.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut prev_newline = true;
        for &id in ids {
            let tok = self.token(id).unwrap_or(UNK_TOKEN);
            if tok == NEWLINE_TOKEN {
                out.push('\n');
                prev_newline = true;
                continue;
            }
            if !prev_newline {
                out.push(' ');
            }
            out.push_str(tok);
            prev_newline = false;
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        let t: Tokenizer = serde_json::from_str(s)?;
        Ok(Self::from_tokens(t.lowercase, t.tokens))
    }
}

/// Accumulates piece counts over a corpus and freezes them into a [`Tokenizer`].
#[derive(Debug, Default)]
pub struct TokenizerBuilder {
    lowercase: bool,
    counts: HashMap<String, u64>,
}

impl TokenizerBuilder {
    pub fn new(lowercase: bool) -> Self {
        Self {
            lowercase,
            counts: HashMap::new(),
        }
    }

    pub fn feed(&mut self, text: &str) {
        for p in split_pieces(text) {
            if p == NEWLINE_TOKEN {
                continue;
            }
            let key = if self.lowercase { p.to_lowercase() } else { p.to_string() };
            *self.counts.entry(key).or_insert(0) += 1;
        }
    }

    /// Specials first, then pieces by descending count (ties by string).
    /// `max_vocab` caps the total size including specials.
    pub fn build(self, max_vocab: Option<usize>, min_count: u64) -> Tokenizer {
        let mut entries: Vec<(String, u64)> = self
            .counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && t != UNK_TOKEN && t != DOC_TOKEN)
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![
            UNK_TOKEN.to_string(),
            DOC_TOKEN.to_string(),
            NEWLINE_TOKEN.to_string(),
        ];
        let room = max_vocab.map_or(usize::MAX, |m| m.saturating_sub(tokens.len()));
        tokens.extend(entries.into_iter().take(room).map(|(t, _)| t));
        Tokenizer::from_tokens(self.lowercase, tokens)
    }
}
