//! Tokenization, vocabulary handling, two-segment packing, and long-stream
//! windowing for the recurrence pipeline.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use thiserror::Error;

pub const MASK_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const SEP_ID: usize = 2;
pub const UNK_ID: usize = 3;
pub const PAD_ID: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<mask>", "<cls>", "<sep>", "<unk>", "<pad>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus text is empty")]
    EmptyText,
    #[error("sequence length {0} too small for [CLS, A, SEP, B, SEP] packing (minimum 5)")]
    SeqLenTooSmall(usize),
    #[error("both segments of a pair must be nonempty")]
    EmptySegment,
    #[error("windowing requires stride == seq_len (got stride {stride}, seq_len {seq_len})")]
    InvalidStride { stride: usize, seq_len: usize },
    #[error("vocabulary file malformed: {0}")]
    VocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Char,
    Word,
}

/// Token <-> id maps with reserved ids fixed at the front.
#[derive(Clone, Debug)]
pub struct Vocab {
    kind: TokenizerKind,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Frequency-ranked vocabulary over the text, truncated to `max_size`
    /// entries including the reserved ids. Ties break lexicographically so
    /// construction is deterministic.
    pub fn build(text: &str, max_size: usize, kind: TokenizerKind) -> Result<Self, CorpusError> {
        if text.is_empty() {
            return Err(CorpusError::EmptyText);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        match kind {
            TokenizerKind::Char => {
                for ch in text.chars() {
                    *counts.entry(ch.to_string()).or_insert(0) += 1;
                }
            }
            TokenizerKind::Word => {
                for w in text.split_whitespace() {
                    *counts.entry(w.to_string()).or_insert(0) += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_size.saturating_sub(RESERVED_TOKENS.len());
        ranked.truncate(budget);
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(kind, tokens))
    }

    fn from_tokens(kind: TokenizerKind, tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { kind, tokens, index }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED_TOKENS.len()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        match self.kind {
            TokenizerKind::Char => text
                .chars()
                .map(|ch| self.index.get(ch.to_string().as_str()).copied().unwrap_or(UNK_ID))
                .collect(),
            TokenizerKind::Word => text
                .split_whitespace()
                .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
                .collect(),
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> =
            ids.iter().map(|&id| self.token_of(id).unwrap_or(RESERVED_TOKENS[UNK_ID])).collect();
        match self.kind {
            TokenizerKind::Char => parts.concat(),
            TokenizerKind::Word => parts.join(" "),
        }
    }

    /// One token per line, line number = id, reserved tokens first.
    /// Whitespace and backslashes are escaped so every token fits a line.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut out = std::fs::File::create(path)?;
        for token in &self.tokens {
            writeln!(out, "{}", escape_token(token))?;
        }
        Ok(())
    }

    pub fn load(path: &Path, kind: TokenizerKind) -> Result<Self, CorpusError> {
        let file = std::fs::File::open(path)?;
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            tokens.push(unescape_token(&line).map_err(|e| {
                CorpusError::VocabFile(format!("line {}: {e}", lineno + 1))
            })?);
        }
        for (i, reserved) in RESERVED_TOKENS.iter().enumerate() {
            if tokens.get(i).map(|t| t.as_str()) != Some(*reserved) {
                return Err(CorpusError::VocabFile(format!(
                    "reserved token {reserved} missing at id {i}"
                )));
            }
        }
        Ok(Self::from_tokens(kind, tokens))
    }
}

fn escape_token(token: &str) -> String {
    let mut out = String::with_capacity(token.len());
    for ch in token.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            ' ' => out.push_str("\\s"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_token(line: &str) -> Result<String, String> {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            other => return Err(format!("bad escape \\{other:?}")),
        }
    }
    Ok(out)
}

/// Two segments packed as [CLS, A, SEP, B, SEP].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedPair {
    pub token_ids: Vec<usize>,
    pub seg_ids: Vec<u32>,
    /// Memory-context identity: segments from different documents get a
    /// fresh id so no previous-segment memory is reused across them.
    pub doc_id: u64,
}

/// Pack two token sequences, truncating the longer segment first until the
/// pair fits. CLS and the first SEP take segment A's id.
pub fn pack_two_segments(
    a: &[usize],
    b: &[usize],
    seq_len: usize,
    doc_id: u64,
) -> Result<PackedPair, CorpusError> {
    if seq_len < 5 {
        return Err(CorpusError::SeqLenTooSmall(seq_len));
    }
    if a.is_empty() || b.is_empty() {
        return Err(CorpusError::EmptySegment);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    while a.len() + b.len() + 3 > seq_len {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let mut token_ids = Vec::with_capacity(a.len() + b.len() + 3);
    let mut seg_ids = Vec::with_capacity(a.len() + b.len() + 3);
    token_ids.push(CLS_ID);
    seg_ids.push(0);
    token_ids.extend_from_slice(&a);
    seg_ids.extend(std::iter::repeat_n(0, a.len()));
    token_ids.push(SEP_ID);
    seg_ids.push(0);
    token_ids.extend_from_slice(&b);
    seg_ids.extend(std::iter::repeat_n(1, b.len()));
    token_ids.push(SEP_ID);
    seg_ids.push(1);
    Ok(PackedPair { token_ids, seg_ids, doc_id })
}

/// One windowed segment of a long stream. Positions are global indices into
/// the stream so relative distances stay consistent across windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<usize>,
    /// Global position of the first token.
    pub start_pos: usize,
    /// Number of non-padding tokens.
    pub n_real: usize,
    pub padded: bool,
}

impl Window {
    pub fn positions(&self) -> Vec<usize> {
        (self.start_pos..self.start_pos + self.tokens.len()).collect()
    }
}

/// Consecutive non-overlapping windows; the final partial window is padded
/// with PAD and flagged.
pub fn stream_windows(
    stream: &[usize],
    seq_len: usize,
    stride: usize,
) -> Result<Vec<Window>, CorpusError> {
    if stride != seq_len {
        return Err(CorpusError::InvalidStride { stride, seq_len });
    }
    if seq_len == 0 {
        return Err(CorpusError::SeqLenTooSmall(0));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < stream.len() {
        let end = (start + seq_len).min(stream.len());
        let mut tokens = stream[start..end].to_vec();
        let n_real = tokens.len();
        let padded = n_real < seq_len;
        tokens.resize(seq_len, PAD_ID);
        out.push(Window { tokens, start_pos: start, n_real, padded });
        start += seq_len;
    }
    if out.is_empty() {
        out.push(Window { tokens: vec![PAD_ID; seq_len], start_pos: 0, n_real: 0, padded: true });
    }
    Ok(out)
}

/// Number of full (unpadded) windows in a stream of the given length.
pub fn full_window_count(stream_len: usize, seq_len: usize) -> usize {
    stream_len / seq_len
}

/// The k-th full window without materializing the whole schedule.
pub fn nth_full_window(stream: &[usize], seq_len: usize, k: usize) -> Window {
    let start = k * seq_len;
    Window {
        tokens: stream[start..start + seq_len].to_vec(),
        start_pos: start,
        n_real: seq_len,
        padded: false,
    }
}
