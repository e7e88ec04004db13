//! Token measure shared by the statistics, masking and policy code.
//!
//! Two tokenizers are available. The whitespace tokenizer needs no assets: every
//! token is a maximal run of non-whitespace characters together with the
//! whitespace that precedes it, so concatenating the tokens always gives back
//! the input. The BPE tokenizer loads a `vocab.json` / `merges.txt` pair.
//!
//! Special tokens (the mask sentinel by default) are matched before any other
//! splitting and are never merged with neighbouring text.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::sync::{Arc, RwLock};

use thiserror::Error;

/// Default mask sentinel.
pub const MASK_TOKEN: &str = "<mask>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid vocab: {0}")]
    Vocab(String),
    #[error("invalid merges file, line {line}: {message}")]
    Merges { line: usize, message: String },
    #[error("unknown token id {0}")]
    UnknownId(u32),
}

#[derive(Clone)]
pub struct Tokenizer {
    kind: Kind,
    special: Arc<Vec<String>>,
}

#[derive(Clone)]
enum Kind {
    Whitespace(Arc<Interner>),
    Bpe(Arc<Bpe>),
}

impl fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            Kind::Whitespace(_) => "whitespace",
            Kind::Bpe(_) => "bpe",
        };
        f.debug_struct("Tokenizer")
            .field("kind", &kind)
            .field("special", &self.special)
            .finish()
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::whitespace()
    }
}

impl Tokenizer {
    /// Whitespace-run tokenizer with `<mask>` as its only special token.
    pub fn whitespace() -> Self {
        Tokenizer::whitespace_with_special(&[MASK_TOKEN])
    }

    pub fn whitespace_with_special(special: &[&str]) -> Self {
        let special: Vec<String> = special.iter().map(|s| s.to_string()).collect();
        let interner = Interner::default();
        for s in &special {
            interner.intern(s);
        }
        Tokenizer {
            kind: Kind::Whitespace(Arc::new(interner)),
            special: Arc::new(special),
        }
    }

    /// Loads a BPE tokenizer from a directory holding `vocab.json` and `merges.txt`.
    pub fn bpe_from_dir(dir: &Path, special: &[&str]) -> Result<Self, TokenizerError> {
        Tokenizer::bpe_from_files(&dir.join("vocab.json"), &dir.join("merges.txt"), special)
    }

    pub fn bpe_from_files(
        vocab: &Path,
        merges: &Path,
        special: &[&str],
    ) -> Result<Self, TokenizerError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| TokenizerError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        Tokenizer::bpe_from_str(&read(vocab)?, &read(merges)?, special)
    }

    /// Builds a BPE tokenizer from the text of a vocab JSON object and a merges file.
    pub fn bpe_from_str(
        vocab_json: &str,
        merges_txt: &str,
        special: &[&str],
    ) -> Result<Self, TokenizerError> {
        let bpe = Bpe::load(vocab_json, merges_txt, special)?;
        Ok(Tokenizer {
            kind: Kind::Bpe(Arc::new(bpe)),
            special: Arc::new(special.iter().map(|s| s.to_string()).collect()),
        })
    }

    pub fn is_bpe(&self) -> bool {
        matches!(self.kind, Kind::Bpe(_))
    }

    pub fn special_tokens(&self) -> &[String] {
        &self.special
    }

    /// Byte ranges of each token in `text`. The ranges are contiguous and cover
    /// the whole input.
    pub fn token_spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut spans = Vec::new();
        for (segment, is_special) in split_special(text, &self.special) {
            if is_special {
                spans.push(segment);
                continue;
            }
            let offset = segment.start;
            let piece = &text[segment];
            match &self.kind {
                Kind::Whitespace(_) => whitespace_spans(piece, offset, &mut spans),
                Kind::Bpe(bpe) => bpe.spans(piece, offset, &mut spans),
            }
        }
        spans
    }

    /// Token strings of `text`.
    pub fn tokenize<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.token_spans(text)
            .into_iter()
            .map(|r| &text[r])
            .collect()
    }

    /// Number of tokens in `text`.
    pub fn count(&self, text: &str) -> usize {
        self.token_spans(text).len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.tokenize(text)
            .into_iter()
            .flat_map(|tok| match &self.kind {
                Kind::Whitespace(interner) => vec![interner.intern(tok)],
                Kind::Bpe(bpe) => bpe.ids(tok),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            match &self.kind {
                Kind::Whitespace(interner) => out.push_str(&interner.lookup(id)?),
                Kind::Bpe(bpe) => bpe.push_token(id, &mut out)?,
            }
        }
        Ok(out)
    }

    /// Id of a special token, if it is registered.
    pub fn special_id(&self, token: &str) -> Option<u32> {
        if !self.special.iter().any(|s| s == token) {
            return None;
        }
        match &self.kind {
            Kind::Whitespace(interner) => Some(interner.intern(token)),
            Kind::Bpe(bpe) => bpe.vocab.get(token).copied(),
        }
    }
}

/// Splits `text` into alternating plain and special-token segments.
fn split_special(text: &str, special: &[String]) -> Vec<(Range<usize>, bool)> {
    let mut out = Vec::new();
    let mut plain_start = 0;
    let mut i = 0;
    let bytes = text.as_bytes();
    while i < bytes.len() {
        let hit = special
            .iter()
            .filter(|s| !s.is_empty() && text[i..].starts_with(s.as_str()))
            .map(|s| s.len())
            .max();
        match hit {
            Some(len) => {
                if plain_start < i {
                    out.push((plain_start..i, false));
                }
                out.push((i..i + len, true));
                i += len;
                plain_start = i;
            }
            None => {
                i += utf8_len(bytes[i]);
            }
        }
    }
    if plain_start < text.len() {
        out.push((plain_start..text.len(), false));
    }
    out
}

fn utf8_len(first: u8) -> usize {
    match first {
        0x00..=0x7f => 1,
        0xc0..=0xdf => 2,
        0xe0..=0xef => 3,
        _ => 4,
    }
}

fn whitespace_spans(text: &str, offset: usize, out: &mut Vec<Range<usize>>) {
    let mut start = 0;
    let mut in_word = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if in_word {
                out.push(offset + start..offset + i);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(offset + start..offset + text.len());
    }
}

#[derive(Default)]
struct Interner {
    inner: RwLock<(HashMap<String, u32>, Vec<String>)>,
}

impl Interner {
    fn intern(&self, token: &str) -> u32 {
        if let Some(&id) = self.inner.read().unwrap().0.get(token) {
            return id;
        }
        let mut guard = self.inner.write().unwrap();
        let (map, list) = &mut *guard;
        if let Some(&id) = map.get(token) {
            return id;
        }
        let id = list.len() as u32;
        list.push(token.to_string());
        map.insert(token.to_string(), id);
        id
    }

    fn lookup(&self, id: u32) -> Result<String, TokenizerError> {
        self.inner
            .read()
            .unwrap()
            .1
            .get(id as usize)
            .cloned()
            .ok_or(TokenizerError::UnknownId(id))
    }
}

struct Bpe {
    vocab: HashMap<String, u32>,
    reverse: HashMap<u32, String>,
    ranks: HashMap<(String, String), usize>,
    /// Characters missing from the vocab encode as `fallback_base + codepoint`.
    fallback_base: u32,
}

impl Bpe {
    fn load(vocab_json: &str, merges_txt: &str, special: &[&str]) -> Result<Self, TokenizerError> {
        let raw: HashMap<String, u32> =
            serde_json::from_str(vocab_json).map_err(|e| TokenizerError::Vocab(e.to_string()))?;
        let mut vocab = raw;
        let mut reverse = HashMap::with_capacity(vocab.len());
        for (tok, &id) in &vocab {
            if let Some(prev) = reverse.insert(id, tok.clone()) {
                return Err(TokenizerError::Vocab(format!(
                    "id {id} assigned to both {prev:?} and {tok:?}"
                )));
            }
        }
        for s in special {
            if !vocab.contains_key(*s) {
                let id = reverse.keys().max().map_or(0, |m| m + 1);
                vocab.insert(s.to_string(), id);
                reverse.insert(id, s.to_string());
            }
        }

        let mut ranks = HashMap::new();
        for (idx, line) in merges_txt.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() || (idx == 0 && line.starts_with("#version")) {
                continue;
            }
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
                return Err(TokenizerError::Merges {
                    line: idx + 1,
                    message: format!("expected two space-separated symbols, got {line:?}"),
                });
            }
            let rank = ranks.len();
            ranks
                .entry((parts[0].to_string(), parts[1].to_string()))
                .or_insert(rank);
        }

        let fallback_base = reverse.keys().max().map_or(0, |m| m + 1);
        Ok(Bpe {
            vocab,
            reverse,
            ranks,
            fallback_base,
        })
    }

    fn spans(&self, text: &str, offset: usize, out: &mut Vec<Range<usize>>) {
        // Pre-tokenize into runs of non-whitespace and single whitespace chars.
        let mut word_start = None;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                if let Some(s) = word_start.take() {
                    self.merge_word(&text[s..i], offset + s, out);
                }
                out.push(offset + i..offset + i + ch.len_utf8());
            } else if word_start.is_none() {
                word_start = Some(i);
            }
        }
        if let Some(s) = word_start {
            self.merge_word(&text[s..], offset + s, out);
        }
    }

    fn merge_word(&self, word: &str, offset: usize, out: &mut Vec<Range<usize>>) {
        let mut symbols: Vec<Range<usize>> = word
            .char_indices()
            .map(|(i, c)| i..i + c.len_utf8())
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| {
                    let key = (word[w[0].clone()].to_string(), word[w[1].clone()].to_string());
                    self.ranks.get(&key).copied()
                })
                .min();
            let Some(best) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() {
                    let key = (
                        word[symbols[i].clone()].to_string(),
                        word[symbols[i + 1].clone()].to_string(),
                    );
                    if self.ranks.get(&key) == Some(&best) {
                        merged.push(symbols[i].start..symbols[i + 1].end);
                        i += 2;
                        continue;
                    }
                }
                merged.push(symbols[i].clone());
                i += 1;
            }
            symbols = merged;
        }
        out.extend(symbols.into_iter().map(|r| offset + r.start..offset + r.end));
    }

    fn ids(&self, token: &str) -> Vec<u32> {
        if let Some(&id) = self.vocab.get(token) {
            return vec![id];
        }
        token
            .chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                match self.vocab.get(&*c.encode_utf8(&mut buf)) {
                    Some(&id) => id,
                    None => self.fallback_base + c as u32,
                }
            })
            .collect()
    }

    fn push_token(&self, id: u32, out: &mut String) -> Result<(), TokenizerError> {
        if let Some(tok) = self.reverse.get(&id) {
            out.push_str(tok);
            return Ok(());
        }
        let c = id
            .checked_sub(self.fallback_base)
            .and_then(char::from_u32)
            .ok_or(TokenizerError::UnknownId(id))?;
        out.push(c);
        Ok(())
    }
}
