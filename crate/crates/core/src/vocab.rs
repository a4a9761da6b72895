//! Whitespace vocabulary with a fixed block of reserved ids.
//!
//! Ids `0..7` are reserved, in the order of [`SPECIAL_TOKENS`]. Every other
//! token gets an id by descending corpus count, ties broken lexicographically,
//! so a build is a pure function of its input.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
/// Entity-level mask.
pub const MASK: TokenId = 2;
/// Sentence-level mask.
pub const SENT_MASK: TokenId = 3;
/// Document-level mask.
pub const DOC_MASK: TokenId = 4;
pub const START: TokenId = 5;
pub const END: TokenId = 6;

pub const SPECIAL_TOKENS: [&str; 7] = ["[PAD]", "[UNK]", "[M]", "[sM]", "[gM]", "[S]", "[E]"];
pub const NUM_SPECIAL: usize = SPECIAL_TOKENS.len();

pub fn is_mask(id: TokenId) -> bool {
    matches!(id, MASK | SENT_MASK | DOC_MASK)
}

/// Punctuation split off into standalone tokens by [`normalize_text`].
const SPLIT_PUNCT: &[char] = &['.', ',', '!', '?', ';', ':'];

/// Lowercases and isolates sentence punctuation so that it tokenizes on its own.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    for ch in text.chars() {
        if SPLIT_PUNCT.contains(&ch) {
            out.push(' ');
            out.push(ch);
            out.push(' ');
        } else if ch.is_whitespace() {
            out.push(' ');
        } else {
            out.extend(ch.to_lowercase());
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// [`normalize_text`] that leaves special tokens such as `[M]` intact.
pub fn normalize_prompt(text: &str) -> String {
    normalize_text(text)
        .split(' ')
        .map(|t| SPECIAL_TOKENS.iter().find(|s| s.to_lowercase() == t).copied().unwrap_or(t))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from whitespace-delimited lines.
    pub fn build<I, S>(lines: I, min_count: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let min_count = min_count.max(1);
        let mut counts: HashMap<String, u64> = HashMap::new();
        for line in lines {
            for tok in line.as_ref().split_whitespace() {
                if SPECIAL_TOKENS.contains(&tok) {
                    continue;
                }
                *counts.entry(tok.to_owned()).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(String, u64)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_SPECIAL];
        for (tok, c) in ranked {
            tokens.push(tok);
            freq.push(c);
        }
        Ok(Self::from_parts(tokens, freq))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            counts,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn count(&self, id: TokenId) -> Option<u64> {
        self.counts.get(id as usize).copied()
    }

    /// Encodes raw text. Literal special-token strings are rejected.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|tok| {
                if SPECIAL_TOKENS.contains(&tok) {
                    Err(Error::ReservedToken(tok.to_owned()))
                } else {
                    Ok(self.id(tok).unwrap_or(UNK))
                }
            })
            .collect()
    }

    /// Encodes a prompt in which the mask tokens `[M]`, `[sM]` and `[gM]` may appear.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|tok| match tok {
                "[M]" => Ok(MASK),
                "[sM]" => Ok(SENT_MASK),
                "[gM]" => Ok(DOC_MASK),
                t if SPECIAL_TOKENS.contains(&t) => Err(Error::ReservedToken(t.to_owned())),
                t => Ok(self.id(t).unwrap_or(UNK)),
            })
            .collect()
    }

    /// Inverse of [`Vocabulary::decode`] for text this crate rendered itself:
    /// every special token name maps back to its reserved id.
    pub fn encode_rendered(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            parts.push(tok);
        }
        Ok(parts.join(" "))
    }

    /// `id<TAB>token<TAB>count`, ids ascending.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, (tok, c)) in self.tokens.iter().zip(&self.counts).enumerate() {
            writeln!(w, "{i}\t{tok}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let (Some(id), Some(tok), Some(count), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(Error::parse(n + 1, "expected id<TAB>token<TAB>count"));
            };
            let id: usize = id.parse().map_err(|_| Error::parse(n + 1, "bad id"))?;
            if id != tokens.len() {
                return Err(Error::parse(n + 1, "ids must be dense and ascending"));
            }
            let count = count.parse().map_err(|_| Error::parse(n + 1, "bad count"))?;
            if id < NUM_SPECIAL && tok != SPECIAL_TOKENS[id] {
                return Err(Error::parse(n + 1, format!("expected {}", SPECIAL_TOKENS[id])));
            }
            tokens.push(tok.to_owned());
            counts.push(count);
        }
        if tokens.len() < NUM_SPECIAL {
            return Err(Error::parse(tokens.len() + 1, "missing reserved tokens"));
        }
        Ok(Self::from_parts(tokens, counts))
    }
}
