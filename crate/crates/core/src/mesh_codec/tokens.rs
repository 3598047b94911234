//! Token sequences and the `iflame-tokens v1` text format.

use std::fmt::Write as _;
use std::path::Path;

use super::QuantizerConfig;
use crate::{Error, Result};

/// Number of tokens emitted per triangle: 3 vertices × (z, y, x).
pub const TOKENS_PER_FACE: usize = 9;

/// Role of a token id under a given vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Coord(u32),
    Start,
    End,
    Pad,
    Invalid,
}

/// Ordered token ids: `[S]`, `9N` coordinate bins, `[E]`, optional `[P]`s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub bins: u32,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(bins: u32, tokens: Vec<u32>) -> Self {
        Self { bins, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn kind(&self, id: u32) -> TokenKind {
        classify(self.bins, id)
    }

    /// Checks `[S] (coord^9)* [E] [P]*`.
    pub fn check_complete(&self) -> Result<()> {
        let n = self.body_len_until_end()?;
        if n % TOKENS_PER_FACE != 0 {
            return Err(Error::Grammar(format!("body length {n} is not a multiple of 9")));
        }
        let end = 1 + n;
        if self.tokens.get(end).map(|&t| self.kind(t)) != Some(TokenKind::End) {
            return Err(Error::Grammar("missing [E]".into()));
        }
        if let Some(pos) = self.tokens[end + 1..]
            .iter()
            .position(|&t| self.kind(t) != TokenKind::Pad)
        {
            return Err(Error::Grammar(format!(
                "non-pad token after [E] at {}",
                end + 1 + pos
            )));
        }
        Ok(())
    }

    /// Checks that the sequence is a grammatical prefix: `[S]` followed by
    /// whole faces only (no `[E]`).
    pub fn check_prefix(&self) -> Result<usize> {
        let n = self.body_len_until_end()?;
        if 1 + n != self.tokens.len() {
            return Err(Error::Grammar("prefix must not contain [E] or padding".into()));
        }
        if n % TOKENS_PER_FACE != 0 {
            return Err(Error::Grammar(format!("prefix body length {n} is not whole faces")));
        }
        Ok(n / TOKENS_PER_FACE)
    }

    /// Number of coordinate tokens after `[S]` before the first special token.
    fn body_len_until_end(&self) -> Result<usize> {
        if self.tokens.first().map(|&t| self.kind(t)) != Some(TokenKind::Start) {
            return Err(Error::Grammar("sequence must begin with [S]".into()));
        }
        let mut n = 0;
        for &t in &self.tokens[1..] {
            match self.kind(t) {
                TokenKind::Coord(_) => n += 1,
                TokenKind::End | TokenKind::Pad => break,
                TokenKind::Start | TokenKind::Invalid => {
                    return Err(Error::Grammar(format!("unexpected token {t} in body")))
                }
            }
        }
        Ok(n)
    }

    /// Pads with `[P]` up to `len`.
    pub fn padded(&self, len: usize) -> Vec<u32> {
        let mut out = self.tokens.clone();
        out.resize(len.max(out.len()), self.bins + 2);
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("iflame-tokens v1 bins={}\n", self.bins);
        let mut line = Vec::new();
        for &t in &self.tokens {
            let special = !matches!(self.kind(t), TokenKind::Coord(_));
            if special && !line.is_empty() {
                let _ = writeln!(out, "{}", join(&line));
                line.clear();
            }
            line.push(t);
            if special || line.len() == TOKENS_PER_FACE {
                let _ = writeln!(out, "{}", join(&line));
                line.clear();
            }
        }
        if !line.is_empty() {
            let _ = writeln!(out, "{}", join(&line));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty token file".into(),
        })?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("iflame-tokens") || fields.next() != Some("v1") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad header {header:?}"),
            });
        }
        let bins = fields
            .next()
            .and_then(|f| f.strip_prefix("bins="))
            .and_then(|b| b.parse::<u32>().ok())
            .ok_or(Error::Parse {
                line: 1,
                msg: "header must carry bins=<b>".into(),
            })?;
        QuantizerConfig::new(bins)?;
        let mut tokens = Vec::new();
        for (idx, line) in lines.enumerate() {
            for tok in line.split_whitespace() {
                let id: u32 = tok.parse().map_err(|_| Error::Parse {
                    line: idx + 2,
                    msg: format!("bad token id {tok:?}"),
                })?;
                if id > bins + 2 {
                    return Err(Error::Parse {
                        line: idx + 2,
                        msg: format!("token id {id} outside vocabulary of {}", bins + 3),
                    });
                }
                tokens.push(id);
            }
        }
        Ok(Self { bins, tokens })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub fn classify(bins: u32, id: u32) -> TokenKind {
    match id {
        x if x < bins => TokenKind::Coord(x),
        x if x == bins => TokenKind::Start,
        x if x == bins + 1 => TokenKind::End,
        x if x == bins + 2 => TokenKind::Pad,
        _ => TokenKind::Invalid,
    }
}

fn join(ids: &[u32]) -> String {
    ids.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}
