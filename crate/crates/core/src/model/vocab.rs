use std::collections::HashMap;
use std::fmt::Write as _;

use crate::attr::Schema;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const THINK_OPEN: TokenId = 3;
pub const THINK_CLOSE: TokenId = 4;
pub const EMB: TokenId = 5;
pub const COLON: TokenId = 6;
pub const COMMA: TokenId = 7;
pub const SEP: TokenId = 8;

/// Special tokens in id order; the vocabulary file lists them first.
pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<think>", "</think>", "<|emb|>"];
pub const SEPARATORS: [&str; 3] = [":", ",", ";"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Separator,
    Key,
    Value,
}

/// Bidirectional token ↔ id map.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    kinds: Vec<TokenKind>,
}

impl Vocab {
    /// Specials, separators, then every schema key, then every value.
    pub fn from_schema(schema: &Schema) -> Result<Self> {
        let mut tokens: Vec<(String, TokenKind)> = SPECIALS
            .iter()
            .map(|s| (s.to_string(), TokenKind::Special))
            .chain(
                SEPARATORS
                    .iter()
                    .map(|s| (s.to_string(), TokenKind::Separator)),
            )
            .collect();
        tokens.extend(schema.keys().map(|k| (k.name.clone(), TokenKind::Key)));
        for k in schema.keys() {
            tokens.extend(k.values.iter().map(|v| (v.clone(), TokenKind::Value)));
        }
        Self::build(tokens)
    }

    fn build(list: Vec<(String, TokenKind)>) -> Result<Self> {
        let mut ids = HashMap::new();
        let mut tokens = Vec::with_capacity(list.len());
        let mut kinds = Vec::with_capacity(list.len());
        for (i, (tok, kind)) in list.into_iter().enumerate() {
            if ids.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{tok}`")));
            }
            tokens.push(tok);
            kinds.push(kind);
        }
        Ok(Self { tokens, ids, kinds })
    }

    /// Reads the one-token-per-line format. Token kinds are recovered from
    /// `schema`, which must describe the same vocabulary.
    pub fn parse_file(text: &str, schema: &Schema) -> Result<Self> {
        let expected = Self::from_schema(schema)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != expected.len() {
            return Err(Error::InvalidArgument(format!(
                "vocabulary has {} tokens, schema implies {}",
                lines.len(),
                expected.len()
            )));
        }
        for (i, (line, tok)) in lines.iter().zip(&expected.tokens).enumerate() {
            if line != tok {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary line {} is `{line}`, expected `{tok}`",
                    i + 1
                )));
            }
        }
        Ok(expected)
    }

    pub fn to_file(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            writeln!(s, "{t}").expect("string write");
        }
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Result<TokenId> {
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn kind(&self, id: TokenId) -> Option<TokenKind> {
        self.kinds.get(id as usize).copied()
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<Vec<TokenId>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        self.decode(ids).join(" ")
    }
}
