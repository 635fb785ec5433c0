//! Structured rationales: `<think> k : v , v ; k : v </think> <|emb|>`.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::vocab::{
    TokenId, TokenKind, Vocab, COLON, COMMA, EMB, SEP, THINK_CLOSE, THINK_OPEN,
};

/// Ordered `key → values` assignment with unique keys and nonempty value lists.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttributeMap {
    pairs: Vec<(String, Vec<String>)>,
}

impl AttributeMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs<K: Into<String>, V: Into<String>>(
        pairs: impl IntoIterator<Item = (K, Vec<V>)>,
    ) -> Result<Self> {
        let mut m = Self::new();
        for (k, vs) in pairs {
            m.insert(k.into(), vs.into_iter().map(Into::into).collect())?;
        }
        Ok(m)
    }

    /// Adds a key; duplicate keys and empty value lists are rejected.
    pub fn insert(&mut self, key: String, values: Vec<String>) -> Result<()> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(format!("key `{key}` has no values")));
        }
        if self.get(&key).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate key `{key}`")));
        }
        self.pairs.push((key, values));
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[String]> {
        self.pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.pairs.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of (key, value) combinations.
    pub fn pair_count(&self) -> usize {
        self.pairs.iter().map(|(_, v)| v.len()).sum()
    }

    /// Flattened `(key, value)` pairs.
    pub fn kv_pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.pairs
            .iter()
            .flat_map(|(k, vs)| vs.iter().map(move |v| (k.as_str(), v.as_str())))
    }

    /// Key-wise union: keys in first-seen order, values deduplicated
    /// preserving order.
    pub fn union(&self, other: &AttributeMap) -> AttributeMap {
        let mut out = self.clone();
        for (k, vs) in other.iter() {
            match out.pairs.iter_mut().find(|(ok, _)| ok == k) {
                Some((_, ov)) => {
                    for v in vs {
                        if !ov.contains(v) {
                            ov.push(v.clone());
                        }
                    }
                }
                None => out.pairs.push((k.to_string(), vs.to_vec())),
            }
        }
        out
    }

    /// Compact text form `Key:v1,v2;Key2:v3`.
    pub fn to_text(&self) -> String {
        self.pairs
            .iter()
            .map(|(k, vs)| format!("{k}:{}", vs.join(",")))
            .collect::<Vec<_>>()
            .join(";")
    }

    pub fn from_text(s: &str) -> Result<Self> {
        let mut m = Self::new();
        if s.is_empty() {
            return Ok(m);
        }
        for part in s.split(';') {
            let (k, vs) = part
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("bad attribute pair `{part}`")))?;
            m.insert(k.to_string(), vs.split(',').map(str::to_string).collect())?;
        }
        Ok(m)
    }
}

impl fmt::Display for AttributeMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .pairs
            .iter()
            .map(|(k, vs)| format!("({k}: {})", vs.join(", ")))
            .collect();
        write!(f, "{{{}}}", parts.join(", "))
    }
}

/// Token sequence `<think> k : v , v ; … </think> <|emb|>`.
pub fn serialize(map: &AttributeMap, vocab: &Vocab) -> Result<Vec<TokenId>> {
    if map.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot serialize an empty attribute map".into(),
        ));
    }
    let mut out = vec![THINK_OPEN];
    for (i, (k, vs)) in map.iter().enumerate() {
        if i > 0 {
            out.push(SEP);
        }
        let kid = vocab.id(k)?;
        if vocab.kind(kid) != Some(TokenKind::Key) {
            return Err(Error::InvalidArgument(format!(
                "`{k}` is not an attribute key"
            )));
        }
        out.push(kid);
        out.push(COLON);
        for (j, v) in vs.iter().enumerate() {
            if j > 0 {
                out.push(COMMA);
            }
            let vid = vocab.id(v)?;
            if vocab.kind(vid) != Some(TokenKind::Value) {
                return Err(Error::InvalidArgument(format!(
                    "`{v}` is not an attribute value"
                )));
            }
            out.push(vid);
        }
    }
    out.push(THINK_CLOSE);
    out.push(EMB);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatFailure {
    /// `<|emb|>` (or the end) reached while the think span is still open.
    MissingClose,
    DuplicateKey,
    /// The same value listed twice under one key.
    DuplicateValue,
    /// The sequence ends before the grammar is complete.
    Truncation,
    /// A token that the grammar does not admit at its position.
    StrayToken,
}

impl FormatFailure {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MissingClose => "missing-close",
            Self::DuplicateKey => "duplicate-key",
            Self::DuplicateValue => "duplicate-value",
            Self::Truncation => "truncation",
            Self::StrayToken => "stray-token",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParseFailure {
    pub kind: FormatFailure,
    pub position: usize,
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at token {}", self.kind.as_str(), self.position)
    }
}

enum State {
    Start,
    Key,
    Colon,
    Value,
    AfterValue,
    Emb,
    Done,
}

/// Strict parse of a generated rationale; never panics on malformed input.
pub fn parse(tokens: &[TokenId], vocab: &Vocab) -> std::result::Result<AttributeMap, ParseFailure> {
    let fail = |kind, position| Err(ParseFailure { kind, position });
    let mut map = AttributeMap::new();
    let mut key: Option<String> = None;
    let mut values: Vec<String> = Vec::new();
    let mut state = State::Start;
    for (pos, &t) in tokens.iter().enumerate() {
        let kind = vocab.kind(t);
        state = match state {
            State::Start if t == THINK_OPEN => State::Key,
            State::Start => return fail(FormatFailure::StrayToken, pos),
            State::Key | State::Value | State::Colon | State::AfterValue if t == EMB => {
                return fail(FormatFailure::MissingClose, pos)
            }
            State::Key if kind == Some(TokenKind::Key) => {
                let k = vocab.token(t).expect("known id").to_string();
                if map.get(&k).is_some() {
                    return fail(FormatFailure::DuplicateKey, pos);
                }
                key = Some(k);
                State::Colon
            }
            State::Colon if t == COLON => State::Value,
            State::Value if kind == Some(TokenKind::Value) => {
                let v = vocab.token(t).expect("known id").to_string();
                if values.contains(&v) {
                    return fail(FormatFailure::DuplicateValue, pos);
                }
                values.push(v);
                State::AfterValue
            }
            State::AfterValue if t == COMMA => State::Value,
            State::AfterValue if t == SEP || t == THINK_CLOSE => {
                let k = key.take().expect("key precedes values");
                map.insert(k, std::mem::take(&mut values))
                    .expect("checked for duplicates");
                if t == SEP {
                    State::Key
                } else {
                    State::Emb
                }
            }
            State::Emb if t == EMB => State::Done,
            State::Key | State::Colon | State::Value | State::AfterValue | State::Emb => {
                return fail(FormatFailure::StrayToken, pos)
            }
            State::Done => return fail(FormatFailure::StrayToken, pos),
        };
    }
    match state {
        State::Done => Ok(map),
        State::Emb | State::Start => fail(FormatFailure::Truncation, tokens.len()),
        _ => fail(FormatFailure::Truncation, tokens.len()),
    }
}
