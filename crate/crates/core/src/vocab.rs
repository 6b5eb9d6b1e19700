//! Token vocabulary with a fixed block of reserved ids.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id. Ids `0..NUM_RESERVED` are reserved markers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const PAD: TokenId = TokenId(0);
    pub const CLS: TokenId = TokenId(1);
    pub const SEP: TokenId = TokenId(2);
    pub const EOS_X: TokenId = TokenId(3);
    pub const EOS_Y: TokenId = TokenId(4);
    pub const NO_INSERT: TokenId = TokenId(5);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn is_reserved(self) -> bool {
        self.0 < NUM_RESERVED as u32
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const NUM_RESERVED: usize = 6;

pub const RESERVED_NAMES: [&str; NUM_RESERVED] =
    ["<pad>", "<cls>", "<sep>", "<eos_x>", "<eos_y>", "<no_insert>"];

/// Marker used for cloze gaps in text inputs; never a legal token.
pub const GAP_MARKER: &str = "___";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from the non-reserved tokens, which receive ids
    /// starting at `NUM_RESERVED` in the given order.
    pub fn new<I, S>(content: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            index.insert(name.to_string(), TokenId(i as u32));
        }
        for tok in content {
            let tok = tok.into();
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidInput(format!(
                    "token {tok:?} is empty or contains whitespace"
                )));
            }
            if tok == GAP_MARKER {
                return Err(Error::InvalidInput(format!(
                    "token {GAP_MARKER:?} is reserved for gap markers"
                )));
            }
            if tok == "|||" {
                return Err(Error::InvalidInput("token \"|||\" is reserved as pair separator".into()));
            }
            let id = TokenId(tokens.len() as u32);
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::InvalidInput(format!("duplicate token {tok:?}")));
            }
            tokens.push(tok);
        }
        Ok(Self { tokens, index })
    }

    /// Vocabulary of `n` synthetic content tokens (`a`..`z`, then `w26`, ...).
    pub fn synthetic(n: usize) -> Self {
        Self::new((0..n).map(synthetic_name)).expect("synthetic names are distinct")
    }

    /// Parses the vocabulary file format: one token per line, line `k` gets id `k + 6`.
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let lines = match lines.last() {
            Some(l) if l.is_empty() => &lines[..lines.len() - 1],
            _ => &lines[..],
        };
        Self::new(lines.iter().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("reading vocab {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for tok in &self.tokens[NUM_RESERVED..] {
            out.push_str(tok);
            out.push('\n');
        }
        out
    }

    /// Total number of ids, reserved ones included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == NUM_RESERVED
    }

    pub fn num_content(&self) -> usize {
        self.tokens.len() - NUM_RESERVED
    }

    pub fn lookup(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id.index()).map(String::as_str)
    }

    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (NUM_RESERVED..self.tokens.len()).map(|i| TokenId(i as u32))
    }

    /// Maps whitespace-separated content tokens to ids.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|t| match self.lookup(t) {
                Some(id) if !id.is_reserved() => Ok(id),
                _ => Err(Error::InvalidInput(format!("unknown token {t:?}"))),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn synthetic_name(i: usize) -> String {
    if i < 26 {
        ((b'a' + i as u8) as char).to_string()
    } else {
        format!("w{i}")
    }
}
