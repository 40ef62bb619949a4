use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SEP: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Ordered symbol table. Ids `0..4` are the reserved PAD, BOS, EOS and SEP
/// markers; task symbols follow in insertion order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new<I, S>(task_symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let symbols = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(task_symbols.into_iter().map(Into::into))
            .collect();
        Self::from_symbols(symbols)
    }

    /// Rebuilds a vocabulary from its full symbol list (reserved markers included).
    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < RESERVED.len() || symbols[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidConfig(
                "vocabulary must start with <pad>, <bos>, <eos>, <sep>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid symbol {s:?}")));
            }
            if index.insert(s.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Ids of the non-reserved symbols.
    pub fn task_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        (RESERVED.len() as TokenId)..(self.symbols.len() as TokenId)
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown symbol {w:?}")))
            })
            .collect()
    }

    /// Space-joined surface form; reserved markers are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_reserved(id))
            .filter_map(|&id| self.symbol(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn check(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= self.len()) {
            Some(&id) => Err(Error::OutOfVocab {
                id,
                size: self.len(),
            }),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        Self::from_symbols(symbols)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}
