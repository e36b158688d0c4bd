use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{MARKERS, SEPARATOR, UNKNOWN};
use crate::data::TaskSequence;
use crate::error::{Error, Result};

/// Token-to-row mapping for backbone embedding tables.
///
/// Ids 0..6 are reserved: `[UNK]`, the four entity markers, `[SEP]`.
/// Remaining tokens follow in sorted order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn build<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let reserved: Vec<String> = std::iter::once(UNKNOWN)
            .chain(MARKERS)
            .chain(std::iter::once(SEPARATOR))
            .map(str::to_string)
            .collect();
        let rest: BTreeSet<String> = tokens.into_iter().filter(|t| !reserved.contains(t)).collect();
        let all: Vec<String> = reserved.into_iter().chain(rest).collect();
        Self::from_list(all).expect("reserved and corpus tokens are distinct")
    }

    pub fn from_sequence(seq: &TaskSequence) -> Self {
        Self::build(seq.all_samples().flat_map(|s| s.tokens.iter().cloned()))
    }

    fn from_list(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        if tokens.first().map(String::as_str) != Some(UNKNOWN) {
            return Err(Error::Data("vocabulary must start with [UNK]".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl TryFrom<Vec<String>> for TokenVocab {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::from_list(v)
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.tokens
    }
}
