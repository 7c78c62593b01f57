use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const DOC_END: TokenId = 2;
/// Filler text used to pad a short final window.
pub const NULL_DOC: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<doc_end>", "<null>"];

/// Fixed instruction placed before every query.
pub const INSTRUCTION: &str = "rank the candidates by relevance to the query :";

/// Whitespace vocabulary with reserved special, instruction and identifier entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

pub fn identifier_token(slot: usize) -> String {
    format!("<id_{}>", slot + 1)
}

pub fn topic_token(i: usize) -> String {
    format!("t{i}")
}

pub fn filler_token(i: usize) -> String {
    format!("w{i}")
}

impl Vocab {
    /// Specials, instruction words, `num_slots` identifiers, `topic_pool` topic
    /// words and filler words up to `size` entries.
    pub fn synthetic(size: usize, num_slots: usize, topic_pool: usize) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in INSTRUCTION.split_whitespace() {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        tokens.extend((0..num_slots).map(identifier_token));
        let reserved = tokens.len();
        if size < reserved + topic_pool + 1 {
            return Err(Error::Config(format!(
                "vocab size {size} too small for {reserved} reserved tokens plus {topic_pool} topic tokens and filler"
            )));
        }
        tokens.extend((0..topic_pool).map(topic_token));
        let filler = size - tokens.len();
        tokens.extend((0..filler).map(filler_token));
        Ok(tokens.into())
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

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    /// Ids of the slot identifiers `<id_1>..<id_m>`.
    pub fn identifier_ids(&self, m: usize) -> Result<Vec<TokenId>> {
        (0..m)
            .map(|k| {
                self.id(&identifier_token(k))
                    .ok_or_else(|| Error::Config(format!("vocab has no identifier for slot {}", k + 1)))
            })
            .collect()
    }

    pub fn instruction_ids(&self) -> Vec<TokenId> {
        tokenize(INSTRUCTION, self)
    }

    /// Number of filler words (`w*`).
    pub fn filler_count(&self) -> usize {
        self.tokens.iter().filter(|t| t.starts_with('w') && t[1..].parse::<usize>().is_ok()).count()
    }
}

/// Whitespace split and dictionary lookup; unknown words map to `<unk>`.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<TokenId> {
    text.split_whitespace().map(|w| vocab.id(w).unwrap_or(UNK)).collect()
}

pub fn detokenize(ids: &[TokenId], vocab: &Vocab) -> String {
    ids.iter().map(|&i| vocab.token(i)).collect::<Vec<_>>().join(" ")
}
