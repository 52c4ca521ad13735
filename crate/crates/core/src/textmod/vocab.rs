use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datagen::AFF_TOKEN;
use crate::error::{bail, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const AFF: u32 = 4;

const RESERVED: [&str; 5] = ["⟨PAD⟩", "⟨BOS⟩", "⟨EOS⟩", "⟨UNK⟩", AFF_TOKEN];

/// Case-sensitive word vocabulary with five reserved ids.
///
/// Serializes as the token list, where a token's position is its id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = crate::Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Index into `ids` of the first ⟨Aff⟩ marker.
    pub aff_position: Option<usize>,
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '-' || c == '_'
}

/// Whitespace split, then punctuation split off into single-char pieces. The
/// literal marker is kept whole.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk == AFF_TOKEN {
            out.push(chunk);
            continue;
        }
        let mut start = None;
        for (i, c) in chunk.char_indices() {
            if is_word_char(c) {
                start.get_or_insert(i);
            } else {
                if let Some(s) = start.take() {
                    out.push(&chunk[s..i]);
                }
                out.push(&chunk[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&chunk[s..]);
        }
    }
    out
}

impl Vocabulary {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut words: Vec<&str> = corpus.iter().flat_map(|s| split_words(s.as_ref())).collect();
        words.sort_unstable();
        words.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|&t| t.into()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(w)).map(String::from));
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Rebuilds from a serialized token list, checking the reserved prefix.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            bail!(Format, "vocabulary does not start with the reserved tokens");
        }
        let index: BTreeMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        if index.len() != tokens.len() {
            bail!(Format, "vocabulary has duplicate tokens");
        }
        Ok(Self { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    /// `[BOS, words…, EOS]`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids = Vec::with_capacity(8);
        ids.push(BOS);
        ids.extend(split_words(text).into_iter().map(|w| self.id(w)));
        ids.push(EOS);
        TokenSequence::new(ids)
    }

    /// Inverse of [`Vocabulary::tokenize`] up to whitespace; reserved
    /// framing tokens are dropped.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS || id == EOS || id == PAD {
                continue;
            }
            let t = self.token(id);
            let attach = t.chars().count() == 1 && !t.chars().all(is_word_char);
            if !out.is_empty() && !attach {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        let aff_position = ids.iter().position(|&i| i == AFF);
        Self { ids, aff_position }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Inserts a marker before the final EOS (or at the end) when absent.
    pub fn with_aff_query(&self) -> Self {
        if self.aff_position.is_some() {
            return self.clone();
        }
        let mut ids = self.ids.clone();
        let at = if ids.last() == Some(&EOS) { ids.len() - 1 } else { ids.len() };
        ids.insert(at, AFF);
        Self::new(ids)
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.resize(len.max(ids.len()), PAD);
        Self { ids, aff_position: self.aff_position }
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }
}
