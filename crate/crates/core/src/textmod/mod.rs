//! Tokenization, a small question encoder and an answer head.

mod model;
mod vocab;

pub use model::{Encoded, TextConfig, TextModule};
pub use vocab::{split_words, TokenSequence, Vocabulary, AFF, BOS, EOS, PAD, UNK};
