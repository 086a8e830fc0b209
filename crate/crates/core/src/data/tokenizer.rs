//! Character tokenizer over `a-z`, `0-9` and space.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const VOCAB_SIZE: usize = 41;

const FIRST_CHAR_ID: usize = 4;
const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789 ";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn alphabet() -> &'static str {
        ALPHABET
    }

    pub fn char_id(c: char) -> Option<usize> {
        match c {
            'a'..='z' => Some(FIRST_CHAR_ID + (c as usize - 'a' as usize)),
            '0'..='9' => Some(FIRST_CHAR_ID + 26 + (c as usize - '0' as usize)),
            ' ' => Some(FIRST_CHAR_ID + 36),
            _ => None,
        }
    }

    pub fn id_char(id: usize) -> Option<char> {
        ALPHABET.chars().nth(id.checked_sub(FIRST_CHAR_ID)?)
    }

    /// Strict encoding: any character outside the alphabet is an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| Self::char_id(c).ok_or(Error::Encoding(c)))
            .collect()
    }

    /// Lowercases, then maps anything outside the alphabet to `UNK`.
    /// Used for fixed instruction prompts.
    pub fn encode_lossy(&self, text: &str) -> Vec<usize> {
        text.chars()
            .flat_map(char::to_lowercase)
            .map(|c| Self::char_id(c).unwrap_or(UNK))
            .collect()
    }

    /// Decodes character ids; special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&id| Self::id_char(id)).collect()
    }

    pub fn validate(text: &str) -> Result<()> {
        match text.chars().find(|&c| Self::char_id(c).is_none()) {
            Some(c) => Err(Error::Encoding(c)),
            None => Ok(()),
        }
    }
}
