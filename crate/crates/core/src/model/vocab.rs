use std::fmt;

use crate::error::{Error, Result};

pub type TokenId = u32;

const FIRST_CHAR: u8 = 32;
const LAST_CHAR: u8 = 126;
const N_CHARS: u32 = (LAST_CHAR - FIRST_CHAR + 1) as u32;

/// Printable ASCII (codes 32–126) followed by the three special tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary;

impl Vocabulary {
    pub const BOS: TokenId = N_CHARS;
    pub const EOS: TokenId = N_CHARS + 1;
    pub const PAD: TokenId = N_CHARS + 2;
    pub const SIZE: usize = N_CHARS as usize + 3;

    pub fn size(&self) -> usize {
        Self::SIZE
    }

    pub fn id(&self, ch: char) -> Option<TokenId> {
        let c = ch as u32;
        (FIRST_CHAR as u32..=LAST_CHAR as u32)
            .contains(&c)
            .then(|| c - FIRST_CHAR as u32)
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        text.chars()
            .enumerate()
            .map(|(offset, ch)| self.id(ch).ok_or(Error::Encoding { ch, offset }))
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    /// Skips BOS and PAD; stops at the first EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                Self::EOS => break,
                Self::BOS | Self::PAD => {}
                c if c < N_CHARS => out.push((c as u8 + FIRST_CHAR) as char),
                _ => {}
            }
        }
        out
    }

    pub fn token_str(&self, id: TokenId) -> String {
        match id {
            Self::BOS => "<bos>".into(),
            Self::EOS => "<eos>".into(),
            Self::PAD => "<pad>".into(),
            c => self.decode(&[c]),
        }
    }
}

/// Token ids over [`Vocabulary`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with_eos(mut self) -> Self {
        self.0.push(Vocabulary::EOS);
        self
    }

    pub fn ends_with_eos(&self) -> bool {
        self.0.last() == Some(&Vocabulary::EOS)
    }

    pub fn starts_with(&self, other: &TokenSequence) -> bool {
        self.0.starts_with(&other.0)
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&id| (id as usize) < Vocabulary::SIZE)
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = Vocabulary;
        for &id in &self.0 {
            f.write_str(&v.token_str(id))?;
        }
        Ok(())
    }
}
