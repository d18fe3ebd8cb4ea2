use crate::error::{FanError, Result};

/// Ordered character classes plus an end-of-sequence class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
}

pub const DEFAULT_CHARS: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

impl Default for Alphabet {
    /// 10 digits, 26 caseless letters, EOS: 37 classes.
    fn default() -> Self {
        Alphabet::new(DEFAULT_CHARS).expect("default alphabet is valid")
    }
}

impl Alphabet {
    pub fn new(chars: &str) -> Result<Self> {
        let chars: Vec<char> = chars.chars().map(|c| c.to_ascii_uppercase()).collect();
        if chars.is_empty() {
            return Err(FanError::invalid("alphabet must contain at least one character"));
        }
        for (i, c) in chars.iter().enumerate() {
            if chars[..i].contains(c) || c.is_whitespace() {
                return Err(FanError::invalid(format!("alphabet character {c:?} repeated or blank")));
            }
        }
        Ok(Alphabet { chars })
    }

    /// Number of classes, EOS included.
    pub fn len(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> usize {
        self.chars.len()
    }

    pub fn chars(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn class_of(&self, c: char) -> Option<usize> {
        let c = c.to_ascii_uppercase();
        self.chars.iter().position(|&x| x == c)
    }

    pub fn char_of(&self, class: usize) -> Option<char> {
        self.chars.get(class).copied()
    }

    /// Class ids of `text` (case-insensitive), without EOS.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.class_of(c)
                    .ok_or_else(|| FanError::invalid(format!("character {c:?} not in alphabet")))
            })
            .collect()
    }

    /// Class ids of `text` followed by EOS.
    pub fn encode_with_eos(&self, text: &str) -> Result<Vec<usize>> {
        let mut v = self.encode(text)?;
        v.push(self.eos());
        Ok(v)
    }

    /// Text of the classes up to the first EOS.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes
            .iter()
            .take_while(|&&c| c != self.eos())
            .filter_map(|&c| self.char_of(c))
            .collect()
    }
}
