use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const OOV: u32 = 2;
pub const RESERVED: usize = 3;

const RESERVED_NAMES: [&str; RESERVED] = ["<pad>", "<eos>", "<oov>"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Words separated by Unicode whitespace.
    #[default]
    Whitespace,
    /// One token per non-whitespace character.
    Char,
}

impl Tokenizer {
    pub fn tokenize(self, line: &str) -> Vec<&str> {
        match self {
            Tokenizer::Whitespace => line.split_whitespace().collect(),
            Tokenizer::Char => line
                .char_indices()
                .filter(|(_, c)| !c.is_whitespace())
                .map(|(i, c)| &line[i..i + c.len_utf8()])
                .collect(),
        }
    }
}

impl FromStr for Tokenizer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "whitespace" => Ok(Tokenizer::Whitespace),
            "char" => Ok(Tokenizer::Char),
            _ => Err(format!("unknown tokenizer {s:?} (expected whitespace or char)")),
        }
    }
}

impl fmt::Display for Tokenizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tokenizer::Whitespace => "whitespace",
            Tokenizer::Char => "char",
        })
    }
}

/// Token ↔ id mapping with `PAD = 0`, `EOS = 1`, `OOV = 2` reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    tokenizer: Tokenizer,
}

impl Vocab {
    /// Keeps the `max_size - 3` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        tokenizer: Tokenizer,
    ) -> Result<Self, DataError> {
        if max_size <= RESERVED {
            return Err(DataError::InvalidArgument(format!("vocabulary size {max_size} must exceed {RESERVED}")));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        for line in lines {
            for tok in tokenizer.tokenize(line) {
                *freq.entry(tok).or_default() += 1;
            }
        }
        if freq.is_empty() {
            return Err(DataError::NoTokens);
        }
        let mut ranked: Vec<(&str, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED);

        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
        Ok(Self::from_tokens(tokens, tokenizer))
    }

    fn from_tokens(tokens: Vec<String>, tokenizer: Tokenizer) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .skip(RESERVED)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index, tokenizer }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED..]
    }

    /// Ids for `line`, EOS-terminated, truncated and padded to `max_seq_len`.
    /// A truncated sequence loses its EOS.
    pub fn encode(&self, line: &str, max_seq_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .tokenizer
            .tokenize(line)
            .into_iter()
            .map(|t| self.id(t).unwrap_or(OOV))
            .collect();
        ids.push(EOS);
        ids.truncate(max_seq_len);
        ids.resize(max_seq_len, PAD);
        ids
    }

    /// Tokens up to the first EOS/PAD; OOV ids decode to `<oov>`.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|id| **id != EOS && **id != PAD)
            .map(|id| self.token(*id).unwrap_or(RESERVED_NAMES[OOV as usize]).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_order() {
        let v = Vocab::build(["a a b"], 5, Tokenizer::Whitespace).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.words(), &["a".to_string(), "b".to_string()]);
        assert_eq!(v.id("a"), Some(3));
    }

    #[test]
    fn size_four_keeps_the_most_frequent() {
        let v = Vocab::build(["b a a"], 4, Tokenizer::Whitespace).unwrap();
        assert_eq!(v.words(), &["a".to_string()]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = Vocab::build(["b a"], 4, Tokenizer::Whitespace).unwrap();
        assert_eq!(v.words(), &["a".to_string()]);
    }

    #[test]
    fn build_errors() {
        assert!(matches!(Vocab::build(["  "], 5, Tokenizer::Whitespace), Err(DataError::NoTokens)));
        assert!(Vocab::build(["a"], 3, Tokenizer::Whitespace).is_err());
    }

    #[test]
    fn encode_pads_truncates_and_marks_oov() {
        let v = Vocab::build(["a b"], 10, Tokenizer::Whitespace).unwrap();
        let (a, b) = (v.id("a").unwrap(), v.id("b").unwrap());
        assert_eq!(v.encode("a b", 5), vec![a, b, EOS, PAD, PAD]);
        assert_eq!(v.encode("a zzz", 4), vec![a, OOV, EOS, PAD]);
        let long = vec!["a"; 25].join(" ");
        assert_eq!(v.encode(&long, 20), vec![a; 20]);
    }

    #[test]
    fn char_tokenizer() {
        let v = Vocab::build(["ab a"], 10, Tokenizer::Char).unwrap();
        assert_eq!(v.words(), &["a".to_string(), "b".to_string()]);
        assert_eq!(v.encode("ba", 4), vec![4, 3, EOS, PAD]);
    }

    proptest! {
        #[test]
        fn encode_shape_and_roundtrip(words in prop::collection::vec("[a-e]{1,3}", 0..30), max in 2usize..24) {
            let line = words.join(" ");
            let v = Vocab::build(["a b c d e aa bb"], 8, Tokenizer::Whitespace).unwrap();
            let ids = v.encode(&line, max);
            prop_assert_eq!(ids.len(), max);
            prop_assert!(ids.iter().filter(|i| **i == EOS).count() <= 1);
            let decoded = v.decode(&ids);
            let expected: Vec<String> = words
                .iter()
                .take(max)
                .map(|w| if v.id(w).is_some() { w.clone() } else { "<oov>".to_string() })
                .collect();
            prop_assert_eq!(decoded, expected);
        }
    }
}
