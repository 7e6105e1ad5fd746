//! Word-level tokenizer with a corpus-built vocabulary.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
}

impl Vocabulary {
    /// Builds a sorted vocabulary from every word appearing in `expressions`.
    pub fn build<'a>(expressions: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = expressions.into_iter().flat_map(split_words).collect();
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        words.extend(set);
        Self { words }
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != PAD || words[1] != UNK {
            return Err(Error::Config("vocabulary must start with <pad>, <unk>".into()));
        }
        if words[2..].windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::Config("vocabulary words must be sorted and unique".into()));
        }
        Ok(Self { words })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 2
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> u32 {
        // Index 0..2 are the special tokens, the rest is sorted.
        match self.words[2..].binary_search_by(|w| w.as_str().cmp(word)) {
            Ok(i) => (i + 2) as u32,
            Err(_) => UNK_ID,
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Self::from_words(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

/// Token ids padded to a fixed length, with a validity mask (`true` = real token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn split_words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Lowercases, splits on anything that is not alphanumeric, maps unknown words to UNK, and
/// truncates or pads to `max_len`.
pub fn tokenize_text(expression: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenizedText> {
    let words = split_words(expression);
    if words.is_empty() {
        return Err(Error::EmptyExpression);
    }
    let mut ids: Vec<u32> = words.iter().take(max_len).map(|w| vocab.id(w)).collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD_ID);
    mask.resize(max_len, false);
    Ok(TokenizedText { ids, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["the red circle", "The blue square, left of the circle"])
    }

    #[test]
    fn known_words() {
        let v = vocab();
        let t = tokenize_text("the red circle", &v, 20).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.ids.len(), 20);
        assert!(t.ids[..3].iter().all(|&id| id > UNK_ID));
        assert!(t.ids[3..].iter().all(|&id| id == PAD_ID));
        assert_eq!(t.mask.iter().filter(|m| !**m).count(), 17);
    }

    #[test]
    fn unknown_and_case() {
        let v = vocab();
        let t = tokenize_text("THE Green Circle!", &v, 5).unwrap();
        assert_eq!(t.ids[0], v.id("the"));
        assert_eq!(t.ids[1], UNK_ID);
        assert_eq!(t.ids[2], v.id("circle"));
    }

    #[test]
    fn empty_expression() {
        assert!(matches!(tokenize_text("", &vocab(), 20), Err(Error::EmptyExpression)));
        assert!(matches!(tokenize_text(" ,. ", &vocab(), 20), Err(Error::EmptyExpression)));
    }

    #[test]
    fn truncates_long_sentences() {
        let sentence = (0..25).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let t = tokenize_text(&sentence, &vocab(), 20).unwrap();
        assert_eq!(t.ids.len(), 20);
        assert_eq!(t.len(), 20);
    }

    #[test]
    fn serde_round_trip() {
        let v = vocab();
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_words(vec!["a".into()]).is_err());
    }
}
