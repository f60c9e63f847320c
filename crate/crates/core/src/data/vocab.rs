use std::collections::HashMap;

use crate::encoders::{PAD_ID, UNK_ID};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Word-level vocabulary. Ids are dense; 0 is padding, 1 is unknown, and
/// the rest follow first appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose non-reserved ids are assigned to `words`
    /// in order, skipping duplicates and reserved tokens.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self {
            words: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        v.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        v.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::default();
        for t in texts {
            for w in split_words(t) {
                v.insert(&w);
            }
        }
        v
    }

    fn insert(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_string(), self.words.len() as u32);
            self.words.push(word.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// All words indexed by id, including the two reserved entries.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Inverse of [`Vocabulary::words`].
    pub fn from_table(words: &[String]) -> Option<Self> {
        if words.len() < 2 || words[0] != PAD_TOKEN || words[1] != UNK_TOKEN {
            return None;
        }
        let v = Self::from_words(&words[2..]);
        (v.len() == words.len()).then_some(v)
    }
}

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    split_words(text)
        .iter()
        .take(max_len)
        .map(|w| vocab.id(w))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_mapping() {
        let v = Vocabulary::from_words(["blue", "crown"]);
        assert_eq!(v.id("blue"), 2);
        assert_eq!(v.id("crown"), 3);
        assert_eq!(tokenize("Blue crown.", &v, 32), vec![2, 3]);
        assert_eq!(tokenize("wingspan", &v, 32), vec![1]);
    }

    #[test]
    fn truncation() {
        let text = vec!["blue"; 40].join(" ");
        let v = Vocabulary::from_words(["blue"]);
        assert_eq!(tokenize(&text, &v, 32).len(), 32);
    }

    #[test]
    fn punctuation_splits() {
        assert_eq!(
            split_words("red-crest,black   wing!"),
            vec!["red", "crest", "black", "wing"]
        );
    }

    #[test]
    fn table_round_trip() {
        let v = Vocabulary::build(["a small bird", "a red bird"]);
        assert_eq!(v.words(), &["<pad>", "<unk>", "a", "small", "bird", "red"]);
        assert_eq!(Vocabulary::from_table(v.words()).unwrap(), v);
        assert!(Vocabulary::from_table(&["x".to_string()]).is_none());
        let dup: Vec<String> = ["<pad>", "<unk>", "a", "a"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert!(Vocabulary::from_table(&dup).is_none());
    }
}
