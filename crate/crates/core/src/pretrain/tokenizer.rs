use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Whitespace word tokenizer over a closed vocabulary. Ids 0 and 1 are the
/// padding and unknown tokens; words get ids in sorted order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.words
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Tokenizer {
    pub fn fit<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let vocab: BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        Self::from_words(vocab.into_iter().collect())
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i + 2)).collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len() + 2
    }

    /// Token ids, truncated to `max_len` with a warning. Empty text maps to
    /// a lone unknown token so every sequence has at least one position.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = words(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect();
        if ids.len() > max_len {
            log::warn!("caption of {} tokens truncated to {max_len}", ids.len());
            ids.truncate(max_len);
        }
        if ids.is_empty() {
            ids.push(UNK);
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_sorted_and_unknowns_map_to_unk() {
        let tok = Tokenizer::fit(["b a", "c, A!"]);
        assert_eq!(tok.words(), ["a", "b", "c"]);
        assert_eq!(tok.vocab_size(), 5);
        assert_eq!(tok.encode("A zebra c", 10), vec![2, UNK, 4]);
    }

    #[test]
    fn truncates_and_never_returns_empty() {
        let tok = Tokenizer::fit(["a b c"]);
        assert_eq!(tok.encode("a b c a", 2), vec![2, 3]);
        assert_eq!(tok.encode("", 2), vec![UNK]);
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let tok = Tokenizer::fit(["x y"]);
        let back: Tokenizer = serde_json::from_str(&serde_json::to_string(&tok).unwrap()).unwrap();
        assert_eq!(back, tok);
    }
}
