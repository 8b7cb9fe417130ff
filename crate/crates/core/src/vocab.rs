//! Word-level vocabulary with reserved special tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary { words, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words
    }
}

impl Vocabulary {
    /// Special tokens followed by `words` in order, skipping duplicates.
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !all.contains(&w) {
                all.push(w);
            }
        }
        Vocabulary::from(all)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Lowercases, splits on whitespace, maps words to ids (UNK when
    /// unknown) and wraps the result in BOS/EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(text.split_whitespace().map(|w| self.id(&w.to_lowercase())));
        ids.push(EOS);
        ids
    }

    /// Drops PAD/BOS/EOS and joins the remaining words with single spaces.
    /// Ids outside the vocabulary render as the UNK surface form.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
