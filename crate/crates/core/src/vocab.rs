//! Tokenizer and word/id vocabulary.
//!
//! Ids 0, 1 and 2 are reserved for the start marker, the stop marker and the
//! out-of-vocabulary token. Ordinary words follow from id 3 in first-appearance
//! order.

use std::collections::HashMap;

use crate::error::{ensure, Result};

pub const START: usize = 0;
pub const STOP: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: usize = 3;

pub const START_WORD: &str = "<start>";
pub const STOP_WORD: &str = "<stop>";
pub const UNK_WORD: &str = "<unk>";

/// Lowercases, splits on whitespace and strips leading and trailing ASCII
/// punctuation (`char::is_ascii_punctuation`) from every piece. Pieces that end
/// up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|piece| {
            piece
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from ordinary words, which receive ids 3, 4, ... in
    /// the given order. Duplicates and reserved surface forms are rejected.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: vec![START_WORD.into(), STOP_WORD.into(), UNK_WORD.into()],
            index: HashMap::new(),
        };
        for w in words {
            let w = w.into();
            ensure!(!w.is_empty(), "vocabulary words must be non-empty");
            ensure!(
                ![START_WORD, STOP_WORD, UNK_WORD].contains(&w.as_str()),
                "{w:?} is a reserved token"
            );
            ensure!(!vocab.index.contains_key(&w), "duplicate vocabulary word {w:?}");
            vocab.index.insert(w.clone(), vocab.words.len());
            vocab.words.push(w);
        }
        Ok(vocab)
    }

    /// Vocabulary size including the reserved ids.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `word`, or `UNK` when absent.
    pub fn lookup(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Ordinary words in id order (ids 3..V).
    pub fn ordinary_words(&self) -> &[String] {
        &self.words[RESERVED..]
    }

    /// Surface forms for `ids`, dropping start/stop markers.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != START && id != STOP)
            .map(|&id| self.word(id).unwrap_or(UNK_WORD).to_string())
            .collect()
    }
}

/// Words with at least `min_count` occurrences, in order of first appearance.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    ensure!(min_count >= 1, "min_count must be at least 1");
    ensure!(
        corpus.iter().any(|c| !c.is_empty()),
        "cannot build a vocabulary from an empty corpus"
    );
    let mut order: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tok in corpus.iter().flatten() {
        let tok = tok.as_ref();
        let n = counts.entry(tok).or_insert(0);
        if *n == 0 {
            order.push(tok);
        }
        *n += 1;
    }
    Vocabulary::from_words(
        order
            .into_iter()
            .filter(|w| counts[w] >= min_count)
            .filter(|w| ![START_WORD, STOP_WORD, UNK_WORD].contains(w)),
    )
}

/// `[START] + ids + [STOP]`, mapping unknown words to `UNK`.
pub fn encode_caption<S: AsRef<str>>(vocab: &Vocabulary, tokens: &[S]) -> Vec<usize> {
    let mut ids = Vec::with_capacity(tokens.len() + 2);
    ids.push(START);
    ids.extend(tokens.iter().map(|t| vocab.lookup(t.as_ref())));
    ids.push(STOP);
    ids
}
