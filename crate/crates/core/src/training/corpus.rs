//! Character-level tokenizer and the synthetic context-switch corpus.

use std::collections::{BTreeSet, HashMap};

use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Maps each distinct character of a text to a token id (sorted order).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharTokenizer {
    alphabet: Vec<char>,
    index: HashMap<char, u32>,
}

impl CharTokenizer {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self::from_chars(set.into_iter().collect())
    }

    /// Rebuilds a tokenizer from [`CharTokenizer::alphabet`] output.
    pub fn from_alphabet(alphabet: &str) -> Result<Self> {
        let chars: Vec<char> = alphabet.chars().collect();
        let set: BTreeSet<char> = chars.iter().copied().collect();
        if set.len() != chars.len() {
            return Err(Error::Config("tokenizer alphabet has duplicate characters".into()));
        }
        Ok(Self::from_chars(chars))
    }

    fn from_chars(alphabet: Vec<char>) -> Self {
        let index = alphabet.iter().enumerate().map(|(i, &c)| (c, i as u32)).collect();
        Self { alphabet, index }
    }

    pub fn alphabet(&self) -> String {
        self.alphabet.iter().collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.alphabet.len()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("character {c:?} not in tokenizer alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|&t| self.alphabet.get(t as usize).copied().unwrap_or('\u{fffd}'))
            .collect()
    }
}

const NAMES: &[&str] = &[
    "alice", "bruno", "carla", "dmitri", "elena", "farid", "greta", "hiro", "ines", "jonas", "kofi", "lena", "marco",
    "nadia", "oscar", "priya", "quinn", "rosa", "sven", "tariq",
];
const COLORS: &[&str] = &[
    "red", "blue", "green", "amber", "violet", "silver", "black", "white", "orange", "teal", "pink", "brown",
];
const OBJECTS: &[&str] = &[
    "lamp", "kite", "boat", "drum", "vase", "coat", "bike", "clock", "book", "ring", "chair", "scarf",
];
const TEMPLATES: &[&str] = &[
    "{n} has a {c} {o}. ",
    "the {o} of {n} is {c}. ",
    "{n} painted the {o} {c}. ",
    "every day {n} cleans the {c} {o}. ",
    "{n} keeps the {c} {o} at home. ",
    "nobody else owns a {c} {o} like {n}. ",
    "{n} said the {o} was always {c}. ",
];

/// Text made of short segments. Each segment repeats one name, colour and
/// object across templated sentences and ends with a newline, after which
/// the previous segment is irrelevant.
pub fn synthetic_context_switch(seed: u64, n_chars: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_chars + 128);
    while out.len() < n_chars {
        let name = NAMES.choose(&mut rng).expect("non-empty");
        let color = COLORS.choose(&mut rng).expect("non-empty");
        let object = OBJECTS.choose(&mut rng).expect("non-empty");
        let sentences = rng.random_range(3..=6);
        for _ in 0..sentences {
            let t = TEMPLATES.choose(&mut rng).expect("non-empty");
            out.push_str(&t.replace("{n}", name).replace("{c}", color).replace("{o}", object));
        }
        out.pop();
        out.push('\n');
    }
    out.truncate(n_chars);
    out
}

/// Tokenized text split into a training prefix and a held-out suffix.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub tokenizer: CharTokenizer,
    pub train: Vec<u32>,
    pub held_out: Vec<u32>,
}

impl Corpus {
    pub fn from_text(text: &str, held_out_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::Config(format!("held-out fraction {held_out_fraction} not in [0, 1)")));
        }
        let tokenizer = CharTokenizer::from_text(text);
        let tokens = tokenizer.encode(text)?;
        let split = tokens.len() - (tokens.len() as f64 * held_out_fraction) as usize;
        let held_out = tokens[split..].to_vec();
        let mut train = tokens;
        train.truncate(split);
        Ok(Self {
            tokenizer,
            train,
            held_out,
        })
    }

    pub fn synthetic(seed: u64, n_chars: usize) -> Self {
        Self::from_text(&synthetic_context_switch(seed, n_chars), 0.1).expect("valid fraction")
    }

    pub fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    /// `batch` random training windows of `len` tokens.
    pub fn sample_batch(&self, rng: &mut ChaCha8Rng, batch: usize, len: usize) -> Result<Vec<Vec<u32>>> {
        if self.train.len() < len {
            return Err(Error::Config(format!(
                "training split has {} tokens, need at least {len}",
                self.train.len()
            )));
        }
        Ok((0..batch)
            .map(|_| {
                let start = rng.random_range(0..=self.train.len() - len);
                self.train[start..start + len].to_vec()
            })
            .collect())
    }

    /// Up to `max_windows` consecutive non-overlapping held-out windows.
    pub fn held_out_windows(&self, len: usize, max_windows: usize) -> Vec<Vec<u32>> {
        self.held_out.chunks_exact(len).take(max_windows).map(<[u32]>::to_vec).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_round_trip() {
        let tok = CharTokenizer::from_text("hello world\n");
        assert_eq!(tok.vocab_size(), 9);
        let ids = tok.encode("low\nheld").unwrap();
        assert_eq!(tok.decode(&ids), "low\nheld");
        assert!(tok.encode("z").is_err());
        let again = CharTokenizer::from_alphabet(&tok.alphabet()).unwrap();
        assert_eq!(again, tok);
    }

    #[test]
    fn synthetic_corpus_is_seeded_and_segmented() {
        let a = synthetic_context_switch(5, 2000);
        assert_eq!(a, synthetic_context_switch(5, 2000));
        assert_ne!(a, synthetic_context_switch(6, 2000));
        assert_eq!(a.len(), 2000);
        let first = a.lines().next().unwrap();
        let name = NAMES.iter().find(|n| first.contains(*n)).unwrap();
        assert!(first.matches(name).count() >= 3);
    }

    #[test]
    fn split_and_windows() {
        let c = Corpus::synthetic(1, 5000);
        assert_eq!(c.train.len() + c.held_out.len(), 5000);
        assert_eq!(c.held_out.len(), 500);
        let w = c.held_out_windows(64, 100);
        assert_eq!(w.len(), 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = c.sample_batch(&mut rng, 3, 32).unwrap();
        assert!(b.iter().all(|r| r.len() == 32));
        assert!(c.sample_batch(&mut rng, 1, 10_000).is_err());
    }
}
