//! Sentence store with word counts and an inverted word → sentence index.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Sentence = Vec<String>;

pub struct Corpus {
    sentences: Vec<Sentence>,
    freq: HashMap<String, u32>,
    index: HashMap<String, Vec<u32>>,
}

impl Corpus {
    /// Read a UTF-8 text file, one whitespace-tokenized sentence per line.
    pub fn ingest(path: &Path, lowercase: bool) -> Result<Self> {
        let raw = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let sentences: Vec<Sentence> = raw
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
                    .collect()
            })
            .collect();
        if sentences.is_empty() {
            return Err(Error::domain(format!("{}: empty corpus", path.display())));
        }
        Ok(Self::from_sentences(sentences))
    }

    pub fn from_sentences(sentences: Vec<Sentence>) -> Self {
        let mut freq: HashMap<String, u32> = HashMap::new();
        let mut index: HashMap<String, Vec<u32>> = HashMap::new();
        for (sid, sentence) in sentences.iter().enumerate() {
            let mut seen: HashSet<&str> = HashSet::new();
            for word in sentence {
                *freq.entry(word.clone()).or_insert(0) += 1;
                if seen.insert(word) {
                    index.entry(word.clone()).or_default().push(sid as u32);
                }
            }
        }
        Corpus {
            sentences,
            freq,
            index,
        }
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn frequency(&self, word: &str) -> u32 {
        self.freq.get(word).copied().unwrap_or(0)
    }

    pub fn sentence_ids_with(&self, word: &str) -> &[u32] {
        self.index.get(word).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Word types sorted by descending count, ties broken lexicographically.
    pub fn types_by_frequency(&self) -> Vec<(&str, u32)> {
        let mut types: Vec<(&str, u32)> = self.freq.iter().map(|(w, &c)| (w.as_str(), c)).collect();
        types.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        types
    }

    /// Every character appearing in any word.
    pub fn alphabet(&self) -> Vec<char> {
        let mut chars: Vec<char> = self
            .freq
            .keys()
            .flat_map(|w| w.chars())
            .collect::<std::collections::BTreeSet<char>>()
            .into_iter()
            .collect();
        chars.sort_unstable();
        chars
    }
}

/// Frequency band of a word count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bucket {
    Rare,
    Medium,
    Frequent,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bucket::Rare => write!(f, "rare"),
            Bucket::Medium => write!(f, "medium"),
            Bucket::Frequent => write!(f, "frequent"),
        }
    }
}

pub const RARE_BELOW: u32 = 10;
pub const MEDIUM_BELOW: u32 = 100;

/// Half-open bands: rare `[0,10)`, medium `[10,100)`, frequent `[100,∞)`.
pub fn frequency_bucket(count: u32) -> Bucket {
    if count < RARE_BELOW {
        Bucket::Rare
    } else if count < MEDIUM_BELOW {
        Bucket::Medium
    } else {
        Bucket::Frequent
    }
}

/// All corpus sentences containing `word` (deduplicated by content), plus any
/// `extra` sentences that contain it. Over `max_contexts`, a seeded uniform
/// subsample is taken, preserving original order.
pub fn collect_contexts(
    word: &str,
    corpus: &Corpus,
    max_contexts: usize,
    extra: &[Sentence],
    seed: u64,
) -> Vec<Sentence> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut out: Vec<Sentence> = Vec::new();
    for &sid in corpus.sentence_ids_with(word) {
        let sentence = &corpus.sentences[sid as usize];
        if seen.insert(sentence.join(" ")) {
            out.push(sentence.clone());
        }
    }
    for sentence in extra {
        if sentence.iter().any(|w| w == word) && seen.insert(sentence.join(" ")) {
            out.push(sentence.clone());
        }
    }
    if out.len() > max_contexts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..out.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(max_contexts);
        idx.sort_unstable();
        out = idx.into_iter().map(|i| out[i].clone()).collect();
    }
    out
}
