//! Wordpiece vocabulary with greedy longest-match tokenization.
//!
//! The inventory is corpus-driven: words above a count threshold become whole
//! tokens, every corpus character is kept both as a word-initial piece and as
//! a "##" continuation piece (so tokenization never needs an unknown token),
//! and the remaining budget goes to frequent prefixes / continuation
//! fragments.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::text::corpus::Corpus;
use crate::util::{sha256_hex, write_atomic};

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const COLON: &str = ":";
pub const SLASH: &str = "/";

pub const SPECIALS: [&str; 6] = [PAD, CLS, SEP, MASK, COLON, SLASH];

const CONT: &str = "##";

#[derive(Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from a token list; ids are list positions. Each special must
    /// appear exactly once.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::domain(format!("duplicate token '{t}' in vocabulary")));
            }
        }
        for s in SPECIALS {
            if !ids.contains_key(s) {
                return Err(Error::domain(format!("vocabulary is missing special {s}")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Corpus-driven construction. Words seen at least `min_whole_word_freq`
    /// times become whole tokens (by count, ties lexicographic); the rest of
    /// the budget is filled with frequent word prefixes and "##" fragments.
    pub fn build(corpus: &Corpus, target_size: usize, min_whole_word_freq: u32) -> Result<Self> {
        let alphabet = corpus.alphabet();
        let floor = SPECIALS.len() + 2 * alphabet.len();
        if target_size < floor {
            return Err(Error::domain(format!(
                "target_size {target_size} below minimum {floor} (specials plus alphabet fallback pieces)"
            )));
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut have: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
        let push = |tokens: &mut Vec<String>, have: &mut HashMap<String, ()>, t: String| {
            if !have.contains_key(&t) {
                have.insert(t.clone(), ());
                tokens.push(t);
            }
        };
        for &c in &alphabet {
            push(&mut tokens, &mut have, c.to_string());
        }
        for &c in &alphabet {
            push(&mut tokens, &mut have, format!("{CONT}{c}"));
        }

        let types = corpus.types_by_frequency();
        for (word, count) in &types {
            if *count >= min_whole_word_freq {
                if tokens.len() >= target_size {
                    break;
                }
                push(&mut tokens, &mut have, (*word).to_string());
            }
        }

        // fragment candidates weighted by the counts of the words they occur in
        let mut weights: BTreeMap<String, u64> = BTreeMap::new();
        for (word, count) in &types {
            let chars: Vec<char> = word.chars().collect();
            let len = chars.len();
            for l in 1..len {
                let prefix: String = chars[..l].iter().collect();
                *weights.entry(prefix).or_insert(0) += u64::from(*count);
            }
            for start in 1..len {
                for l in 1..=(len - start) {
                    let frag: String =
                        format!("{CONT}{}", chars[start..start + l].iter().collect::<String>());
                    *weights.entry(frag).or_insert(0) += u64::from(*count);
                }
            }
        }
        let mut frags: Vec<(String, u64)> = weights.into_iter().collect();
        frags.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (frag, _) in frags {
            if tokens.len() >= target_size {
                break;
            }
            push(&mut tokens, &mut have, frag);
        }

        Vocabulary::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        self.ids[PAD]
    }
    pub fn cls_id(&self) -> u32 {
        self.ids[CLS]
    }
    pub fn sep_id(&self) -> u32 {
        self.ids[SEP]
    }
    pub fn mask_id(&self) -> u32 {
        self.ids[MASK]
    }
    pub fn colon_id(&self) -> u32 {
        self.ids[COLON]
    }
    pub fn slash_id(&self) -> u32 {
        self.ids[SLASH]
    }

    pub fn is_special_id(&self, id: u32) -> bool {
        SPECIALS.contains(&self.token(id))
    }

    /// Greedy longest-match wordpieces of one word. Special token strings map
    /// to their own id. Characters outside the inventory are skipped, so the
    /// function is total; it returns an empty list only if nothing matched.
    pub fn tokenize_word(&self, word: &str) -> Vec<u32> {
        if let Some(&id) = self.ids.get(word) {
            if SPECIALS.contains(&word) {
                return vec![id];
            }
        }
        let chars: Vec<char> = word.chars().collect();
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < chars.len() {
            let mut matched = None;
            let mut end = chars.len();
            while end > pos {
                let piece: String = if pos == 0 {
                    chars[pos..end].iter().collect()
                } else {
                    format!("{CONT}{}", chars[pos..end].iter().collect::<String>())
                };
                if let Some(&id) = self.ids.get(&piece) {
                    matched = Some((id, end));
                    break;
                }
                end -= 1;
            }
            match matched {
                Some((id, end)) => {
                    out.push(id);
                    pos = end;
                }
                None => {
                    // unknown character: drop it and continue
                    pos += 1;
                }
            }
        }
        out
    }

    /// Wordpieces of a word sequence plus the id-span of each word.
    pub fn tokenize_words_with_spans(&self, words: &[String]) -> (Vec<u32>, Vec<(usize, usize)>) {
        let mut ids = Vec::new();
        let mut spans = Vec::with_capacity(words.len());
        for w in words {
            let start = ids.len();
            ids.extend(self.tokenize_word(w));
            spans.push((start, ids.len()));
        }
        (ids, spans)
    }

    pub fn tokenize_words(&self, words: &[String]) -> Vec<u32> {
        self.tokenize_words_with_spans(words).0
    }

    /// Whitespace-split then wordpiece.
    pub fn tokenize_text(&self, text: &str) -> Vec<u32> {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        self.tokenize_words(&words)
    }

    /// `[CLS] pieces [SEP]`.
    pub fn encode_sentence(&self, words: &[String]) -> Vec<u32> {
        let mut out = vec![self.cls_id()];
        out.extend(self.tokenize_words(words));
        out.push(self.sep_id());
        out
    }

    /// Reassemble a word from pieces by stripping continuation markers.
    pub fn detokenize_word(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id);
            out.push_str(t.strip_prefix(CONT).unwrap_or(t));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens {
            body.push_str(t);
            body.push('\n');
        }
        write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let tokens: Vec<String> = raw.lines().map(str::to_string).collect();
        Vocabulary::from_tokens(tokens)
    }

    /// Content hash used to pair checkpoints with the vocabulary they assume.
    pub fn content_hash(&self) -> String {
        sha256_hex(self.tokens.join("\n").as_bytes())
    }
}
