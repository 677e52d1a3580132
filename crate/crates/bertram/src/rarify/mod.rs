//! Dataset rarification: split a labeled dataset, finetune a baseline
//! classifier, then rewrite test candidates so that rare synonyms of
//! decision-critical words are required for a correct prediction.
//!
//! Word selection is a greedy masking loop: at each step the not-yet-masked
//! substitutable position whose masking drops the gold-label probability the
//! most is masked; once the prediction flips, every masked position receives
//! a random rare synonym. The classifier is never shown a synonym during
//! selection.

pub mod classifier;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::vocab::MASK;
use crate::text::Corpus;
use crate::util::{mix_seed, write_atomic};

pub use classifier::{augment_words, AugmentStats, BaselineClassifier, FinetuneConfig, FinetuneStats};

// ── data ─────────────────────────────────────────────────────────────

/// A labeled text (or text-pair) instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub text: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_b: Option<Vec<String>>,
    pub label: usize,
}

impl Instance {
    /// Total word positions; pair instances index the second segment after
    /// the first.
    pub fn word_count(&self) -> usize {
        self.text.len() + self.text_b.as_ref().map_or(0, Vec::len)
    }

    pub fn word_at(&self, pos: usize) -> Result<&str> {
        if pos < self.text.len() {
            Ok(&self.text[pos])
        } else {
            let rel = pos - self.text.len();
            self.text_b
                .as_ref()
                .and_then(|b| b.get(rel))
                .map(String::as_str)
                .ok_or_else(|| {
                    Error::domain(format!(
                        "position {pos} out of range for instance of {} words",
                        self.word_count()
                    ))
                })
        }
    }

    pub fn set_word(&mut self, pos: usize, word: String) -> Result<()> {
        if pos < self.text.len() {
            self.text[pos] = word;
            Ok(())
        } else {
            let rel = pos - self.text.len();
            let len = self.word_count();
            self.text_b
                .as_mut()
                .and_then(|b| b.get_mut(rel))
                .map(|slot| *slot = word)
                .ok_or_else(|| {
                    Error::domain(format!("position {pos} out of range for instance of {len} words"))
                })
        }
    }
}

pub fn load_instances(path: &Path) -> Result<Vec<Instance>> {
    let raw = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: Instance = serde_json::from_str(line)
            .map_err(|e| Error::domain(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_instances(path: &Path, instances: &[Instance]) -> Result<()> {
    let mut body = String::new();
    for inst in instances {
        body.push_str(&serde_json::to_string(inst)?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

// ── substitution lexicon ─────────────────────────────────────────────

/// Source of a substitution set, carried through to evaluation slices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubstitutionKind {
    #[serde(rename = "wn")]
    Synonym,
    #[serde(rename = "msp")]
    Misspelling,
}

impl fmt::Display for SubstitutionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SubstitutionKind::Synonym => write!(f, "wn"),
            SubstitutionKind::Misspelling => write!(f, "msp"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconRecord {
    word: String,
    synonyms: Vec<String>,
    #[serde(default = "default_kind")]
    kind: SubstitutionKind,
}

fn default_kind() -> SubstitutionKind {
    SubstitutionKind::Synonym
}

/// Map from words to rare synonyms. Construction validates the rarity
/// invariant (every synonym occurs fewer than `rarity_threshold` times in
/// the reference corpus) and that no word lists itself.
pub struct SubstitutionLexicon {
    entries: BTreeMap<String, (Vec<String>, SubstitutionKind)>,
    pub rarity_threshold: u32,
}

impl SubstitutionLexicon {
    pub fn from_records(
        records: Vec<(String, Vec<String>, SubstitutionKind)>,
        corpus: &Corpus,
        rarity_threshold: u32,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (word, synonyms, kind) in records {
            if synonyms.iter().any(|s| *s == word) {
                return Err(Error::domain(format!(
                    "lexicon entry '{word}' lists itself as a synonym"
                )));
            }
            for s in &synonyms {
                let freq = corpus.frequency(s);
                if freq >= rarity_threshold {
                    return Err(Error::domain(format!(
                        "synonym '{s}' of '{word}' occurs {freq} times, at or above the rarity threshold {rarity_threshold}"
                    )));
                }
            }
            if !synonyms.is_empty() {
                entries.insert(word, (synonyms, kind));
            }
        }
        Ok(SubstitutionLexicon {
            entries,
            rarity_threshold,
        })
    }

    /// JSON-lines records `{"word": w, "synonyms": [...], "kind"?: "wn"|"msp"}`.
    pub fn load(path: &Path, corpus: &Corpus, rarity_threshold: u32) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (ln, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: LexiconRecord = serde_json::from_str(line)
                .map_err(|e| Error::domain(format!("{}:{}: {e}", path.display(), ln + 1)))?;
            records.push((rec.word, rec.synonyms, rec.kind));
        }
        Self::from_records(records, corpus, rarity_threshold)
    }

    pub fn synonyms(&self, word: &str) -> &[String] {
        self.entries
            .get(word)
            .map(|(s, _)| s.as_slice())
            .unwrap_or(&[])
    }

    pub fn kind(&self, word: &str) -> Option<SubstitutionKind> {
        self.entries.get(word).map(|(_, k)| *k)
    }

    pub fn has(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ── classifier abstraction ───────────────────────────────────────────

/// What the selection loop needs from a classifier: a full distribution
/// over the label set.
pub trait TextClassifier {
    fn num_labels(&self) -> usize;
    fn class_probs(&self, text: &[String], text_b: Option<&[String]>) -> Vec<f32>;
}

pub fn predict(clf: &dyn TextClassifier, text: &[String], text_b: Option<&[String]>) -> usize {
    let probs = clf.class_probs(text, text_b);
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// A linear bag-of-words classifier with explicit per-word weights. Cheap
/// enough for exhaustive selection oracles and pipeline smoke tests; `[MASK]`
/// and unknown words contribute nothing.
pub struct LinearBagClassifier {
    pub weights: BTreeMap<String, Vec<f32>>,
    pub bias: Vec<f32>,
}

impl TextClassifier for LinearBagClassifier {
    fn num_labels(&self) -> usize {
        self.bias.len()
    }

    fn class_probs(&self, text: &[String], text_b: Option<&[String]>) -> Vec<f32> {
        let mut scores = self.bias.clone();
        let mut add = |words: &[String]| {
            for w in words {
                if let Some(ws) = self.weights.get(w) {
                    for (s, x) in scores.iter_mut().zip(ws) {
                        *s += x;
                    }
                }
            }
        };
        add(text);
        if let Some(b) = text_b {
            add(b);
        }
        crate::math::softmax(&scores).expect("non-empty label set")
    }
}

// ── splitting ────────────────────────────────────────────────────────

/// Partition into training indices and test-candidate indices. Candidates
/// are the substitutable instances; if the remainder is smaller than a third
/// of the data, a seeded random subset of the candidates is moved over.
pub fn split_dataset(
    data: &[Instance],
    lexicon: &SubstitutionLexicon,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.len() < 3 {
        return Err(Error::domain(format!(
            "dataset of {} instances is too small to split",
            data.len()
        )));
    }
    let substitutable = |inst: &Instance| {
        (0..inst.word_count()).any(|p| lexicon.has(inst.word_at(p).expect("in range")))
    };
    let mut train: Vec<usize> = Vec::new();
    let mut cand: Vec<usize> = Vec::new();
    for (i, inst) in data.iter().enumerate() {
        if substitutable(inst) {
            cand.push(i);
        } else {
            train.push(i);
        }
    }
    if cand.is_empty() {
        return Err(Error::domain(
            "rarification impossible: no instance contains a substitutable word",
        ));
    }
    let need = data.len().div_ceil(3);
    if train.len() < need {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cand.shuffle(&mut rng);
        while train.len() < need {
            train.push(cand.pop().expect("need < |data| and train+cand = data"));
        }
    }
    train.sort_unstable();
    cand.sort_unstable();
    Ok((train, cand))
}

// ── masking and selection ────────────────────────────────────────────

/// Copy of `x` with the word at `position` replaced by `[MASK]`.
pub fn mask_word(inst: &Instance, position: usize) -> Result<Instance> {
    let mut out = inst.clone();
    out.set_word(position, MASK.to_string())?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub position: usize,
    pub original: String,
    pub replacement: String,
}

/// A rewritten test instance; provenance records the masking order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RarifiedInstance {
    pub text: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_b: Option<Vec<String>>,
    pub label: usize,
    pub provenance: Vec<Provenance>,
}

impl RarifiedInstance {
    pub fn as_instance(&self) -> Instance {
        Instance {
            text: self.text.clone(),
            text_b: self.text_b.clone(),
            label: self.label,
        }
    }

    /// Undo every substitution; the result is the original candidate.
    pub fn restored(&self) -> Instance {
        let mut inst = self.as_instance();
        for p in &self.provenance {
            inst.set_word(p.position, p.original.clone()).expect("provenance in range");
        }
        inst
    }
}

pub fn load_rarified(path: &Path) -> Result<Vec<RarifiedInstance>> {
    let raw = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: RarifiedInstance = serde_json::from_str(line)
            .map_err(|e| Error::domain(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_rarified(path: &Path, instances: &[RarifiedInstance]) -> Result<()> {
    let mut body = String::new();
    for inst in instances {
        body.push_str(&serde_json::to_string(inst)?);
        body.push('\n');
    }
    write_atomic(path, body.as_bytes())
}

#[derive(Debug, Clone)]
pub enum Selection {
    Emitted(RarifiedInstance),
    /// No flip within the masking budget; `tried` is the masking sequence.
    Discarded { tried: Vec<usize> },
    /// The baseline got the original wrong; not processed.
    InitiallyMisclassified,
}

const MAX_MASKINGS: usize = 5;

/// Greedy selection for one candidate. At each step, among not-yet-masked
/// substitutable positions, masks the one minimizing the gold-label
/// probability under the cumulative masking (ties to the lowest position).
/// On a prediction flip, every masked position receives a seeded-uniform
/// synonym.
pub fn select_replacements(
    inst: &Instance,
    clf: &dyn TextClassifier,
    lexicon: &SubstitutionLexicon,
    seed: u64,
) -> Result<Selection> {
    let y = inst.label;
    if predict(clf, &inst.text, inst.text_b.as_deref()) != y {
        return Ok(Selection::InitiallyMisclassified);
    }
    let mut working = inst.clone();
    let mut masked: Vec<usize> = Vec::new();
    for _ in 0..MAX_MASKINGS {
        let mut best: Option<(usize, f32)> = None;
        for pos in 0..inst.word_count() {
            if masked.contains(&pos) || !lexicon.has(inst.word_at(pos)?) {
                continue;
            }
            let probe = mask_word(&working, pos)?;
            let p = clf.class_probs(&probe.text, probe.text_b.as_deref())[y];
            let better = match best {
                None => true,
                Some((_, bp)) => p < bp,
            };
            if better {
                best = Some((pos, p));
            }
        }
        let Some((pos, _)) = best else {
            return Ok(Selection::Discarded { tried: masked });
        };
        working = mask_word(&working, pos)?;
        masked.push(pos);
        if predict(clf, &working.text, working.text_b.as_deref()) != y {
            // flip achieved: substitute rare synonyms at the masked spots
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = inst.clone();
            let mut provenance = Vec::with_capacity(masked.len());
            for &p in &masked {
                let original = inst.word_at(p)?.to_string();
                let options = lexicon.synonyms(&original);
                let replacement = options[rng.gen_range(0..options.len())].clone();
                out.set_word(p, replacement.clone())?;
                provenance.push(Provenance {
                    position: p,
                    original,
                    replacement,
                });
            }
            return Ok(Selection::Emitted(RarifiedInstance {
                text: out.text,
                text_b: out.text_b,
                label: y,
                provenance,
            }));
        }
    }
    Ok(Selection::Discarded { tried: masked })
}

// ── dataset-level driver ─────────────────────────────────────────────

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RarifyReport {
    pub candidates: usize,
    pub processed: usize,
    pub emitted: usize,
    pub discarded: usize,
    pub initially_misclassified: usize,
    pub mean_replacements: f32,
}

/// Run selection over every candidate (in dataset order, so the output is
/// order-normalized by construction).
pub fn rarify_dataset(
    candidates: &[Instance],
    clf: &dyn TextClassifier,
    lexicon: &SubstitutionLexicon,
    seed: u64,
) -> Result<(Vec<RarifiedInstance>, RarifyReport)> {
    let mut out = Vec::new();
    let mut report = RarifyReport {
        candidates: candidates.len(),
        ..Default::default()
    };
    for (i, inst) in candidates.iter().enumerate() {
        match select_replacements(inst, clf, lexicon, mix_seed(seed, &[i as u64]))? {
            Selection::Emitted(r) => {
                report.processed += 1;
                report.emitted += 1;
                out.push(r);
            }
            Selection::Discarded { .. } => {
                report.processed += 1;
                report.discarded += 1;
            }
            Selection::InitiallyMisclassified => {
                report.initially_misclassified += 1;
            }
        }
    }
    let total_repl: usize = out.iter().map(|r| r.provenance.len()).sum();
    report.mean_replacements = if out.is_empty() {
        0.0
    } else {
        total_repl as f32 / out.len() as f32
    };
    Ok((out, report))
}
