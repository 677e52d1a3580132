//! Cloze probing: fill-the-slot phrases scored by mean reciprocal rank,
//! reported per frequency bucket of the probe keyword.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::harness::inject::{adjust_position, inject_replace, Injection, Span};
use crate::harness::report::{EvalReport, SliceScore};
use crate::model::BertramModel;
use crate::text::{collect_contexts, frequency_bucket, Bucket, Corpus, Vocabulary};
use crate::util::{fnv1a64, mix_seed};

/// The slot marker inside probe patterns.
pub const SLOT: &str = "___";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClozeProbe {
    /// Word sequence with exactly one `___` slot.
    pub pattern: Vec<String>,
    pub keyword: String,
    /// Acceptable answers; single-token words.
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bucket_hint: Option<String>,
}

impl ClozeProbe {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let slots = self.pattern.iter().filter(|w| *w == SLOT).count();
        if slots != 1 {
            return Err(Error::domain(format!(
                "probe for '{}' has {slots} slots, expected exactly one",
                self.keyword
            )));
        }
        if !self.pattern.iter().any(|w| *w == self.keyword) {
            return Err(Error::domain(format!(
                "probe pattern does not mention its keyword '{}'",
                self.keyword
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::domain(format!(
                "probe for '{}' has no targets",
                self.keyword
            )));
        }
        for t in &self.targets {
            if vocab.tokenize_word(t).len() != 1 {
                return Err(Error::domain(format!(
                    "probe target '{t}' is not a single-token word"
                )));
            }
        }
        Ok(())
    }
}

pub fn load_probes(path: &Path) -> Result<Vec<ClozeProbe>> {
    let raw = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let probe: ClozeProbe = serde_json::from_str(line)
            .map_err(|e| Error::domain(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        out.push(probe);
    }
    Ok(out)
}

pub fn save_probes(path: &Path, probes: &[ClozeProbe]) -> Result<()> {
    let mut body = String::new();
    for p in probes {
        body.push_str(&serde_json::to_string(p)?);
        body.push('\n');
    }
    crate::util::write_atomic(path, body.as_bytes())
}

/// Mean of reciprocal best-target ranks; probes whose targets fell outside
/// the candidate cutoff contribute 0.
pub fn mrr(ranks: &[Option<u32>]) -> Result<f32> {
    if ranks.is_empty() {
        return Err(Error::domain("mrr of an empty probe set"));
    }
    let sum: f64 = ranks
        .iter()
        .map(|r| r.map_or(0.0, |rank| 1.0 / f64::from(rank)))
        .sum();
    Ok((sum / ranks.len() as f64) as f32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeRunConfig {
    /// Targets ranked beyond this many candidates score 0.
    pub rank_cutoff: u32,
    pub max_contexts: usize,
    pub seed: u64,
}

impl Default for ProbeRunConfig {
    fn default() -> Self {
        ProbeRunConfig {
            rank_cutoff: 100,
            max_contexts: 32,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub keyword: String,
    pub bucket: String,
    pub rank: Option<u32>,
    /// Keyword had no contexts; the embedding came from the form-only
    /// fallback path.
    pub flagged: bool,
}

/// Run the probe set. Without a model, keywords enter as their wordpieces;
/// with one, the keyword's piece span is replaced by the inferred vector.
pub fn run_probe(
    enc: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    bertram: Option<&BertramModel>,
    probes: &[ClozeProbe],
    cfg: &ProbeRunConfig,
) -> Result<(EvalReport, Vec<ProbeOutcome>)> {
    if probes.is_empty() {
        return Err(Error::domain("empty probe set"));
    }
    let mut outcomes = Vec::with_capacity(probes.len());
    for probe in probes {
        probe.validate(vocab)?;
        outcomes.push(score_probe(enc, vocab, corpus, bertram, probe, cfg)?);
    }

    let overall_ranks: Vec<Option<u32>> = outcomes.iter().map(|o| o.rank).collect();
    let mut partition = Vec::new();
    for bucket in ["rare", "medium", "frequent"] {
        let ranks: Vec<Option<u32>> = outcomes
            .iter()
            .filter(|o| o.bucket == bucket)
            .map(|o| o.rank)
            .collect();
        partition.push(SliceScore {
            slice: bucket.to_string(),
            score: if ranks.is_empty() { 0.0 } else { mrr(&ranks)? },
            count: ranks.len(),
        });
    }
    let flagged = outcomes.iter().filter(|o| o.flagged).count();
    let report = EvalReport {
        metric: "mrr".to_string(),
        total: outcomes.len(),
        overall: mrr(&overall_ranks)?,
        partition,
        overlays: vec![SliceScore {
            slice: "flagged_no_context".to_string(),
            score: 0.0,
            count: flagged,
        }],
    };
    Ok((report, outcomes))
}

fn score_probe(
    enc: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    bertram: Option<&BertramModel>,
    probe: &ClozeProbe,
    cfg: &ProbeRunConfig,
) -> Result<ProbeOutcome> {
    let count = corpus.frequency(&probe.keyword);
    let bucket = if count == 0 {
        probe
            .bucket_hint
            .clone()
            .unwrap_or_else(|| Bucket::Rare.to_string())
    } else {
        frequency_bucket(count).to_string()
    };

    // assemble [CLS] pattern [SEP] with the slot masked
    let masked: Vec<String> = probe
        .pattern
        .iter()
        .map(|w| {
            if w == SLOT {
                crate::text::vocab::MASK.to_string()
            } else {
                w.clone()
            }
        })
        .collect();
    let (pieces, spans) = vocab.tokenize_words_with_spans(&masked);
    let mut ids = vec![vocab.cls_id()];
    ids.extend(pieces);
    ids.push(vocab.sep_id());

    let slot_word = probe.pattern.iter().position(|w| w == SLOT).expect("validated");
    let mask_pos = spans[slot_word].0 + 1; // +1 for [CLS]
    let keyword_word = probe
        .pattern
        .iter()
        .position(|w| w == &probe.keyword)
        .expect("validated");
    let keyword_span = Span {
        start: spans[keyword_word].0 + 1,
        end: spans[keyword_word].1 + 1,
    };

    let (logits_row, flagged) = match bertram {
        None => {
            let h = enc.forward_ids(&ids)?;
            let logits = enc.mlm_logits(&h)?;
            (logits.row(mask_pos).to_vec(), false)
        }
        Some(model) => {
            let contexts = collect_contexts(
                &probe.keyword,
                corpus,
                cfg.max_contexts,
                &[],
                mix_seed(cfg.seed, &[fnv1a64(&probe.keyword)]),
            );
            let flagged = contexts.is_empty();
            let v = model.infer(enc, vocab, &probe.keyword, &contexts)?;
            let base = enc.embed_tokens(&ids)?;
            let plan = vec![Injection {
                span: keyword_span,
                vector: v,
            }];
            let (injected, _) = inject_replace(&base, &plan)?;
            let h = enc.forward_embeddings(&injected)?;
            let logits = enc.mlm_logits(&h)?;
            (logits.row(adjust_position(&plan, mask_pos)).to_vec(), flagged)
        }
    };

    let rank = best_target_rank(&logits_row, vocab, &probe.targets, cfg.rank_cutoff);
    Ok(ProbeOutcome {
        keyword: probe.keyword.clone(),
        bucket,
        rank,
        flagged,
    })
}

/// Best (lowest) rank over the targets: 1 plus the number of strictly
/// higher-scoring vocabulary entries; `None` beyond the cutoff.
pub fn best_target_rank(
    logits: &[f32],
    vocab: &Vocabulary,
    targets: &[String],
    cutoff: u32,
) -> Option<u32> {
    let mut best: Option<u32> = None;
    for t in targets {
        let Some(id) = vocab.id(t) else { continue };
        let score = logits[id as usize];
        let rank = 1 + logits.iter().filter(|&&x| x > score).count() as u32;
        if best.map_or(true, |b| rank < b) {
            best = Some(rank);
        }
    }
    best.filter(|&r| r <= cutoff)
}
