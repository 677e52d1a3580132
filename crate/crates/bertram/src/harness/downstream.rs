//! Downstream accuracy of a frozen baseline classifier on a rarified test
//! set, with learned vectors injected for the substituted rare words.
//!
//! The test set is coupled to the classifier that produced it, so the same
//! frozen classifier must be passed back in. Slicing follows the substituted
//! words' counts in the reference corpus: a partition by the per-instance
//! maximum count, a cumulative `c_max` curve, and misspelling/synonym
//! overlays from the lexicon record kinds.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::inject::{inject_replace, inject_slash, Injection, Span};
use crate::harness::report::{EvalReport, SliceScore};
use crate::model::BertramModel;
use crate::rarify::{BaselineClassifier, RarifiedInstance, SubstitutionKind, SubstitutionLexicon};
use crate::text::{collect_contexts, Corpus, Sentence};
use crate::util::{fnv1a64, mix_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InjectionStrategy {
    Replace,
    Slash,
}

impl FromStr for InjectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "replace" => Ok(InjectionStrategy::Replace),
            "slash" => Ok(InjectionStrategy::Slash),
            other => Err(Error::config(format!("unknown injection strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub strategy: InjectionStrategy,
    /// Add the (unlabeled) test-set texts as extra contexts.
    pub indomain: bool,
    pub max_contexts: usize,
    pub seed: u64,
    /// Cutoffs for the cumulative accuracy curve; the partition intervals
    /// are derived from the same grid.
    pub count_grid: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strategy: InjectionStrategy::Replace,
            indomain: false,
            max_contexts: 32,
            seed: 42,
            count_grid: vec![1, 2, 4, 8, 16, 32, 64, 128],
        }
    }
}

/// All test texts as context sentences (pair members are separate contexts).
pub fn indomain_sentences(test: &[RarifiedInstance]) -> Vec<Sentence> {
    let mut out = Vec::new();
    for r in test {
        out.push(r.text.clone());
        if let Some(b) = &r.text_b {
            out.push(b.clone());
        }
    }
    out
}

/// Count the contexts available to `word` under an evaluation configuration
/// (exposed so the indomain effect is directly observable).
pub fn available_contexts(
    word: &str,
    corpus: &Corpus,
    extra: &[Sentence],
    max_contexts: usize,
    seed: u64,
) -> usize {
    collect_contexts(word, corpus, max_contexts, extra, mix_seed(seed, &[fnv1a64(word)])).len()
}

struct PreparedInstance {
    ids: Vec<u32>,
    /// (span over `ids`, substituted rare word)
    rare_spans: Vec<(Span, String)>,
    label: usize,
    max_sub_count: u32,
    has_misspelling: bool,
    has_synonym: bool,
}

fn prepare(
    clf: &BaselineClassifier,
    r: &RarifiedInstance,
    corpus: &Corpus,
    lexicon: &SubstitutionLexicon,
) -> PreparedInstance {
    let vocab = clf.vocab();
    let mut ids = vec![vocab.cls_id()];
    let mut word_spans: Vec<Span> = Vec::new();
    let mut push_segment = |ids: &mut Vec<u32>, spans: &mut Vec<Span>, words: &[String]| {
        let (pieces, rel_spans) = vocab.tokenize_words_with_spans(words);
        let offset = ids.len();
        ids.extend(pieces);
        spans.extend(rel_spans.iter().map(|&(s, e)| Span {
            start: s + offset,
            end: e + offset,
        }));
        ids.push(vocab.sep_id());
    };
    push_segment(&mut ids, &mut word_spans, &r.text);
    if let Some(b) = &r.text_b {
        push_segment(&mut ids, &mut word_spans, b);
    }

    let mut rare_spans = Vec::new();
    let mut max_sub_count = 0u32;
    let mut has_misspelling = false;
    let mut has_synonym = false;
    for p in &r.provenance {
        let span = word_spans[p.position];
        if !span.is_empty() {
            rare_spans.push((span, p.replacement.clone()));
        }
        max_sub_count = max_sub_count.max(corpus.frequency(&p.replacement));
        match lexicon.kind(&p.original) {
            Some(SubstitutionKind::Misspelling) => has_misspelling = true,
            Some(SubstitutionKind::Synonym) | None => has_synonym = true,
        }
    }
    rare_spans.sort_by_key(|(s, _)| s.start);
    PreparedInstance {
        ids,
        rare_spans,
        label: r.label,
        max_sub_count,
        has_misspelling,
        has_synonym,
    }
}

fn truncate_rows(x: crate::math::Tensor, max: usize) -> crate::math::Tensor {
    if x.rows() <= max {
        return x;
    }
    let d = x.cols();
    let mut data = Vec::with_capacity(max * d);
    for r in 0..max - 1 {
        data.extend_from_slice(x.row(r));
    }
    data.extend_from_slice(x.row(x.rows() - 1)); // keep the trailing [SEP]
    crate::math::Tensor::new(vec![max, d], data).expect("consistent rows")
}

/// Accuracy of the frozen classifier over the rarified test set, with the
/// substituted words' representations injected per the strategy. Without a
/// model the plain wordpiece inputs are scored (the baseline row of every
/// comparison).
pub fn eval_downstream(
    clf: &BaselineClassifier,
    test: &[RarifiedInstance],
    bertram: Option<&BertramModel>,
    corpus: &Corpus,
    lexicon: &SubstitutionLexicon,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::domain("empty rarified test set"));
    }
    let extra = if cfg.indomain {
        indomain_sentences(test)
    } else {
        Vec::new()
    };

    // one inferred vector per distinct rare word
    let mut vectors: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    if let Some(model) = bertram {
        for r in test {
            for p in &r.provenance {
                if !vectors.contains_key(&p.replacement) {
                    let contexts = collect_contexts(
                        &p.replacement,
                        corpus,
                        cfg.max_contexts,
                        &extra,
                        mix_seed(cfg.seed, &[fnv1a64(&p.replacement)]),
                    );
                    let v = model.infer(&clf.enc, clf.vocab(), &p.replacement, &contexts)?;
                    vectors.insert(p.replacement.clone(), v);
                }
            }
        }
    }

    let max_len = clf.enc.max_len();
    let slash_row = clf
        .enc
        .embed_tokens(&[clf.vocab().slash_id()])?
        .row(0)
        .to_vec();
    let mut rows: Vec<(bool, u32, bool, bool)> = Vec::with_capacity(test.len());
    for r in test {
        let prepared = prepare(clf, r, corpus, lexicon);
        let base = clf.enc.embed_tokens(&prepared.ids)?;
        let x = match bertram {
            None => truncate_rows(base, max_len),
            Some(_) => {
                let plan: Vec<Injection> = prepared
                    .rare_spans
                    .iter()
                    .map(|(span, word)| Injection {
                        span: *span,
                        vector: vectors[word].clone(),
                    })
                    .collect();
                match cfg.strategy {
                    InjectionStrategy::Replace => {
                        let (injected, _) = inject_replace(&base, &plan)?;
                        truncate_rows(injected, max_len)
                    }
                    InjectionStrategy::Slash => {
                        inject_slash(&base, &plan, &slash_row, Some(max_len))?
                    }
                }
            }
        };
        let probs = clf.probs_from_embeddings(&x)?;
        let predicted = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        rows.push((
            predicted == prepared.label,
            prepared.max_sub_count,
            prepared.has_misspelling,
            prepared.has_synonym,
        ));
    }

    let accuracy = |keep: &dyn Fn(&(bool, u32, bool, bool)) -> bool| -> (f32, usize) {
        let kept: Vec<&(bool, u32, bool, bool)> = rows.iter().filter(|r| keep(r)).collect();
        if kept.is_empty() {
            return (0.0, 0);
        }
        let correct = kept.iter().filter(|r| r.0).count();
        (correct as f32 / kept.len() as f32, kept.len())
    };

    let (overall, total) = accuracy(&|_| true);

    // partition by the per-instance maximum substituted-word count
    let mut partition = Vec::new();
    let mut lo = 0u32;
    for &hi in &cfg.count_grid {
        let (score, count) = accuracy(&|r| r.1 >= lo && r.1 < hi);
        partition.push(SliceScore {
            slice: format!("count[{lo},{hi})"),
            score,
            count,
        });
        lo = hi;
    }
    let (score, count) = accuracy(&|r| r.1 >= lo);
    partition.push(SliceScore {
        slice: format!("count[{lo},inf)"),
        score,
        count,
    });

    // cumulative c_max curve plus the misspelling/synonym overlays
    let mut overlays = Vec::new();
    for &c in &cfg.count_grid {
        let (score, count) = accuracy(&|r| r.1 < c);
        overlays.push(SliceScore {
            slice: format!("cmax<{c}"),
            score,
            count,
        });
    }
    let (score, count) = accuracy(&|_| true);
    overlays.push(SliceScore {
        slice: "cmax<inf".to_string(),
        score,
        count,
    });
    let (score, count) = accuracy(&|r| r.2);
    overlays.push(SliceScore {
        slice: "msp".to_string(),
        score,
        count,
    });
    let (score, count) = accuracy(&|r| r.3);
    overlays.push(SliceScore {
        slice: "wn".to_string(),
        score,
        count,
    });

    Ok(EvalReport {
        metric: "accuracy".to_string(),
        total,
        overall,
        partition,
        overlays,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderModel};
    use crate::rarify::{FinetuneConfig, Instance, Provenance};
    use crate::text::Vocabulary;

    fn world() -> (BaselineClassifier, Corpus, SubstitutionLexicon) {
        let mut sentences = Vec::new();
        for _ in 0..30 {
            sentences.push(vec!["red".to_string(), "fruit".to_string(), "here".to_string()]);
            sentences.push(vec!["big".to_string(), "animal".to_string(), "there".to_string()]);
        }
        sentences.push(vec!["frut".to_string(), "here".to_string()]);
        let corpus = Corpus::from_sentences(sentences);
        let vocab = Vocabulary::build(&corpus, 200, 2).unwrap();
        let enc = EncoderModel::init(EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            feed_forward: 32,
            max_len: 24,
            vocab_size: vocab.len(),
            seed: 4,
        })
        .unwrap();
        let mut clf = BaselineClassifier::new(enc, vocab, 2, 9);
        let train: Vec<Instance> = (0..24)
            .map(|i| {
                let (w, label) = if i % 2 == 0 { ("fruit", 0) } else { ("animal", 1) };
                Instance {
                    text: vec!["red".to_string(), w.to_string(), "here".to_string()],
                    text_b: None,
                    label,
                }
            })
            .collect();
        clf.finetune(
            &train,
            &FinetuneConfig {
                epochs: 10,
                batch: 8,
                lr: 3e-3,
                warmup_frac: 0.1,
                seed: 5,
            },
        )
        .unwrap();
        let lexicon = SubstitutionLexicon::from_records(
            vec![(
                "fruit".to_string(),
                vec!["frut".to_string()],
                SubstitutionKind::Misspelling,
            )],
            &corpus,
            100,
        )
        .unwrap();
        (clf, corpus, lexicon)
    }

    fn rarified() -> Vec<RarifiedInstance> {
        vec![RarifiedInstance {
            text: vec!["red".to_string(), "frut".to_string(), "here".to_string()],
            text_b: None,
            label: 0,
            provenance: vec![Provenance {
                position: 1,
                original: "fruit".to_string(),
                replacement: "frut".to_string(),
            }],
        }]
    }

    #[test]
    fn noop_injection_reproduces_baseline_predictions_exactly() {
        let (clf, _, _) = world();
        let text = vec!["red".to_string(), "fruit".to_string(), "here".to_string()];
        let ids = clf.encode_input(&text, None);
        let base = clf.enc.embed_tokens(&ids).unwrap();
        let baseline = clf.probs_from_embeddings(&base).unwrap();

        // span of length 1 whose vector is the original embedding row
        let fruit_pos = 2; // [CLS] red fruit ...
        let plan = vec![Injection {
            span: Span { start: fruit_pos, end: fruit_pos + 1 },
            vector: base.row(fruit_pos).to_vec(),
        }];
        let (injected, _) = inject_replace(&base, &plan).unwrap();
        assert_eq!(injected.data(), base.data(), "inputs must be bitwise equal");
        let probs = clf.probs_from_embeddings(&injected).unwrap();
        assert_eq!(probs, baseline);
    }

    #[test]
    fn indomain_strictly_increases_available_contexts() {
        let (_, corpus, _) = world();
        let test = rarified();
        let extra = indomain_sentences(&test);
        let without = available_contexts("frut", &corpus, &[], 32, 1);
        let with = available_contexts("frut", &corpus, &extra, 32, 1);
        assert!(with > without, "{with} vs {without}");
    }

    #[test]
    fn cmax_infinity_equals_the_all_score() {
        let (clf, corpus, lexicon) = world();
        let report =
            eval_downstream(&clf, &rarified(), None, &corpus, &lexicon, &Default::default())
                .unwrap();
        let inf = report.slice("cmax<inf").unwrap();
        assert_eq!(inf.score, report.overall);
        assert_eq!(inf.count, report.total);
        assert!(report.partition_counts_sum());
    }

    #[test]
    fn misspelling_overlay_is_tagged_from_the_lexicon() {
        let (clf, corpus, lexicon) = world();
        let report =
            eval_downstream(&clf, &rarified(), None, &corpus, &lexicon, &Default::default())
                .unwrap();
        assert_eq!(report.slice("msp").unwrap().count, 1);
        assert_eq!(report.slice("wn").unwrap().count, 0);
    }

    #[test]
    fn slash_strategy_runs_and_reports() {
        let (clf, corpus, lexicon) = world();
        let model_cfg = crate::model::BertramConfig::new(crate::model::Variant::Add, 16);
        let table = crate::model::NGramTable::from_corpus(&corpus, 3, 5, 16, 1).unwrap();
        let model = crate::model::BertramModel::init(model_cfg, table, String::new());
        let cfg = EvalConfig {
            strategy: InjectionStrategy::Slash,
            indomain: true,
            ..Default::default()
        };
        let report =
            eval_downstream(&clf, &rarified(), Some(&model), &corpus, &lexicon, &cfg).unwrap();
        assert_eq!(report.total, 1);
    }
}
