//! Baseline classifier: the small encoder with a linear head over the
//! `[CLS]` state, finetuned with the three training-time augmentations the
//! rarification procedure relies on.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::math::{
    load_checkpoint, save_checkpoint, softmax, Adam, AdamConfig, Parameter, Schedule, Tape,
    Tensor,
};
use crate::rarify::{Instance, TextClassifier};
use crate::text::vocab::MASK;
use crate::text::Vocabulary;
use crate::util::mix_seed;

const MASK_PROB: f64 = 0.05;
const DUP_PROB: f64 = 0.10;
const DUP_MASK_PROB: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup_frac: f32,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            batch: 16,
            lr: 1e-3,
            warmup_frac: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AugmentStats {
    pub words_seen: u64,
    pub masked: u64,
    pub duplicated: u64,
    pub duplicate_copies_masked: u64,
}

impl AugmentStats {
    pub fn mask_rate(&self) -> f64 {
        self.masked as f64 / self.words_seen.max(1) as f64
    }
    pub fn duplication_rate(&self) -> f64 {
        self.duplicated as f64 / self.words_seen.max(1) as f64
    }
    pub fn copy_mask_rate(&self) -> f64 {
        self.duplicate_copies_masked as f64 / (2 * self.duplicated).max(1) as f64
    }
}

/// Training-time word augmentation: a single uniform draw per word sends it
/// to `[MASK]` (5%), to the duplicated form `w / w` with each copy masked
/// independently at 25% (10%), or leaves it unchanged.
pub fn augment_words<R: Rng>(words: &[String], rng: &mut R, stats: &mut AugmentStats) -> Vec<String> {
    let mut out = Vec::with_capacity(words.len());
    for w in words {
        stats.words_seen += 1;
        let r: f64 = rng.gen();
        if r < MASK_PROB {
            stats.masked += 1;
            out.push(MASK.to_string());
        } else if r < MASK_PROB + DUP_PROB {
            stats.duplicated += 1;
            let mut copy = |out: &mut Vec<String>| {
                if rng.gen_bool(DUP_MASK_PROB) {
                    stats.duplicate_copies_masked += 1;
                    out.push(MASK.to_string());
                } else {
                    out.push(w.clone());
                }
            };
            copy(&mut out);
            out.push(crate::text::vocab::SLASH.to_string());
            copy(&mut out);
        } else {
            out.push(w.clone());
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneStats {
    pub epoch_losses: Vec<f32>,
    pub augment: AugmentStats,
}

pub struct BaselineClassifier {
    pub enc: EncoderModel,
    vocab: Vocabulary,
    head_w: Parameter,
    head_b: Parameter,
    labels: usize,
}

impl BaselineClassifier {
    pub fn new(enc: EncoderModel, vocab: Vocabulary, labels: usize, seed: u64) -> Self {
        let d = enc.hidden();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BaselineClassifier {
            head_w: Parameter::new("head_w", Tensor::normal(vec![d, labels], 0.0, 0.02, &mut rng)),
            head_b: Parameter::new("head_b", Tensor::zeros(vec![labels])),
            enc,
            vocab,
            labels,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, tail-truncated to fit.
    pub fn encode_input(&self, text: &[String], text_b: Option<&[String]>) -> Vec<u32> {
        let mut ids = vec![self.vocab.cls_id()];
        ids.extend(self.vocab.tokenize_words(text));
        ids.push(self.vocab.sep_id());
        if let Some(b) = text_b {
            ids.extend(self.vocab.tokenize_words(b));
            ids.push(self.vocab.sep_id());
        }
        let max = self.enc.max_len();
        if ids.len() > max {
            ids.truncate(max - 1);
            ids.push(self.vocab.sep_id());
        }
        ids
    }

    /// Class distribution from an explicit embedding sequence (used by the
    /// injection paths, which splice vectors into the input).
    pub fn probs_from_embeddings(&self, x: &Tensor) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars = self.enc.lease(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.enc.forward_on_tape(&mut tape, &vars, xv)?;
        let cls = tape.slice_rows(h, 0, 1)?;
        let wv = tape.param(&self.head_w);
        let bv = tape.param(&self.head_b);
        let logits = tape.affine(cls, wv, bv)?;
        softmax(tape.value(logits).data())
    }

    /// Cross-entropy finetuning with the three augmentations. The encoder's
    /// embedding layer stays frozen throughout.
    pub fn finetune(&mut self, train: &[Instance], cfg: &FinetuneConfig) -> Result<FinetuneStats> {
        if train.is_empty() {
            return Err(Error::domain("cannot finetune on an empty training set"));
        }
        self.enc.set_embedding_layer_frozen(true);
        let steps = train.len().div_ceil(cfg.batch.max(1)).max(1) * cfg.epochs;
        let mut adam = Adam::new(AdamConfig::new(cfg.lr).with_schedule(
            Schedule::WarmupLinearDecay {
                total_steps: steps,
                warmup_frac: cfg.warmup_frac,
            },
        ));
        let mut stats = FinetuneStats {
            epoch_losses: Vec::new(),
            augment: AugmentStats::default(),
        };
        for epoch in 0..cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[epoch as u64]));
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0f64;
            let mut batches = 0usize;
            for chunk in order.chunks(cfg.batch.max(1)) {
                let mut tape = Tape::new();
                let enc_vars = self.enc.lease(&mut tape);
                let wv = tape.param(&self.head_w);
                let bv = tape.param(&self.head_b);
                let mut losses = Vec::new();
                for &ii in chunk {
                    let inst = &train[ii];
                    let text = augment_words(&inst.text, &mut rng, &mut stats.augment);
                    let text_b = inst
                        .text_b
                        .as_ref()
                        .map(|b| augment_words(b, &mut rng, &mut stats.augment));
                    let ids = self.encode_input(&text, text_b.as_deref());
                    let positions: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
                    let x = tape.gather_rows(enc_vars.tok_emb, &positions)?;
                    let h = self.enc.forward_on_tape(&mut tape, &enc_vars, x)?;
                    let cls = tape.slice_rows(h, 0, 1)?;
                    let logits = tape.affine(cls, wv, bv)?;
                    losses.push(tape.cross_entropy_mean(logits, &[inst.label])?);
                }
                if losses.is_empty() {
                    continue;
                }
                let loss = tape.mean_scalars(&losses)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::domain("non-finite finetuning loss"));
                }
                tape.backward(loss)?;
                let mut ids = EncoderModel::leased_ids(&enc_vars);
                ids.push(wv);
                ids.push(bv);
                let grads: Vec<Option<Vec<f32>>> =
                    ids.iter().map(|&id| tape.take_grad(id)).collect();
                drop(tape);
                let mut params = self.enc.parameters_mut();
                params.push(&mut self.head_w);
                params.push(&mut self.head_b);
                for (p, g) in params.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        p.accumulate_grad(&g);
                    }
                }
                adam.step(&mut params);
                epoch_loss += f64::from(value);
                batches += 1;
            }
            stats.epoch_losses.push(if batches > 0 {
                (epoch_loss / batches as f64) as f32
            } else {
                f32::NAN
            });
        }
        Ok(stats)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Value::String("classifier".to_string()));
        meta.insert("labels".to_string(), Value::from(self.labels));
        meta.insert(
            "encoder_config".to_string(),
            serde_json::to_value(self.enc.config())?,
        );
        meta.insert(
            "vocab_hash".to_string(),
            Value::String(self.vocab.content_hash()),
        );
        let mut params = self.enc.parameters();
        params.push(&self.head_w);
        params.push(&self.head_b);
        save_checkpoint(path, &meta, &params)
    }

    pub fn load(path: &Path, vocab: Vocabulary) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        if ck.meta_str("kind") != Some("classifier") {
            return Err(Error::config(format!(
                "{}: not a classifier checkpoint",
                path.display()
            )));
        }
        if ck.meta_str("vocab_hash") != Some(vocab.content_hash().as_str()) {
            return Err(Error::config(
                "classifier checkpoint was trained with a different vocabulary",
            ));
        }
        let labels = ck
            .meta_u64("labels")
            .ok_or_else(|| Error::config("classifier checkpoint missing label count"))?
            as usize;
        let cfg: crate::encoder::EncoderConfig = serde_json::from_value(
            ck.meta
                .get("encoder_config")
                .cloned()
                .ok_or_else(|| Error::config("classifier checkpoint missing encoder config"))?,
        )?;
        let mut enc = EncoderModel::init(cfg)?;
        for p in enc.parameters_mut() {
            let loaded = ck.param(p.name())?;
            *p.value_mut() = loaded.value().clone();
            p.set_frozen(loaded.frozen());
        }
        let mut out = BaselineClassifier::new(enc, vocab, labels, 0);
        out.head_w = ck.param("head_w")?;
        out.head_b = ck.param("head_b")?;
        Ok(out)
    }
}

impl TextClassifier for BaselineClassifier {
    fn num_labels(&self) -> usize {
        self.labels
    }

    fn class_probs(&self, text: &[String], text_b: Option<&[String]>) -> Vec<f32> {
        let ids = self.encode_input(text, text_b);
        let x = self.enc.embed_tokens(&ids).expect("ids from own vocab");
        self.probs_from_embeddings(&x).expect("forward on valid input")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::math::checkpoint::payload_bytes;
    use crate::text::Corpus;

    fn world() -> (Vocabulary, EncoderModel, Vec<Instance>) {
        let mut sentences = Vec::new();
        for _ in 0..20 {
            sentences.push(vec!["red".to_string(), "fruit".to_string(), "here".to_string()]);
            sentences.push(vec!["big".to_string(), "animal".to_string(), "there".to_string()]);
        }
        let corpus = Corpus::from_sentences(sentences);
        let vocab = Vocabulary::build(&corpus, 150, 2).unwrap();
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
        let mut train = Vec::new();
        for i in 0..24 {
            let (w, label) = if i % 2 == 0 { ("fruit", 0) } else { ("animal", 1) };
            train.push(Instance {
                text: vec!["red".to_string(), w.to_string(), "here".to_string()],
                text_b: None,
                label,
            });
        }
        (vocab, enc, train)
    }

    #[test]
    fn augmentation_statistics_match_the_specified_rates() {
        let words: Vec<String> = vec!["token".to_string(); 120_000];
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut stats = AugmentStats::default();
        augment_words(&words, &mut rng, &mut stats);
        assert!((stats.mask_rate() - 0.05).abs() < 0.005, "{}", stats.mask_rate());
        assert!(
            (stats.duplication_rate() - 0.10).abs() < 0.01,
            "{}",
            stats.duplication_rate()
        );
        assert!(
            (stats.copy_mask_rate() - 0.25).abs() < 0.02,
            "{}",
            stats.copy_mask_rate()
        );
    }

    #[test]
    fn duplication_produces_word_slash_word() {
        // force the duplication branch with no copy-masking via seed search
        let words = vec!["laundry".to_string()];
        for seed in 0..500u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut stats = AugmentStats::default();
            let out = augment_words(&words, &mut rng, &mut stats);
            if stats.duplicated == 1 && stats.duplicate_copies_masked == 0 {
                assert_eq!(out, vec!["laundry", "/", "laundry"]);
                return;
            }
        }
        panic!("no seed produced an unmasked duplication");
    }

    #[test]
    fn finetuning_freezes_the_embedding_layer_and_learns() {
        let (vocab, enc, train) = world();
        let mut clf = BaselineClassifier::new(enc, vocab, 2, 9);
        let emb_before = payload_bytes(&[clf
            .enc
            .parameters()
            .into_iter()
            .find(|p| p.name() == "tok_emb")
            .unwrap()]);
        let stats = clf
            .finetune(
                &train,
                &FinetuneConfig {
                    epochs: 20,
                    batch: 8,
                    lr: 3e-3,
                    warmup_frac: 0.1,
                    seed: 5,
                },
            )
            .unwrap();
        let emb_after = payload_bytes(&[clf
            .enc
            .parameters()
            .into_iter()
            .find(|p| p.name() == "tok_emb")
            .unwrap()]);
        assert_eq!(emb_before, emb_after, "embedding table must stay bit-identical");
        assert!(
            stats.epoch_losses.last().unwrap() < &stats.epoch_losses[0],
            "{:?}",
            stats.epoch_losses
        );

        // the toy task is separable; training instances classify correctly
        let correct = train
            .iter()
            .filter(|inst| {
                let probs = clf.class_probs(&inst.text, None);
                probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
                    == inst.label
            })
            .count();
        assert!(correct >= train.len() * 9 / 10, "{correct}/{}", train.len());
    }

    #[test]
    fn distribution_sums_to_one() {
        let (vocab, enc, _) = world();
        let clf = BaselineClassifier::new(enc, vocab, 3, 1);
        let probs = clf.class_probs(&["red".to_string()], None);
        assert_eq!(probs.len(), 3);
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn pair_inputs_are_sep_joined() {
        let (vocab, enc, _) = world();
        let clf = BaselineClassifier::new(enc, vocab, 2, 1);
        let a = vec!["red".to_string()];
        let b = vec!["big".to_string()];
        let ids = clf.encode_input(&a, Some(&b));
        let sep = clf.vocab().sep_id();
        assert_eq!(ids.iter().filter(|&&i| i == sep).count(), 2);
        assert_eq!(ids[0], clf.vocab().cls_id());
    }

    #[test]
    fn save_load_roundtrip_predicts_identically() {
        let (vocab, enc, train) = world();
        let mut clf = BaselineClassifier::new(enc, vocab.clone(), 2, 9);
        clf.finetune(
            &train,
            &FinetuneConfig {
                epochs: 1,
                batch: 8,
                lr: 1e-3,
                warmup_frac: 0.0,
                seed: 5,
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        clf.save(&path).unwrap();
        let loaded = BaselineClassifier::load(&path, vocab).unwrap();
        let text = vec!["red".to_string(), "fruit".to_string()];
        assert_eq!(clf.class_probs(&text, None), loaded.class_probs(&text, None));
    }
}
