//! Masked-language-model pretraining for the small encoder.
//!
//! 15% of non-special positions are selected per sentence; of those, 80% are
//! replaced by [MASK], 10% by a random non-special token and 10% kept as-is.
//! Cross-entropy is taken at the selected positions only. Optimization is
//! Adam with linear warmup followed by linear decay.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::math::{Adam, AdamConfig, Schedule, Tape};
use crate::text::{Corpus, Vocabulary};

const SELECT_PROB: f64 = 0.15;
const MASK_SHARE: f64 = 0.8;
const RANDOM_SHARE: f64 = 0.1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_sentences: usize,
    pub lr: f32,
    pub warmup_frac: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 2,
            batch_sentences: 16,
            lr: 1e-3,
            warmup_frac: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f32>,
    pub steps: usize,
    pub sentences_seen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmAction {
    Mask,
    Random(u32),
    Keep,
}

/// Choose prediction targets for one encoded sentence. Returns
/// `(position, action, original id)` triples; special tokens are never
/// selected. Selection is i.i.d. per position, so short sentences may yield
/// none.
pub fn select_mlm_targets<R: Rng>(
    ids: &[u32],
    vocab: &Vocabulary,
    rng: &mut R,
) -> Vec<(usize, MlmAction, u32)> {
    let mut out = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        if vocab.is_special_id(id) {
            continue;
        }
        if rng.gen_bool(SELECT_PROB) {
            let r: f64 = rng.gen();
            let action = if r < MASK_SHARE {
                MlmAction::Mask
            } else if r < MASK_SHARE + RANDOM_SHARE {
                // uniform over non-special tokens
                loop {
                    let cand = rng.gen_range(0..vocab.len() as u32);
                    if !vocab.is_special_id(cand) {
                        break MlmAction::Random(cand);
                    }
                }
            } else {
                MlmAction::Keep
            };
            out.push((pos, action, id));
        }
    }
    out
}

fn apply_actions(ids: &[u32], targets: &[(usize, MlmAction, u32)], mask_id: u32) -> Vec<u32> {
    let mut out = ids.to_vec();
    for &(pos, action, _) in targets {
        match action {
            MlmAction::Mask => out[pos] = mask_id,
            MlmAction::Random(t) => out[pos] = t,
            MlmAction::Keep => {}
        }
    }
    out
}

pub fn pretrain_mlm(
    corpus: &Corpus,
    vocab: &Vocabulary,
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
) -> Result<(EncoderModel, PretrainReport)> {
    if corpus.len() < cfg.batch_sentences {
        return Err(Error::domain(format!(
            "corpus of {} sentences is smaller than one batch of {}",
            corpus.len(),
            cfg.batch_sentences
        )));
    }
    let mut enc_cfg = enc_cfg.clone();
    enc_cfg.vocab_size = vocab.len();
    let mut model = EncoderModel::init(enc_cfg)?;

    // encode once; overlong sentences are tail-truncated before [SEP]
    let max_len = model.max_len();
    let encoded: Vec<Vec<u32>> = corpus
        .sentences()
        .iter()
        .map(|s| {
            let mut ids = vocab.encode_sentence(s);
            if ids.len() > max_len {
                ids.truncate(max_len - 1);
                ids.push(vocab.sep_id());
            }
            ids
        })
        .collect();

    let steps_per_epoch = encoded.len().div_ceil(cfg.batch_sentences);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut adam = Adam::new(AdamConfig::new(cfg.lr).with_schedule(Schedule::WarmupLinearDecay {
        total_steps,
        warmup_frac: cfg.warmup_frac,
    }));

    let mut report = PretrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
        sentences_seen: 0,
    };
    let mask_id = vocab.mask_id();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::mix_seed(cfg.seed, &[epoch as u64]));
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_sentences) {
            let mut tape = Tape::new();
            let vars = model.lease(&mut tape);
            let mut losses = Vec::new();
            for &si in chunk {
                let ids = &encoded[si];
                let targets = select_mlm_targets(ids, vocab, &mut rng);
                if targets.is_empty() {
                    continue;
                }
                let masked = apply_actions(ids, &targets, mask_id);
                let positions: Vec<usize> = targets.iter().map(|t| t.0).collect();
                let target_ids: Vec<usize> = targets.iter().map(|t| t.2 as usize).collect();
                let x = tape.gather_rows(vars.tok_emb, &masked.iter().map(|&i| i as usize).collect::<Vec<_>>())?;
                let h = model.forward_on_tape(&mut tape, &vars, x)?;
                let logits = model.mlm_logits_on_tape(&mut tape, &vars, h, &positions)?;
                losses.push(tape.cross_entropy_mean(logits, &target_ids)?);
                report.sentences_seen += 1;
            }
            if losses.is_empty() {
                continue;
            }
            let batch_loss = tape.mean_scalars(&losses)?;
            let loss_value = tape.value(batch_loss).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::domain(format!(
                    "non-finite pretraining loss at step {}",
                    report.steps
                )));
            }
            tape.backward(batch_loss)?;
            let ids = EncoderModel::leased_ids(&vars);
            let grads: Vec<Option<Vec<f32>>> = ids.iter().map(|&id| tape.take_grad(id)).collect();
            drop(tape);
            let mut params = model.parameters_mut();
            for (p, g) in params.iter_mut().zip(grads) {
                if let Some(g) = g {
                    p.accumulate_grad(&g);
                }
            }
            adam.step(&mut params);
            report.steps += 1;
            epoch_loss += f64::from(loss_value);
            epoch_batches += 1;
        }
        let mean = if epoch_batches > 0 {
            (epoch_loss / epoch_batches as f64) as f32
        } else {
            f32::NAN
        };
        log::info!("mlm epoch {epoch}: mean loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::SPECIALS;

    fn small_world() -> (Corpus, Vocabulary) {
        let mut sentences = Vec::new();
        for _ in 0..40 {
            sentences.push(vec!["the".to_string(), "cat".to_string(), "sat".to_string()]);
            sentences.push(vec!["the".to_string(), "dog".to_string(), "ran".to_string()]);
            sentences.push(vec!["a".to_string(), "cat".to_string(), "ran".to_string()]);
        }
        let corpus = Corpus::from_sentences(sentences);
        let vocab = Vocabulary::build(&corpus, 120, 2).unwrap();
        (corpus, vocab)
    }

    fn tiny_enc_cfg() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            feed_forward: 32,
            max_len: 16,
            vocab_size: 0, // overwritten by pretrain_mlm
            seed: 3,
        }
    }

    #[test]
    fn selection_statistics_hit_the_specified_rates() {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in 'a'..='z' {
            tokens.push(c.to_string());
            tokens.push(format!("##{c}"));
        }
        let vocab = Vocabulary::from_tokens(tokens).unwrap();
        let ids: Vec<u32> = vec![vocab.id("q").unwrap(); 100_000];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let targets = select_mlm_targets(&ids, &vocab, &mut rng);

        let selected = targets.len() as f64 / ids.len() as f64;
        assert!((selected - 0.15).abs() < 0.01, "selection rate {selected}");

        let masks = targets.iter().filter(|t| t.1 == MlmAction::Mask).count() as f64;
        let randoms = targets
            .iter()
            .filter(|t| matches!(t.1, MlmAction::Random(_)))
            .count() as f64;
        let keeps = targets.iter().filter(|t| t.1 == MlmAction::Keep).count() as f64;
        let n = targets.len() as f64;
        assert!((masks / n - 0.8).abs() < 0.02, "mask share {}", masks / n);
        assert!((randoms / n - 0.1).abs() < 0.02, "random share {}", randoms / n);
        assert!((keeps / n - 0.1).abs() < 0.02, "keep share {}", keeps / n);
    }

    #[test]
    fn specials_are_never_selected() {
        let (_, vocab) = small_world();
        let ids = vec![vocab.cls_id(), vocab.sep_id(), vocab.mask_id()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(select_mlm_targets(&ids, &vocab, &mut rng).is_empty());
        }
    }

    #[test]
    fn training_reduces_loss() {
        let (corpus, vocab) = small_world();
        let cfg = PretrainConfig {
            epochs: 4,
            batch_sentences: 8,
            lr: 3e-3,
            warmup_frac: 0.1,
            seed: 5,
        };
        let (_, report) = pretrain_mlm(&corpus, &vocab, &tiny_enc_cfg(), &cfg).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last} ({:?})",
            report.epoch_losses
        );
    }

    #[test]
    fn same_seed_gives_identical_checkpoints_and_loss_trajectory() {
        let (corpus, vocab) = small_world();
        let cfg = PretrainConfig {
            epochs: 2,
            batch_sentences: 8,
            lr: 1e-3,
            warmup_frac: 0.1,
            seed: 11,
        };
        let (m1, r1) = pretrain_mlm(&corpus, &vocab, &tiny_enc_cfg(), &cfg).unwrap();
        let (m2, r2) = pretrain_mlm(&corpus, &vocab, &tiny_enc_cfg(), &cfg).unwrap();
        assert_eq!(r1.epoch_losses, r2.epoch_losses);
        let bytes = |m: &EncoderModel| {
            crate::math::checkpoint_bytes(&Default::default(), &m.parameters()).unwrap()
        };
        assert_eq!(bytes(&m1), bytes(&m2));
    }

    #[test]
    fn corpus_smaller_than_batch_is_rejected() {
        let corpus = Corpus::from_sentences(vec![vec!["a".to_string()]]);
        let vocab = Vocabulary::build(&corpus, 20, 1).unwrap();
        let cfg = PretrainConfig {
            batch_sentences: 8,
            ..Default::default()
        };
        assert!(pretrain_mlm(&corpus, &vocab, &tiny_enc_cfg(), &cfg).is_err());
    }

    #[test]
    fn frozen_model_is_untouched_by_a_training_style_step() {
        let (corpus, vocab) = small_world();
        let mut cfg = tiny_enc_cfg();
        cfg.vocab_size = vocab.len();
        let mut model = EncoderModel::init(cfg).unwrap();
        model.set_all_frozen(true);
        let before = crate::math::checkpoint_bytes(&Default::default(), &model.parameters()).unwrap();

        // one manual step against the frozen model
        let mut tape = Tape::new();
        let vars = model.lease(&mut tape);
        let ids = vocab.encode_sentence(&corpus.sentences()[0]);
        let x = tape
            .gather_rows(vars.tok_emb, &ids.iter().map(|&i| i as usize).collect::<Vec<_>>())
            .unwrap();
        let h = model.forward_on_tape(&mut tape, &vars, x).unwrap();
        let logits = model.mlm_logits_on_tape(&mut tape, &vars, h, &[1]).unwrap();
        let loss = tape.cross_entropy_mean(logits, &[ids[1] as usize]).unwrap();
        tape.backward(loss).unwrap();
        let leased = EncoderModel::leased_ids(&vars);
        let grads: Vec<Option<Vec<f32>>> = leased.iter().map(|&id| tape.take_grad(id)).collect();
        drop(tape);
        let mut params = model.parameters_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            if let Some(g) = g {
                p.accumulate_grad(&g);
            }
        }
        let mut adam = Adam::new(AdamConfig::new(0.1));
        adam.step(&mut params);

        let after = crate::math::checkpoint_bytes(&Default::default(), &model.parameters()).unwrap();
        assert_eq!(before, after);
    }
}
