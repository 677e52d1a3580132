//! Three-stage mimicking trainer.
//!
//! Targets are the encoder's embeddings of frequent single-token words; the
//! model regresses onto them from contexts and surface form.
//!
//! - Stage 1 trains the context side alone: aggregation over raw shallow
//!   context embeddings, then the linear head. The encoder is frozen and the
//!   input side of every forward is fixed, so the per-context hidden states
//!   are precomputed once into a [`ContextBank`].
//! - Stage 2 trains the n-gram table alone against the same targets, with
//!   n-gram dropout. Nothing in this stage touches an encoder.
//! - Stage 3 starts from the two earlier checkpoints and trains everything
//!   except the frozen encoder through the configured variant. The add
//!   variant also keeps the n-gram table frozen.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::math::{Adam, AdamConfig, Schedule, Tape, Tensor, VarId};
use crate::model::{prepare_masked_context, BertramModel, Variant};
use crate::text::{Corpus, Vocabulary};
use crate::util::{fnv1a64, mix_seed};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageHyper {
    pub epochs: usize,
    pub lr: f32,
    pub batch_words: usize,
    pub warmup_frac: f32,
    pub min_contexts: usize,
    pub max_contexts: usize,
    pub seed: u64,
}

impl StageHyper {
    pub fn stage1_default() -> Self {
        StageHyper {
            epochs: 5,
            lr: 2e-3,
            batch_words: 16,
            warmup_frac: 0.1,
            min_contexts: 4,
            max_contexts: 32,
            seed: 42,
        }
    }

    pub fn stage2_default() -> Self {
        StageHyper {
            epochs: 20,
            lr: 0.01,
            batch_words: 64,
            warmup_frac: 0.0,
            min_contexts: 4,
            max_contexts: 32,
            seed: 42,
        }
    }

    pub fn stage3_default() -> Self {
        StageHyper {
            epochs: 3,
            lr: 1e-3,
            batch_words: 8,
            warmup_frac: 0.1,
            min_contexts: 4,
            max_contexts: 32,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub epoch_losses: Vec<f32>,
    pub steps: usize,
    pub skipped_no_context: usize,
}

/// Mimicking training words: every single-token non-special word at or above
/// the frequency floor, most frequent first.
pub fn mimicking_training_words(corpus: &Corpus, vocab: &Vocabulary, min_freq: u32) -> Vec<String> {
    corpus
        .types_by_frequency()
        .into_iter()
        .filter(|(w, c)| {
            *c >= min_freq
                && !crate::text::vocab::SPECIALS.contains(w)
                && vocab.tokenize_word(w).len() == 1
        })
        .map(|(w, _)| w.to_string())
        .collect()
}

/// Known embeddings for the given words (words that are not single-token are
/// skipped).
pub fn target_embeddings(
    enc: &EncoderModel,
    vocab: &Vocabulary,
    words: &[String],
) -> BTreeMap<String, Vec<f32>> {
    let mut out = BTreeMap::new();
    for w in words {
        if let Ok(e) = enc.target_embedding(w, vocab) {
            out.insert(w.clone(), e);
        }
    }
    out
}

/// Per-word prepared contexts plus their precomputed shallow context
/// embeddings (valid while the encoder stays frozen).
pub struct ContextBank {
    entries: BTreeMap<String, Vec<PreparedContext>>,
}

pub struct PreparedContext {
    pub ids: Vec<u32>,
    pub mask: usize,
    pub shallow: Vec<f32>,
}

impl ContextBank {
    /// Collect up to `cap` contexts per word and run the frozen encoder over
    /// each once.
    pub fn build(
        enc: &EncoderModel,
        vocab: &Vocabulary,
        corpus: &Corpus,
        words: &[String],
        cap: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for word in words {
            let contexts = crate::text::collect_contexts(
                word,
                corpus,
                cap,
                &[],
                mix_seed(seed, &[fnv1a64(word)]),
            );
            let mut prepared = Vec::with_capacity(contexts.len());
            for ctx in &contexts {
                let (ids, mask) = prepare_masked_context(word, ctx, vocab)?;
                let (ids, mask) = crop_for_shallow(ids, mask, enc.max_len())?;
                let h = enc.forward_ids(&ids)?;
                prepared.push(PreparedContext {
                    shallow: h.row(mask).to_vec(),
                    ids,
                    mask,
                });
            }
            entries.insert(word.clone(), prepared);
        }
        Ok(ContextBank { entries })
    }

    pub fn contexts(&self, word: &str) -> &[PreparedContext] {
        self.entries.get(word).map(Vec::as_slice).unwrap_or(&[])
    }
}

fn crop_for_shallow(ids: Vec<u32>, mask: usize, limit: usize) -> Result<(Vec<u32>, usize)> {
    // same centered policy the variant paths apply; stored pre-cropped so
    // cached states and stage-3 reuse agree
    super::center_crop(ids, mask, limit)
}

/// Deterministic per-(word, epoch) context subset of size within the
/// configured bounds.
fn sample_context_indices(
    available: usize,
    hyper: &StageHyper,
    word: &str,
    epoch: usize,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, &[fnv1a64(word), epoch as u64, 0x51]));
    let want = rng
        .gen_range(hyper.min_contexts..=hyper.max_contexts)
        .min(available);
    let mut idx: Vec<usize> = (0..available).collect();
    idx.shuffle(&mut rng);
    idx.truncate(want.max(1));
    idx.sort_unstable();
    idx
}

fn dropout_rng(hyper: &StageHyper, word: &str, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, &[fnv1a64(word), epoch as u64, 0xd0]))
}

fn adam_for(hyper: &StageHyper, words: usize) -> Adam {
    let steps_per_epoch = words.div_ceil(hyper.batch_words.max(1)).max(1);
    Adam::new(
        AdamConfig::new(hyper.lr).with_schedule(Schedule::WarmupLinearDecay {
            total_steps: steps_per_epoch * hyper.epochs,
            warmup_frac: hyper.warmup_frac,
        }),
    )
}

fn word_order(words: &[String], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[epoch as u64, 0x0e]));
    let mut order: Vec<usize> = (0..words.len()).collect();
    order.shuffle(&mut rng);
    order
}

fn pull_into_model(tape: &mut Tape, ids: &[VarId], model: &mut BertramModel) {
    let grads: Vec<Option<Vec<f32>>> = ids.iter().map(|&id| tape.take_grad(id)).collect();
    for (p, g) in model.parameters_mut().iter_mut().zip(grads) {
        if let Some(g) = g {
            p.accumulate_grad(&g);
        }
    }
}

/// Stage 1: context side only. The loss regresses `A·(Σ ρ_i v_ctx_i) + b`
/// onto the target embedding; context embeddings always come from the
/// shallow read regardless of the configured variant. Only the linear head
/// and the aggregation parameters move.
pub fn train_stage1_context(
    model: &mut BertramModel,
    bank: &ContextBank,
    targets: &BTreeMap<String, Vec<f32>>,
    words: &[String],
    hyper: &StageHyper,
) -> Result<TrainStats> {
    model.table.emb.set_frozen(true);
    model.gate_x.set_frozen(true);
    model.gate_y.set_frozen(true);
    model.a.set_frozen(false);
    model.b.set_frozen(false);
    model.q.set_frozen(false);
    model.k.set_frozen(false);

    let mut adam = adam_for(hyper, words.len());
    let mut stats = TrainStats {
        epoch_losses: Vec::new(),
        steps: 0,
        skipped_no_context: 0,
    };
    for epoch in 0..hyper.epochs {
        let order = word_order(words, hyper.seed, epoch);
        let mut epoch_loss = 0.0f64;
        let mut counted = 0usize;
        for chunk in order.chunks(hyper.batch_words.max(1)) {
            let mut tape = Tape::new();
            let vars = model.lease(&mut tape);
            let mut losses = Vec::new();
            for &wi in chunk {
                let word = &words[wi];
                let Some(target) = targets.get(word) else { continue };
                let prepared = bank.contexts(word);
                if prepared.is_empty() {
                    stats.skipped_no_context += 1;
                    log::debug!("stage 1: no contexts for '{word}', skipped");
                    continue;
                }
                let picks = sample_context_indices(prepared.len(), hyper, word, epoch);
                let ctx_nodes: Vec<VarId> = picks
                    .iter()
                    .map(|&i| tape.constant(Tensor::vector(prepared[i].shallow.clone())))
                    .collect();
                let (_, agg) = model.attentive_on_tape(&mut tape, &vars, &ctx_nodes)?;
                let pred = model_head(model, &mut tape, &vars, agg)?;
                let tgt = tape.constant(Tensor::vector(target.clone()));
                losses.push(tape.squared_distance(pred, tgt)?);
            }
            if losses.is_empty() {
                continue;
            }
            let loss = tape.mean_scalars(&losses)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::domain("non-finite stage-1 loss"));
            }
            tape.backward(loss)?;
            let ids = BertramModel::leased_ids(&vars);
            pull_into_model(&mut tape, &ids, model);
            drop(tape);
            adam.step(&mut model.parameters_mut());
            stats.steps += 1;
            epoch_loss += f64::from(value);
            counted += 1;
        }
        stats
            .epoch_losses
            .push(if counted > 0 { (epoch_loss / counted as f64) as f32 } else { f32::NAN });
    }
    Ok(stats)
}

fn model_head(
    model: &BertramModel,
    tape: &mut Tape,
    vars: &crate::model::BertramVars,
    v: VarId,
) -> Result<VarId> {
    let d = model.cfg.dim;
    let row = tape.reshape(v, vec![1, d])?;
    let av = tape.matmul_nt(row, vars.a)?;
    let with_b = tape.add_bias_rows(av, vars.b)?;
    tape.reshape(with_b, vec![d])
}

/// Stage 2: form side only, detached from any encoder. Only the n-gram table
/// moves; n-gram dropout is active.
pub fn train_stage2_form(
    model: &mut BertramModel,
    targets: &BTreeMap<String, Vec<f32>>,
    words: &[String],
    hyper: &StageHyper,
) -> Result<TrainStats> {
    model.table.emb.set_frozen(false);
    model.a.set_frozen(true);
    model.b.set_frozen(true);
    model.gate_x.set_frozen(true);
    model.gate_y.set_frozen(true);
    model.q.set_frozen(true);
    model.k.set_frozen(true);

    let mut adam = adam_for(hyper, words.len());
    let mut stats = TrainStats {
        epoch_losses: Vec::new(),
        steps: 0,
        skipped_no_context: 0,
    };
    for epoch in 0..hyper.epochs {
        let order = word_order(words, hyper.seed, epoch);
        let mut epoch_loss = 0.0f64;
        let mut counted = 0usize;
        for chunk in order.chunks(hyper.batch_words.max(1)) {
            let mut tape = Tape::new();
            let vars = model.lease(&mut tape);
            let mut losses = Vec::new();
            for &wi in chunk {
                let word = &words[wi];
                let Some(target) = targets.get(word) else { continue };
                let mut rng = dropout_rng(hyper, word, epoch);
                let v_form =
                    model.form_embedding_on_tape(&mut tape, &vars, word, Some(&mut rng))?;
                let tgt = tape.constant(Tensor::vector(target.clone()));
                losses.push(tape.squared_distance(v_form, tgt)?);
            }
            if losses.is_empty() {
                continue;
            }
            let loss = tape.mean_scalars(&losses)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::domain("non-finite stage-2 loss"));
            }
            tape.backward(loss)?;
            let ids = BertramModel::leased_ids(&vars);
            pull_into_model(&mut tape, &ids, model);
            drop(tape);
            adam.step(&mut model.parameters_mut());
            stats.steps += 1;
            epoch_loss += f64::from(value);
            counted += 1;
        }
        stats
            .epoch_losses
            .push(if counted > 0 { (epoch_loss / counted as f64) as f32 } else { f32::NAN });
    }
    Ok(stats)
}

/// Stage 3: the full mimicking loss through the configured variant, starting
/// from the stage-1/stage-2 parameters. The encoder stays frozen; for the
/// add variant the n-gram table is frozen as well.
pub fn train_stage3_combined(
    model: &mut BertramModel,
    enc: &EncoderModel,
    vocab: &Vocabulary,
    bank: &ContextBank,
    targets: &BTreeMap<String, Vec<f32>>,
    words: &[String],
    hyper: &StageHyper,
) -> Result<TrainStats> {
    model.table.emb.set_frozen(model.cfg.variant == Variant::Add);
    model.a.set_frozen(false);
    model.b.set_frozen(false);
    model.q.set_frozen(false);
    model.k.set_frozen(false);
    let shallow = model.cfg.variant == Variant::Shallow;
    model.gate_x.set_frozen(!shallow);
    model.gate_y.set_frozen(!shallow);

    let mut adam = adam_for(hyper, words.len());
    let mut stats = TrainStats {
        epoch_losses: Vec::new(),
        steps: 0,
        skipped_no_context: 0,
    };
    for epoch in 0..hyper.epochs {
        let order = word_order(words, hyper.seed, epoch);
        let mut epoch_loss = 0.0f64;
        let mut counted = 0usize;
        for chunk in order.chunks(hyper.batch_words.max(1)) {
            let mut tape = Tape::new();
            let enc_vars = enc.lease(&mut tape);
            let vars = model.lease(&mut tape);
            let mut losses = Vec::new();
            for &wi in chunk {
                let word = &words[wi];
                let Some(target) = targets.get(word) else { continue };
                let prepared = bank.contexts(word);
                if prepared.is_empty() {
                    stats.skipped_no_context += 1;
                    log::debug!("stage 3: no contexts for '{word}', skipped");
                    continue;
                }
                let picks = sample_context_indices(prepared.len(), hyper, word, epoch);
                let mut rng = dropout_rng(hyper, word, epoch);
                let v_form =
                    model.form_embedding_on_tape(&mut tape, &vars, word, Some(&mut rng))?;
                let mut per_context = Vec::with_capacity(picks.len());
                for &i in &picks {
                    let pc = &prepared[i];
                    let v = if shallow {
                        // the cached hidden state is exact while the encoder
                        // is frozen and the input side carries no form signal
                        let vc = tape.constant(Tensor::vector(pc.shallow.clone()));
                        let alpha = model.gate_on_tape(&mut tape, &vars, v_form, vc)?;
                        model.fcm_combine_on_tape(&mut tape, &vars, v_form, vc, alpha)?
                    } else {
                        model.combine_context(
                            &mut tape, enc, &enc_vars, &vars, vocab, &pc.ids, pc.mask, v_form,
                        )?
                    };
                    per_context.push(v);
                }
                let (_, v) = model.attentive_on_tape(&mut tape, &vars, &per_context)?;
                let tgt = tape.constant(Tensor::vector(target.clone()));
                losses.push(tape.squared_distance(v, tgt)?);
            }
            if losses.is_empty() {
                continue;
            }
            let loss = tape.mean_scalars(&losses)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::domain("non-finite stage-3 loss"));
            }
            tape.backward(loss)?;
            let ids = BertramModel::leased_ids(&vars);
            pull_into_model(&mut tape, &ids, model);
            drop(tape);
            adam.step(&mut model.parameters_mut());
            stats.steps += 1;
            epoch_loss += f64::from(value);
            counted += 1;
        }
        stats
            .epoch_losses
            .push(if counted > 0 { (epoch_loss / counted as f64) as f32 } else { f32::NAN });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::math::checkpoint::payload_bytes;
    use crate::model::{BertramConfig, NGramTable};

    struct World {
        corpus: Corpus,
        vocab: Vocabulary,
        enc: EncoderModel,
        words: Vec<String>,
        targets: BTreeMap<String, Vec<f32>>,
        bank: ContextBank,
    }

    fn world() -> World {
        let mut sentences = Vec::new();
        for i in 0..30 {
            sentences.push(vec![
                "the".to_string(),
                "cat".to_string(),
                "sat".to_string(),
                format!("t{}", i % 5),
            ]);
            sentences.push(vec![
                "the".to_string(),
                "dog".to_string(),
                "ran".to_string(),
                format!("t{}", i % 5),
            ]);
            sentences.push(vec!["a".to_string(), "mat".to_string(), "sat".to_string()]);
        }
        let corpus = Corpus::from_sentences(sentences);
        let vocab = Vocabulary::build(&corpus, 200, 3).unwrap();
        let mut enc = EncoderModel::init(EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            feed_forward: 32,
            max_len: 16,
            vocab_size: vocab.len(),
            seed: 5,
        })
        .unwrap();
        enc.set_all_frozen(true);
        let words: Vec<String> = ["cat", "dog", "mat", "sat", "the"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let targets = target_embeddings(&enc, &vocab, &words);
        let bank = ContextBank::build(&enc, &vocab, &corpus, &words, 48, 9).unwrap();
        World {
            corpus,
            vocab,
            enc,
            words,
            targets,
            bank,
        }
    }

    fn fresh_model(w: &World, variant: Variant) -> BertramModel {
        let cfg = BertramConfig::new(variant, 16);
        let table = NGramTable::from_corpus(&w.corpus, 3, 5, 16, 2).unwrap();
        BertramModel::init(cfg, table, String::new())
    }

    fn hyper(epochs: usize) -> StageHyper {
        StageHyper {
            epochs,
            lr: 2e-3,
            batch_words: 4,
            warmup_frac: 0.1,
            min_contexts: 2,
            max_contexts: 8,
            seed: 13,
        }
    }

    fn param_bytes(model: &BertramModel, names: &[&str]) -> Vec<u8> {
        let params: Vec<&crate::math::Parameter> = model
            .parameters()
            .into_iter()
            .filter(|p| names.contains(&p.name()))
            .collect();
        payload_bytes(&params)
    }

    #[test]
    fn stage1_trains_head_and_aggregator_only() {
        let w = world();
        let mut model = fresh_model(&w, Variant::Add);
        let enc_before = payload_bytes(&w.enc.parameters());
        let table_before = param_bytes(&model, &["ngram_table"]);
        let head_before = param_bytes(&model, &["a", "b", "am_q", "am_k"]);

        let stats =
            train_stage1_context(&mut model, &w.bank, &w.targets, &w.words, &hyper(5)).unwrap();

        assert_eq!(
            payload_bytes(&w.enc.parameters()),
            enc_before,
            "encoder must stay bit-identical"
        );
        assert_eq!(param_bytes(&model, &["ngram_table"]), table_before);
        assert_ne!(param_bytes(&model, &["a", "b", "am_q", "am_k"]), head_before);
        let first = stats.epoch_losses[0];
        let last = *stats.epoch_losses.last().unwrap();
        assert!(last < first, "stage-1 loss {first} -> {last}");
    }

    #[test]
    fn stage1_loss_strictly_decreases_over_epochs() {
        let w = world();
        let mut model = fresh_model(&w, Variant::Shallow);
        let stats =
            train_stage1_context(&mut model, &w.bank, &w.targets, &w.words, &hyper(5)).unwrap();
        for pair in stats.epoch_losses.windows(2) {
            assert!(
                pair[1] < pair[0],
                "epoch losses not strictly decreasing: {:?}",
                stats.epoch_losses
            );
        }
    }

    #[test]
    fn stage1_counts_words_without_contexts() {
        let w = world();
        let mut model = fresh_model(&w, Variant::Add);
        let mut words = w.words.clone();
        words.push("unseen".to_string());
        let mut targets = w.targets.clone();
        targets.insert("unseen".to_string(), vec![0.0; 16]);
        let stats =
            train_stage1_context(&mut model, &w.bank, &targets, &words, &hyper(2)).unwrap();
        assert_eq!(stats.skipped_no_context, 2); // once per epoch
    }

    #[test]
    fn stage2_needs_no_encoder_and_touches_only_the_table() {
        let w = world();
        let mut model = fresh_model(&w, Variant::Add);
        let head_before = param_bytes(&model, &["a", "b", "am_q", "am_k", "gate_x", "gate_y"]);
        let table_before = param_bytes(&model, &["ngram_table"]);

        // targets were extracted beforehand; the encoder is gone entirely
        let targets = w.targets.clone();
        drop(w);
        let stats = train_stage2_form(&mut model, &targets, &targets.keys().cloned().collect::<Vec<_>>(), &hyper(6)).unwrap();

        assert_eq!(
            param_bytes(&model, &["a", "b", "am_q", "am_k", "gate_x", "gate_y"]),
            head_before
        );
        assert_ne!(param_bytes(&model, &["ngram_table"]), table_before);
        let first = stats.epoch_losses[0];
        let last = *stats.epoch_losses.last().unwrap();
        assert!(last < first, "stage-2 loss {first} -> {last}");
    }

    #[test]
    fn stage2_is_deterministic_for_a_seed() {
        let w = world();
        let run = || {
            let mut model = fresh_model(&w, Variant::Add);
            train_stage2_form(
                &mut model,
                &w.targets,
                &w.words,
                &hyper(3),
            )
            .unwrap();
            param_bytes(&model, &["ngram_table"])
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage3_add_freezes_the_table_replace_does_not() {
        let w = world();

        let mut add_model = fresh_model(&w, Variant::Add);
        let table_before = param_bytes(&add_model, &["ngram_table"]);
        train_stage3_combined(
            &mut add_model,
            &w.enc,
            &w.vocab,
            &w.bank,
            &w.targets,
            &w.words,
            &hyper(1),
        )
        .unwrap();
        assert_eq!(
            param_bytes(&add_model, &["ngram_table"]),
            table_before,
            "add must keep the table bit-identical"
        );

        let mut replace_model = fresh_model(&w, Variant::Replace);
        let table_before = param_bytes(&replace_model, &["ngram_table"]);
        train_stage3_combined(
            &mut replace_model,
            &w.enc,
            &w.vocab,
            &w.bank,
            &w.targets,
            &w.words,
            &hyper(1),
        )
        .unwrap();
        assert_ne!(
            param_bytes(&replace_model, &["ngram_table"]),
            table_before,
            "replace must update the table"
        );
    }

    #[test]
    fn stage3_keeps_the_encoder_bit_identical() {
        let w = world();
        let mut model = fresh_model(&w, Variant::Replace);
        let enc_before = payload_bytes(&w.enc.parameters());
        train_stage3_combined(
            &mut model,
            &w.enc,
            &w.vocab,
            &w.bank,
            &w.targets,
            &w.words,
            &hyper(1),
        )
        .unwrap();
        assert_eq!(
            payload_bytes(&w.enc.parameters()),
            enc_before
        );
    }

    #[test]
    fn per_word_losses_do_not_depend_on_batching() {
        let w = world();
        let run = |batch_words: usize| -> Vec<f32> {
            let model = fresh_model(&w, Variant::Add);
            // one forward pass per word, identical dropout streams
            let h = StageHyper {
                batch_words,
                ..hyper(1)
            };
            let mut losses = Vec::new();
            for word in &w.words {
                let prepared = w.bank.contexts(word);
                if prepared.is_empty() {
                    continue;
                }
                let picks = sample_context_indices(prepared.len(), &h, word, 0);
                let mut tape = Tape::new();
                let enc_vars = w.enc.lease(&mut tape);
                let vars = model.lease(&mut tape);
                let mut rng = dropout_rng(&h, word, 0);
                let v_form = model
                    .form_embedding_on_tape(&mut tape, &vars, word, Some(&mut rng))
                    .unwrap();
                let mut per_context = Vec::new();
                for &i in &picks {
                    let pc = &prepared[i];
                    per_context.push(
                        model
                            .combine_context(
                                &mut tape, &w.enc, &enc_vars, &vars, &w.vocab, &pc.ids, pc.mask,
                                v_form,
                            )
                            .unwrap(),
                    );
                }
                let (_, v) = model.attentive_on_tape(&mut tape, &vars, &per_context).unwrap();
                let tgt = tape.constant(Tensor::vector(w.targets[word].clone()));
                let loss = tape.squared_distance(v, tgt).unwrap();
                losses.push(tape.value(loss).data()[0]);
            }
            losses
        };
        let singly = run(1);
        let batched = run(4);
        assert_eq!(singly.len(), batched.len());
        for (a, b) in singly.iter().zip(&batched) {
            assert!((a - b).abs() < 1e-6, "batching changed a per-word loss: {a} vs {b}");
        }
    }
}
