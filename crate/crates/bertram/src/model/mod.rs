//! Rare-word embedding model: character n-gram form embeddings, three ways
//! of exposing the surface form to a frozen encoder while reading a masked
//! context, and self-attentive aggregation over multiple contexts.
//!
//! Variants differ in where the form signal enters:
//! - [`Variant::Shallow`]: the encoder never sees the form; form and context
//!   are blended afterwards through a sigmoid gate, `v = α(A·v_ctx + b) +
//!   (1-α)·v_form`.
//! - [`Variant::Replace`]: the mask position's input embedding is replaced
//!   by the form embedding before the encoder runs; `v = A·v_ctx + b`.
//! - [`Variant::Add`]: the form embedding and a colon are spliced in right
//!   after `[CLS]`, shifting the read position by two; `v = A·v_ctx + b`.

pub mod train;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::{EncoderModel, EncoderVars};
use crate::error::{Error, Result};
use crate::math::{load_checkpoint, save_checkpoint, Parameter, Tape, Tensor, VarId};
use crate::text::ngram::extract_ngrams;
use crate::text::{Corpus, Sentence, Vocabulary};

pub use train::{
    mimicking_training_words, target_embeddings, train_stage1_context, train_stage2_form,
    train_stage3_combined, ContextBank, StageHyper, TrainStats,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Shallow,
    Replace,
    Add,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_lowercase().as_str() {
            "shallow" => Ok(Variant::Shallow),
            "replace" => Ok(Variant::Replace),
            "add" => Ok(Variant::Add),
            other => Err(Error::config(format!("unknown variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Shallow => write!(f, "shallow"),
            Variant::Replace => write!(f, "replace"),
            Variant::Add => write!(f, "add"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BertramConfig {
    pub variant: Variant,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub ngram_dropout: f32,
    pub dim: usize,
    pub seed: u64,
}

impl BertramConfig {
    pub fn new(variant: Variant, dim: usize) -> Self {
        BertramConfig {
            variant,
            ngram_min: 3,
            ngram_max: 5,
            ngram_dropout: 0.1,
            dim,
            seed: 42,
        }
    }
}

/// Trainable n-gram vectors, one table row per known gram. Grams outside the
/// table read as a shared zero vector (they still count toward the averaging
/// denominator).
pub struct NGramTable {
    grams: Vec<String>,
    index: HashMap<String, usize>,
    pub emb: Parameter,
}

impl NGramTable {
    /// Rows for every n-gram of every corpus word type, deterministically
    /// ordered.
    pub fn from_corpus(corpus: &Corpus, min_n: usize, max_n: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut set: BTreeSet<String> = BTreeSet::new();
        for (word, _) in corpus.types_by_frequency() {
            set.extend(extract_ngrams(word, min_n, max_n)?.grams);
        }
        let grams: Vec<String> = set.into_iter().collect();
        Ok(Self::from_grams(grams, dim, seed))
    }

    pub fn from_grams(grams: Vec<String>, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Parameter::new(
            "ngram_table",
            Tensor::uniform(vec![grams.len().max(1), dim], -0.05, 0.05, &mut rng),
        );
        let index = grams
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), i))
            .collect();
        NGramTable { grams, index, emb }
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn row_of(&self, gram: &str) -> Option<usize> {
        self.index.get(gram).copied()
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }
}

pub struct BertramModel {
    pub cfg: BertramConfig,
    pub table: NGramTable,
    /// Linear head applied to the context embedding.
    pub a: Parameter,
    pub b: Parameter,
    /// Gate parameters; only the shallow variant reads them.
    pub gate_x: Parameter,
    pub gate_y: Parameter,
    /// Attention projections of the aggregation layer.
    pub q: Parameter,
    pub k: Parameter,
    /// Content hash of the encoder this model was trained against.
    pub encoder_hash: String,
}

pub struct BertramVars {
    pub table: VarId,
    pub a: VarId,
    pub b: VarId,
    pub gate_x: VarId,
    pub gate_y: VarId,
    pub q: VarId,
    pub k: VarId,
}

/// Context embedding plus bookkeeping the sequence-length contracts need.
pub struct ContextRead {
    pub v_context: VarId,
    pub read_index: usize,
    pub input_len: usize,
}

impl BertramModel {
    pub fn init(cfg: BertramConfig, table: NGramTable, encoder_hash: String) -> Self {
        let d = cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::util::mix_seed(cfg.seed, &[1]));
        BertramModel {
            table,
            a: Parameter::new("a", Tensor::identity(d)),
            b: Parameter::new("b", Tensor::zeros(vec![d])),
            gate_x: Parameter::new("gate_x", Tensor::zeros(vec![2 * d])),
            gate_y: Parameter::new("gate_y", Tensor::zeros(vec![1])),
            q: Parameter::new("am_q", Tensor::uniform(vec![d, d], -0.05, 0.05, &mut rng)),
            k: Parameter::new("am_k", Tensor::uniform(vec![d, d], -0.05, 0.05, &mut rng)),
            encoder_hash,
            cfg,
        }
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.table.emb,
            &self.a,
            &self.b,
            &self.gate_x,
            &self.gate_y,
            &self.q,
            &self.k,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.table.emb,
            &mut self.a,
            &mut self.b,
            &mut self.gate_x,
            &mut self.gate_y,
            &mut self.q,
            &mut self.k,
        ]
    }

    pub fn lease(&self, tape: &mut Tape) -> BertramVars {
        BertramVars {
            table: tape.param(&self.table.emb),
            a: tape.param(&self.a),
            b: tape.param(&self.b),
            gate_x: tape.param(&self.gate_x),
            gate_y: tape.param(&self.gate_y),
            q: tape.param(&self.q),
            k: tape.param(&self.k),
        }
    }

    pub fn leased_ids(vars: &BertramVars) -> Vec<VarId> {
        vec![
            vars.table, vars.a, vars.b, vars.gate_x, vars.gate_y, vars.q, vars.k,
        ]
    }

    // ── form ─────────────────────────────────────────────────────────

    /// Mean of the surviving n-gram vectors of `word`. With a dropout RNG,
    /// each gram is independently dropped at the configured probability.
    /// Unknown grams contribute zero vectors but count in the denominator;
    /// if nothing survives the result is the zero vector.
    pub fn form_embedding_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BertramVars,
        word: &str,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        let set = extract_ngrams(word, self.cfg.ngram_min, self.cfg.ngram_max)?;
        let survivors: Vec<&String> = match dropout_rng {
            Some(rng) => set
                .grams
                .iter()
                .filter(|_| !rng.gen_bool(f64::from(self.cfg.ngram_dropout)))
                .collect(),
            None => set.grams.iter().collect(),
        };
        if survivors.is_empty() {
            return Ok(tape.constant(Tensor::zeros(vec![self.cfg.dim])));
        }
        let rows: Vec<usize> = survivors
            .iter()
            .filter_map(|g| self.table.row_of(g))
            .collect();
        if rows.is_empty() {
            return Ok(tape.constant(Tensor::zeros(vec![self.cfg.dim])));
        }
        let gathered = tape.gather_rows(vars.table, &rows)?;
        let summed = tape.sum_rows(gathered);
        Ok(tape.scale(summed, 1.0 / survivors.len() as f32))
    }

    /// Eval-mode form embedding as a plain vector.
    pub fn form_embedding(&self, word: &str, mut dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let vars = self.lease(&mut tape);
        let v = self.form_embedding_on_tape(&mut tape, &vars, word, dropout_rng.as_deref_mut())?;
        Ok(tape.value(v).data().to_vec())
    }

    // ── gate and blend (shallow only) ────────────────────────────────

    /// `α = σ(xᵀ[v_form; v_ctx] + y)`, as a scalar node.
    pub fn gate_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BertramVars,
        v_form: VarId,
        v_ctx: VarId,
    ) -> Result<VarId> {
        let d = self.cfg.dim;
        if tape.value(v_form).numel() != d || tape.value(v_ctx).numel() != d {
            return Err(Error::ShapeMismatch {
                op: "gate",
                lhs: tape.value(v_form).shape().to_vec(),
                rhs: tape.value(v_ctx).shape().to_vec(),
            });
        }
        let cat = tape.concat_vec(&[v_form, v_ctx])?;
        let raw = tape.dot(vars.gate_x, cat)?;
        let shifted = tape.add(raw, vars.gate_y)?;
        Ok(tape.sigmoid(shifted))
    }

    /// `α·(A·v_ctx + b) + (1-α)·v_form`.
    pub fn fcm_combine_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BertramVars,
        v_form: VarId,
        v_ctx: VarId,
        alpha: VarId,
    ) -> Result<VarId> {
        let ctx_part = self.context_head_on_tape(tape, vars, v_ctx)?;
        let gated_ctx = tape.scale_by_scalar(ctx_part, alpha)?;
        let one_minus = tape.scalar_affine(alpha, -1.0, 1.0)?;
        let gated_form = tape.scale_by_scalar(v_form, one_minus)?;
        tape.add(gated_ctx, gated_form)
    }

    /// `A·v + b` for a `[d]` vector node.
    fn context_head_on_tape(&self, tape: &mut Tape, vars: &BertramVars, v: VarId) -> Result<VarId> {
        let d = self.cfg.dim;
        let row = tape.reshape(v, vec![1, d])?;
        let av = tape.matmul_nt(row, vars.a)?;
        let with_b = tape.add_bias_rows(av, vars.b)?;
        tape.reshape(with_b, vec![d])
    }

    // ── context ──────────────────────────────────────────────────────

    /// Context embedding per the configured variant. `ids` must contain a
    /// mask at `mask_pos` (as produced by [`prepare_masked_context`]);
    /// overlong inputs are center-cropped around the mask first.
    pub fn context_embedding_on_tape(
        &self,
        tape: &mut Tape,
        enc: &EncoderModel,
        enc_vars: &EncoderVars,
        vocab: &Vocabulary,
        ids: &[u32],
        mask_pos: usize,
        v_form: Option<VarId>,
    ) -> Result<ContextRead> {
        let reserve = if self.cfg.variant == Variant::Add { 2 } else { 0 };
        let (ids, mask) = center_crop(ids.to_vec(), mask_pos, enc.max_len() - reserve)?;
        let positions: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let base = tape.gather_rows(enc_vars.tok_emb, &positions)?;
        let (x, read) = match self.cfg.variant {
            Variant::Shallow => (base, mask),
            Variant::Replace => {
                let vf = v_form
                    .ok_or_else(|| Error::domain("replace variant requires a form embedding"))?;
                (tape.replace_row(base, mask, vf)?, mask)
            }
            Variant::Add => {
                let vf = v_form
                    .ok_or_else(|| Error::domain("add variant requires a form embedding"))?;
                let d = self.cfg.dim;
                let head = tape.slice_rows(base, 0, 1)?;
                let rest = tape.slice_rows(base, 1, ids.len())?;
                let form_row = tape.reshape(vf, vec![1, d])?;
                let colon = tape.gather_rows(enc_vars.tok_emb, &[vocab.colon_id() as usize])?;
                let x = tape.concat_rows(&[head, form_row, colon, rest])?;
                (x, mask + 2)
            }
        };
        let input_len = tape.value(x).rows();
        let h = enc.forward_on_tape(tape, enc_vars, x)?;
        let row = tape.slice_rows(h, read, read + 1)?;
        let v_context = tape.reshape(row, vec![self.cfg.dim])?;
        Ok(ContextRead {
            v_context,
            read_index: read,
            input_len,
        })
    }

    /// Per-context embedding `v_(w,C)`: gate-blended for shallow, plain
    /// `A·v_ctx + b` for replace/add.
    pub fn single_context_on_tape(
        &self,
        tape: &mut Tape,
        enc: &EncoderModel,
        enc_vars: &EncoderVars,
        vocab: &Vocabulary,
        word: &str,
        context: &[String],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<VarId> {
        let (ids, mask) = prepare_masked_context(word, context, vocab)?;
        let vars = self.lease(tape);
        let v_form = self.form_embedding_on_tape(tape, &vars, word, dropout_rng)?;
        self.combine_context(tape, enc, enc_vars, &vars, vocab, &ids, mask, v_form)
    }

    /// Shared tail of the per-context path once `v_form` is on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn combine_context(
        &self,
        tape: &mut Tape,
        enc: &EncoderModel,
        enc_vars: &EncoderVars,
        vars: &BertramVars,
        vocab: &Vocabulary,
        ids: &[u32],
        mask: usize,
        v_form: VarId,
    ) -> Result<VarId> {
        match self.cfg.variant {
            Variant::Shallow => {
                let read =
                    self.context_embedding_on_tape(tape, enc, enc_vars, vocab, ids, mask, None)?;
                let alpha = self.gate_on_tape(tape, vars, v_form, read.v_context)?;
                self.fcm_combine_on_tape(tape, vars, v_form, read.v_context, alpha)
            }
            Variant::Replace | Variant::Add => {
                let read = self.context_embedding_on_tape(
                    tape,
                    enc,
                    enc_vars,
                    vocab,
                    ids,
                    mask,
                    Some(v_form),
                )?;
                self.context_head_on_tape(tape, vars, read.v_context)
            }
        }
    }

    // ── aggregation ──────────────────────────────────────────────────

    /// Self-attentive aggregation: `s_ij = (Q·v_i)·(K·v_j)/√d`, weights are
    /// the softmax over `i` of the row sums, output is `Σ ρ_i v_i`.
    pub fn attentive_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BertramVars,
        embeddings: &[VarId],
    ) -> Result<(VarId, VarId)> {
        if embeddings.is_empty() {
            return Err(Error::domain("attentive aggregation of zero embeddings"));
        }
        let d = self.cfg.dim;
        let m = embeddings.len();
        let stacked = tape.concat_rows(embeddings)?;
        let qv = tape.matmul(stacked, vars.q)?;
        let kv = tape.matmul(stacked, vars.k)?;
        let ksum = tape.sum_rows(kv);
        let ksum_row = tape.reshape(ksum, vec![1, d])?;
        let scores = tape.matmul_nt(qv, ksum_row)?;
        let flat = tape.reshape(scores, vec![m])?;
        let scaled = tape.scale(flat, 1.0 / (d as f32).sqrt());
        let rho = tape.softmax(scaled)?;
        let rho_row = tape.reshape(rho, vec![1, m])?;
        let mixed = tape.matmul(rho_row, stacked)?;
        let v = tape.reshape(mixed, vec![d])?;
        Ok((rho, v))
    }

    // ── inference ────────────────────────────────────────────────────

    /// Multi-context embedding `v_(w,𝒞)` with the aggregation weights.
    /// An empty context set falls back to the single synthesized context
    /// consisting of the word alone (masked), so inference stays total.
    pub fn infer_with_weights(
        &self,
        enc: &EncoderModel,
        vocab: &Vocabulary,
        word: &str,
        contexts: &[Sentence],
    ) -> Result<(Vec<f32>, Vec<f32>)> {
        let fallback;
        let contexts: &[Sentence] = if contexts.is_empty() {
            fallback = vec![vec![word.to_string()]];
            &fallback
        } else {
            contexts
        };
        let mut tape = Tape::new();
        let enc_vars = enc.lease(&mut tape);
        let vars = self.lease(&mut tape);
        let v_form = self.form_embedding_on_tape(&mut tape, &vars, word, None)?;
        let mut per_context = Vec::with_capacity(contexts.len());
        for context in contexts {
            let (ids, mask) = prepare_masked_context(word, context, vocab)?;
            per_context.push(self.combine_context(
                &mut tape, enc, &enc_vars, &vars, vocab, &ids, mask, v_form,
            )?);
        }
        let (rho, v) = self.attentive_on_tape(&mut tape, &vars, &per_context)?;
        Ok((
            tape.value(rho).data().to_vec(),
            tape.value(v).data().to_vec(),
        ))
    }

    pub fn infer(
        &self,
        enc: &EncoderModel,
        vocab: &Vocabulary,
        word: &str,
        contexts: &[Sentence],
    ) -> Result<Vec<f32>> {
        Ok(self.infer_with_weights(enc, vocab, word, contexts)?.1)
    }

    // ── persistence ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path, stage: u8) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Value::String("bertram".to_string()));
        meta.insert("stage".to_string(), Value::from(stage));
        meta.insert("config".to_string(), serde_json::to_value(&self.cfg)?);
        meta.insert(
            "ngram_vocab".to_string(),
            serde_json::to_value(self.table.grams())?,
        );
        meta.insert(
            "encoder_hash".to_string(),
            Value::String(self.encoder_hash.clone()),
        );
        save_checkpoint(path, &meta, &self.parameters())
    }

    pub fn load(path: &Path) -> Result<(Self, u8)> {
        let ck = load_checkpoint(path)?;
        if ck.meta_str("kind") != Some("bertram") {
            return Err(Error::config(format!(
                "{}: not a model checkpoint",
                path.display()
            )));
        }
        let stage = ck
            .meta_u64("stage")
            .ok_or_else(|| Error::config("model checkpoint missing stage tag"))? as u8;
        let cfg: BertramConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::config("model checkpoint missing config"))?,
        )?;
        let grams: Vec<String> = serde_json::from_value(
            ck.meta
                .get("ngram_vocab")
                .cloned()
                .ok_or_else(|| Error::config("model checkpoint missing ngram_vocab"))?,
        )?;
        let encoder_hash = ck.meta_str("encoder_hash").unwrap_or_default().to_string();
        let table = NGramTable::from_grams(grams, cfg.dim, cfg.seed);
        let mut model = BertramModel::init(cfg, table, encoder_hash);
        for p in model.parameters_mut() {
            let loaded = ck.param(p.name())?;
            *p.value_mut() = loaded.value().clone();
            p.set_frozen(loaded.frozen());
        }
        Ok((model, stage))
    }

    /// Assemble a stage-3 starting point from the two earlier runs: linear
    /// head and aggregation parameters from the context-only checkpoint, the
    /// n-gram table from the form-only checkpoint, a fresh gate.
    pub fn load_combined(
        stage1_path: &Path,
        stage2_path: &Path,
        variant: Variant,
    ) -> Result<Self> {
        let (s1, tag1) = BertramModel::load(stage1_path)
            .map_err(|e| Error::config(format!("stage-1 checkpoint: {e}")))?;
        if tag1 != 1 {
            return Err(Error::config(format!(
                "{}: expected a stage-1 checkpoint, found stage {tag1}",
                stage1_path.display()
            )));
        }
        let (s2, tag2) = BertramModel::load(stage2_path)
            .map_err(|e| Error::config(format!("stage-2 checkpoint: {e}")))?;
        if tag2 != 2 {
            return Err(Error::config(format!(
                "{}: expected a stage-2 checkpoint, found stage {tag2}",
                stage2_path.display()
            )));
        }
        if s1.encoder_hash != s2.encoder_hash {
            return Err(Error::config(
                "stage-1 and stage-2 checkpoints were trained against different encoders",
            ));
        }
        let mut cfg = s2.cfg.clone();
        cfg.variant = variant;
        let mut model = BertramModel::init(cfg, s2.table, s1.encoder_hash.clone());
        *model.a.value_mut() = s1.a.value().clone();
        *model.b.value_mut() = s1.b.value().clone();
        *model.q.value_mut() = s1.q.value().clone();
        *model.k.value_mut() = s1.k.value().clone();
        Ok(model)
    }
}

/// Replace every occurrence of `word` in `context` with `[MASK]`, add
/// `[CLS]`/`[SEP]`, tokenize, and return the ids plus the first mask
/// position in the assembled sequence.
pub fn prepare_masked_context(
    word: &str,
    context: &[String],
    vocab: &Vocabulary,
) -> Result<(Vec<u32>, usize)> {
    if !context.iter().any(|w| w == word) {
        return Err(Error::domain(format!(
            "context does not contain the word '{word}'"
        )));
    }
    let masked: Vec<String> = context
        .iter()
        .map(|w| {
            if w == word {
                crate::text::vocab::MASK.to_string()
            } else {
                w.clone()
            }
        })
        .collect();
    let ids = vocab.encode_sentence(&masked);
    let mask_id = vocab.mask_id();
    let pos = ids
        .iter()
        .position(|&i| i == mask_id)
        .expect("mask present by construction");
    Ok((ids, pos))
}

/// Crop a `[CLS] .. [SEP]` id sequence to `limit`, keeping a window around
/// the mask; the specials are pinned.
fn center_crop(ids: Vec<u32>, mask: usize, limit: usize) -> Result<(Vec<u32>, usize)> {
    if ids.len() <= limit {
        return Ok((ids, mask));
    }
    if limit < 3 {
        return Err(Error::domain(format!(
            "cannot crop to {limit} tokens without losing the mask"
        )));
    }
    let inner_len = ids.len() - 2;
    let w = limit - 2;
    let mask_rel = mask - 1;
    let start = mask_rel.saturating_sub(w / 2).min(inner_len - w);
    let mut out = Vec::with_capacity(limit);
    out.push(ids[0]);
    out.extend_from_slice(&ids[1 + start..1 + start + w]);
    out.push(*ids.last().expect("non-empty"));
    Ok((out, 1 + (mask_rel - start)))
}

/// Squared Euclidean distance between a target embedding and a produced one.
pub fn mimicking_loss(e_w: &[f32], v: &[f32]) -> Result<f32> {
    if e_w.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "mimicking_loss",
            lhs: vec![e_w.len()],
            rhs: vec![v.len()],
        });
    }
    let s: f64 = e_w
        .iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum();
    Ok(s as f32)
}
