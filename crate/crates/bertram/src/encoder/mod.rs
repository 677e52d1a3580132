//! Miniature masked-language-model transformer encoder.
//!
//! Provides uncontextualized token embeddings (rows of the tied embedding
//! table), final-layer hidden states for an arbitrary sequence of input
//! vectors, and an MLM scoring head. The embedding-sequence entry point is
//! deliberate: callers may splice learned vectors into the input in place of
//! (or in addition to) table rows, and gradients flow into those vectors even
//! when every encoder weight is frozen.

pub mod pretrain;

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::math::{load_checkpoint, save_checkpoint, Parameter, Tape, Tensor, VarId};
use crate::text::Vocabulary;

pub use pretrain::{pretrain_mlm, MlmAction, PretrainConfig, PretrainReport};

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            feed_forward: 256,
            max_len: 64,
            vocab_size: 2000,
            seed: 42,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_len < 8 {
            return Err(Error::config("max_len must be at least 8"));
        }
        Ok(())
    }
}

struct LayerParams {
    wq: Parameter,
    bq: Parameter,
    wk: Parameter,
    bk: Parameter,
    wv: Parameter,
    bv: Parameter,
    wo: Parameter,
    bo: Parameter,
    ln1_g: Parameter,
    ln1_b: Parameter,
    w1: Parameter,
    b1: Parameter,
    w2: Parameter,
    b2: Parameter,
    ln2_g: Parameter,
    ln2_b: Parameter,
}

pub struct EncoderModel {
    cfg: EncoderConfig,
    tok_emb: Parameter,
    pos_emb: Parameter,
    emb_ln_g: Parameter,
    emb_ln_b: Parameter,
    layers: Vec<LayerParams>,
    mlm_bias: Parameter,
}

/// Leased tape handles for one forward pass, in canonical parameter order.
pub struct EncoderVars {
    pub tok_emb: VarId,
    pos_emb: VarId,
    emb_ln_g: VarId,
    emb_ln_b: VarId,
    layers: Vec<Vec<VarId>>,
    mlm_bias: VarId,
}

impl EncoderModel {
    pub fn init(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden;
        let f = cfg.feed_forward;
        let w = |rng: &mut ChaCha8Rng, name: String, shape: Vec<usize>| {
            Parameter::new(name, Tensor::normal(shape, 0.0, INIT_STD, rng))
        };
        let zeros = |name: String, shape: Vec<usize>| Parameter::new(name, Tensor::zeros(shape));
        let ones = |name: String, n: usize| {
            Parameter::new(name, Tensor::vector(vec![1.0; n]))
        };

        let tok_emb = w(&mut rng, "tok_emb".into(), vec![cfg.vocab_size, d]);
        let pos_emb = w(&mut rng, "pos_emb".into(), vec![cfg.max_len, d]);
        let emb_ln_g = ones("emb_ln_g".into(), d);
        let emb_ln_b = zeros("emb_ln_b".into(), vec![d]);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = |suffix: &str| format!("l{i}.{suffix}");
            layers.push(LayerParams {
                wq: w(&mut rng, p("wq"), vec![d, d]),
                bq: zeros(p("bq"), vec![d]),
                wk: w(&mut rng, p("wk"), vec![d, d]),
                bk: zeros(p("bk"), vec![d]),
                wv: w(&mut rng, p("wv"), vec![d, d]),
                bv: zeros(p("bv"), vec![d]),
                wo: w(&mut rng, p("wo"), vec![d, d]),
                bo: zeros(p("bo"), vec![d]),
                ln1_g: ones(p("ln1_g"), d),
                ln1_b: zeros(p("ln1_b"), vec![d]),
                w1: w(&mut rng, p("w1"), vec![d, f]),
                b1: zeros(p("b1"), vec![f]),
                w2: w(&mut rng, p("w2"), vec![f, d]),
                b2: zeros(p("b2"), vec![d]),
                ln2_g: ones(p("ln2_g"), d),
                ln2_b: zeros(p("ln2_b"), vec![d]),
            });
        }
        let mlm_bias = zeros("mlm_bias".into(), vec![cfg.vocab_size]);
        Ok(EncoderModel {
            cfg,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
            mlm_bias,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn hidden(&self) -> usize {
        self.cfg.hidden
    }

    pub fn max_len(&self) -> usize {
        self.cfg.max_len
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.emb_ln_g, &self.emb_ln_b];
        for l in &self.layers {
            out.extend([
                &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_g, &l.ln1_b,
                &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_g, &l.ln2_b,
            ]);
        }
        out.push(&self.mlm_bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out: Vec<&mut Parameter> = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for l in &mut self.layers {
            out.extend([
                &mut l.wq, &mut l.bq, &mut l.wk, &mut l.bk, &mut l.wv, &mut l.bv, &mut l.wo,
                &mut l.bo, &mut l.ln1_g, &mut l.ln1_b, &mut l.w1, &mut l.b1, &mut l.w2,
                &mut l.b2, &mut l.ln2_g, &mut l.ln2_b,
            ]);
        }
        out.push(&mut self.mlm_bias);
        out
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        for p in self.parameters_mut() {
            p.set_frozen(frozen);
        }
    }

    /// Freeze the embedding layer (token and position tables plus the
    /// embedding layer norm), leaving the transformer stack trainable.
    pub fn set_embedding_layer_frozen(&mut self, frozen: bool) {
        self.tok_emb.set_frozen(frozen);
        self.pos_emb.set_frozen(frozen);
        self.emb_ln_g.set_frozen(frozen);
        self.emb_ln_b.set_frozen(frozen);
    }

    pub fn lease(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            tok_emb: tape.param(&self.tok_emb),
            pos_emb: tape.param(&self.pos_emb),
            emb_ln_g: tape.param(&self.emb_ln_g),
            emb_ln_b: tape.param(&self.emb_ln_b),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    vec![
                        tape.param(&l.wq),
                        tape.param(&l.bq),
                        tape.param(&l.wk),
                        tape.param(&l.bk),
                        tape.param(&l.wv),
                        tape.param(&l.bv),
                        tape.param(&l.wo),
                        tape.param(&l.bo),
                        tape.param(&l.ln1_g),
                        tape.param(&l.ln1_b),
                        tape.param(&l.w1),
                        tape.param(&l.b1),
                        tape.param(&l.w2),
                        tape.param(&l.b2),
                        tape.param(&l.ln2_g),
                        tape.param(&l.ln2_b),
                    ]
                })
                .collect(),
            mlm_bias: tape.param(&self.mlm_bias),
        }
    }

    /// Tape ids in the same order as [`EncoderModel::parameters`].
    pub fn leased_ids(vars: &EncoderVars) -> Vec<VarId> {
        let mut out = vec![vars.tok_emb, vars.pos_emb, vars.emb_ln_g, vars.emb_ln_b];
        for l in &vars.layers {
            out.extend(l.iter().copied());
        }
        out.push(vars.mlm_bias);
        out
    }

    /// Uncontextualized embeddings: plain row lookups (no position signal).
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        let d = self.cfg.hidden;
        let table = self.tok_emb.value();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::domain(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            data.extend_from_slice(table.row(id as usize));
        }
        Tensor::new(vec![ids.len(), d], data)
    }

    /// Final-layer hidden states for a sequence of input vectors (already on
    /// the tape). Position embeddings are added here.
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &EncoderVars, x: VarId) -> Result<VarId> {
        let m = tape.value(x).rows();
        let d = self.cfg.hidden;
        if m > self.cfg.max_len {
            return Err(Error::domain(format!(
                "input length {m} exceeds max sequence length {}",
                self.cfg.max_len
            )));
        }
        if tape.value(x).cols() != d {
            return Err(Error::ShapeMismatch {
                op: "encoder forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![m, d],
            });
        }
        let pos = tape.slice_rows(vars.pos_emb, 0, m)?;
        let mut h = tape.add(x, pos)?;
        h = tape.layer_norm(h, vars.emb_ln_g, vars.emb_ln_b, LN_EPS)?;

        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        for l in &vars.layers {
            let [wq, bq, wk, bk, wv, bv, wo, bo, ln1_g, ln1_b, w1, b1, w2, b2, ln2_g, ln2_b] =
                l.as_slice()
            else {
                unreachable!("layer lease holds 16 parameters")
            };
            let q = tape.affine(h, *wq, *bq)?;
            let k = tape.affine(h, *wk, *bk)?;
            let v = tape.affine(h, *wv, *bv)?;
            let mut head_outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (a, b) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, a, b)?;
                let kh = tape.slice_cols(k, a, b)?;
                let vh = tape.slice_cols(v, a, b)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scaled = tape.scale(scores, scale);
                let attn = tape.softmax(scaled)?;
                head_outs.push(tape.matmul(attn, vh)?);
            }
            let merged = tape.concat_cols(&head_outs)?;
            let proj = tape.affine(merged, *wo, *bo)?;
            let res1 = tape.add(h, proj)?;
            h = tape.layer_norm(res1, *ln1_g, *ln1_b, LN_EPS)?;

            let ff_in = tape.affine(h, *w1, *b1)?;
            let act = tape.gelu(ff_in);
            let ff_out = tape.affine(act, *w2, *b2)?;
            let res2 = tape.add(h, ff_out)?;
            h = tape.layer_norm(res2, *ln2_g, *ln2_b, LN_EPS)?;
        }
        Ok(h)
    }

    /// MLM scores at the given positions via the tied embedding table.
    pub fn mlm_logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &EncoderVars,
        h: VarId,
        positions: &[usize],
    ) -> Result<VarId> {
        let sel = tape.gather_rows(h, positions)?;
        let logits = tape.matmul_nt(sel, vars.tok_emb)?;
        tape.add_bias_rows(logits, vars.mlm_bias)
    }

    /// Eval-mode forward on raw vectors: builds a throwaway tape.
    pub fn forward_embeddings(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.lease(&mut tape);
        let xv = tape.constant(x.clone());
        let h = self.forward_on_tape(&mut tape, &vars, xv)?;
        Ok(tape.value(h).clone())
    }

    /// Eval-mode hidden states for a token id sequence.
    pub fn forward_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let x = self.embed_tokens(ids)?;
        self.forward_embeddings(&x)
    }

    /// Eval-mode MLM scores for every position of `h`.
    pub fn mlm_logits(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.lease(&mut tape);
        let hv = tape.constant(h.clone());
        let positions: Vec<usize> = (0..h.rows()).collect();
        let logits = self.mlm_logits_on_tape(&mut tape, &vars, hv, &positions)?;
        Ok(tape.value(logits).clone())
    }

    /// The known embedding of a frequent word: its single token's table row.
    /// Multi-piece words are out of scope and rejected.
    pub fn target_embedding(&self, word: &str, vocab: &Vocabulary) -> Result<Vec<f32>> {
        let pieces = vocab.tokenize_word(word);
        if pieces.len() != 1 {
            return Err(Error::domain(format!(
                "'{word}' tokenizes to {} pieces; target embeddings require a single-token word",
                pieces.len()
            )));
        }
        Ok(self.tok_emb.value().row(pieces[0] as usize).to_vec())
    }

    // ── persistence ──────────────────────────────────────────────────

    pub fn save(&self, path: &Path, vocab_hash: &str) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("kind".to_string(), Value::String("encoder".to_string()));
        meta.insert("config".to_string(), serde_json::to_value(&self.cfg)?);
        meta.insert("vocab_hash".to_string(), Value::String(vocab_hash.to_string()));
        save_checkpoint(path, &meta, &self.parameters())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let ck = load_checkpoint(path)?;
        if ck.meta_str("kind") != Some("encoder") {
            return Err(Error::config(format!(
                "{}: not an encoder checkpoint",
                path.display()
            )));
        }
        let cfg: EncoderConfig = serde_json::from_value(
            ck.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::config("encoder checkpoint missing config"))?,
        )?;
        let vocab_hash = ck
            .meta_str("vocab_hash")
            .ok_or_else(|| Error::config("encoder checkpoint missing vocab_hash"))?
            .to_string();
        let mut model = EncoderModel::init(cfg)?;
        for p in model.parameters_mut() {
            let loaded = ck.param(p.name())?;
            if loaded.value().shape() != p.value().shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter {} has shape {:?}, expected {:?}",
                    p.name(),
                    loaded.value().shape(),
                    p.value().shape()
                )));
            }
            *p.value_mut() = loaded.value().clone();
            p.set_frozen(loaded.frozen());
        }
        Ok((model, vocab_hash))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use crate::text::vocab::SPECIALS;

    fn tiny_cfg(vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            feed_forward: 32,
            max_len: 16,
            vocab_size,
            seed: 7,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for c in 'a'..='z' {
            tokens.push(c.to_string());
            tokens.push(format!("##{c}"));
        }
        tokens.push("cat".to_string());
        tokens.push("dog".to_string());
        Vocabulary::from_tokens(tokens).unwrap()
    }

    fn tiny_model(vocab: &Vocabulary) -> EncoderModel {
        EncoderModel::init(tiny_cfg(vocab.len())).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg(64);
        cfg.heads = 3;
        assert!(EncoderModel::init(cfg).is_err());
        let mut cfg = tiny_cfg(64);
        cfg.max_len = 4;
        assert!(EncoderModel::init(cfg).is_err());
    }

    #[test]
    fn embed_tokens_returns_table_rows() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let mask = vocab.mask_id();
        let e = model.embed_tokens(&[mask, mask]).unwrap();
        assert_eq!(e.row(0), model.tok_emb.value().row(mask as usize));
        assert_eq!(e.row(0), e.row(1));
        assert!(model.embed_tokens(&[5000]).is_err());
    }

    #[test]
    fn forward_preserves_length_and_feels_positions() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let ids = vocab.encode_sentence(&["cat".into(), "dog".into(), "a".into()]);
        let h = model.forward_ids(&ids).unwrap();
        assert_eq!(h.rows(), ids.len());
        assert_eq!(h.cols(), model.hidden());

        // swapping two distinct tokens must change the outputs
        let mut swapped = ids.clone();
        swapped.swap(1, 2);
        let h2 = model.forward_ids(&swapped).unwrap();
        assert_ne!(h.data(), h2.data());
    }

    #[test]
    fn forward_rejects_overlength() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let ids: Vec<u32> = vec![vocab.mask_id(); model.max_len() + 1];
        assert!(model.forward_ids(&ids).is_err());
    }

    #[test]
    fn id_path_equals_embedding_path() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let ids = vocab.encode_sentence(&["dog".into(), "cat".into()]);
        let via_ids = model.forward_ids(&ids).unwrap();
        let via_embeddings = model
            .forward_embeddings(&model.embed_tokens(&ids).unwrap())
            .unwrap();
        assert_eq!(via_ids.data(), via_embeddings.data());
    }

    #[test]
    fn mlm_logits_shape_and_untrained_entropy() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let ids = vocab.encode_sentence(&["cat".into(), "dog".into()]);
        let h = model.forward_ids(&ids).unwrap();
        let logits = model.mlm_logits(&h).unwrap();
        assert_eq!(logits.shape(), &[ids.len(), vocab.len()]);

        // a fresh head should be near-uniform: entropy within 5% of ln |V|
        let ln_v = (vocab.len() as f32).ln();
        for r in 0..logits.rows() {
            let probs = crate::math::softmax(logits.row(r)).unwrap();
            let entropy: f32 = probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            assert!(
                (entropy - ln_v).abs() / ln_v < 0.05,
                "entropy {entropy} too far from ln|V| {ln_v}"
            );
        }
    }

    #[test]
    fn target_embedding_contract() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let e = model.target_embedding("cat", &vocab).unwrap();
        let id = vocab.id("cat").unwrap();
        assert_eq!(e.as_slice(), model.tok_emb.value().row(id as usize));
        assert_eq!(
            e.as_slice(),
            model.embed_tokens(&[id]).unwrap().row(0)
        );

        let err = model.target_embedding("catdog", &vocab).unwrap_err();
        assert!(err.to_string().contains("pieces"), "{err}");
    }

    #[test]
    fn gradient_reaches_injected_input_vectors_through_frozen_encoder() {
        let vocab = tiny_vocab();
        let mut model = tiny_model(&vocab);
        model.set_all_frozen(true);
        let d = model.hidden();
        let ids = vocab.encode_sentence(&["cat".into(), "dog".into()]);
        let base = model.embed_tokens(&ids).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let target = Tensor::uniform(vec![1, d], -0.5, 0.5, &mut rng);
        let mut params = vec![Parameter::new(
            "injected",
            Tensor::uniform(vec![d], -0.1, 0.1, &mut rng),
        )];
        let err = grad_check(
            &mut params,
            |tape, pids| {
                let vars = model.lease(tape);
                let x = tape.constant(base.clone());
                let injected = tape.replace_row(x, 2, pids[0])?;
                let h = model.forward_on_tape(tape, &vars, injected)?;
                let row = tape.slice_rows(h, 2, 3)?;
                let tv = tape.constant(target.clone());
                tape.squared_distance(row, tv)
            },
            1e-3,
            6,
        )
        .unwrap();
        assert!(err < 1e-3, "injected-vector grad_check error {err}");
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        model.save(&path, &vocab.content_hash()).unwrap();
        let (loaded, hash) = EncoderModel::load(&path).unwrap();
        assert_eq!(hash, vocab.content_hash());
        for (a, b) in model.parameters().iter().zip(loaded.parameters()) {
            assert_eq!(a.name(), b.name());
            let bits = |p: &Parameter| -> Vec<u32> {
                p.value().data().iter().map(|v| v.to_bits()).collect()
            };
            assert_eq!(bits(a), bits(b), "mismatch in {}", a.name());
        }
    }

    #[test]
    fn embedding_lookup_matches_checkpoint_row() {
        let vocab = tiny_vocab();
        let model = tiny_model(&vocab);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        model.save(&path, "h").unwrap();
        let ck = crate::math::load_checkpoint(&path).unwrap();
        let table = ck.param("tok_emb").unwrap();
        let id = vocab.id("dog").unwrap() as usize;
        let e = model.embed_tokens(&[id as u32]).unwrap();
        assert_eq!(e.row(0), table.value().row(id));
    }
}
