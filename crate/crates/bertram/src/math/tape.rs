//! Wengert-tape reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output tensor. [`Tape::backward`] seeds the (scalar) loss with 1 and
//! walks the recording in reverse, accumulating gradients node by node.
//!
//! Leaves come in two kinds: parameters leased via [`Tape::param`] (gradient
//! is tracked unless the parameter is frozen) and constants. Gradient flows
//! *through* operations on frozen leaves — only storage into the leaf itself
//! is skipped — which is what lets a trainable vector be pushed through a
//! frozen encoder.
//!
//! Reductions (sums, dots, losses, normalization statistics) accumulate in
//! f64 before rounding back to f32.

use crate::error::{Error, Result};
use crate::math::tensor::{Parameter, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f32),
    AddBiasRows(VarId, VarId),
    Matmul(VarId, VarId),
    MatmulNT(VarId, VarId),
    Sigmoid(VarId),
    Gelu(VarId),
    Softmax(VarId),
    LayerNorm { x: VarId, gamma: VarId, beta: VarId },
    GatherRows { table: VarId, ids: Vec<usize> },
    SliceRows { x: VarId, start: usize, end: usize },
    SliceCols { x: VarId, start: usize, end: usize },
    ConcatRows(Vec<VarId>),
    ConcatVec(Vec<VarId>),
    ConcatCols(Vec<VarId>),
    ReplaceRow { x: VarId, row: usize, v: VarId },
    SumRows(VarId),
    SumAll(VarId),
    Dot(VarId, VarId),
    ScalarAffine { s: VarId, mul: f32, add: f32 },
    ScaleByScalar { x: VarId, s: VarId },
    CrossEntropyMean { logits: VarId, targets: Vec<usize> },
    Reshape(VarId),
}

struct Node {
    op: Op,
    value: Tensor,
    /// Saved forward values some backward rules need (tanh term for gelu,
    /// normalized activations for layer norm, probabilities for CE).
    aux: Vec<f32>,
    needs_grad: bool,
    /// For scalar reduction nodes: the f64 accumulator before rounding to
    /// f32, kept so finite-difference checks are not limited by the final
    /// cast of the loss.
    precise: Option<f64>,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, aux: Vec<f32>, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            aux,
            needs_grad,
            precise: None,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn set_precise(&mut self, id: VarId, v: f64) {
        self.nodes[id.0].precise = Some(v);
    }

    fn precise_of(&self, id: VarId) -> f64 {
        self.nodes[id.0]
            .precise
            .unwrap_or_else(|| f64::from(self.nodes[id.0].value.data()[0]))
    }

    /// Scalar value of a node at reduction precision (f64 where recorded).
    pub fn scalar_f64(&self, id: VarId) -> f64 {
        self.precise_of(id)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` with respect to node `id`, if any
    /// reached it.
    pub fn grad(&self, id: VarId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn take_grad(&mut self, id: VarId) -> Option<Vec<f32>> {
        self.grads[id.0].take()
    }

    // ── leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> VarId {
        self.push(Op::Leaf, t, Vec::new(), requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.leaf(t, false)
    }

    /// Lease a parameter's current value onto the tape. Frozen parameters
    /// enter as constants.
    pub fn param(&mut self, p: &Parameter) -> VarId {
        self.leaf(p.value().clone(), !p.frozen())
    }

    // ── elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: VarId,
        b: VarId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let scalar = ta.is_scalar();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        let id = self.push(op, value, Vec::new(), needs);
        if scalar {
            let (pa, pb) = (self.precise_of(a), self.precise_of(b));
            let v = match &self.nodes[id.0].op {
                Op::Add(..) => pa + pb,
                Op::Sub(..) => pa - pb,
                Op::Mul(..) => pa * pb,
                _ => f64::from(self.nodes[id.0].value.data()[0]),
            };
            self.set_precise(id, v);
        }
        Ok(id)
    }

    pub fn scale(&mut self, a: VarId, c: f32) -> VarId {
        let ta = self.value(a);
        let scalar = ta.is_scalar();
        let data: Vec<f32> = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(a);
        let id = self.push(Op::Scale(a, c), value, Vec::new(), needs);
        if scalar {
            let p = self.precise_of(a) * f64::from(c);
            self.set_precise(id, p);
        }
        id
    }

    /// `x[m×n] + b[n]`, broadcasting the bias over rows.
    pub fn add_bias_rows(&mut self, x: VarId, b: VarId) -> Result<VarId> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = (tx.rows(), tx.cols());
        if tb.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias_rows",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for r in 0..m {
            for (v, bv) in data[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBiasRows(x, b), value, Vec::new(), needs))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = mm(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), Tensor::new(vec![m, n], data).unwrap(), Vec::new(), needs))
    }

    /// `a[m×k] · b[n×k]ᵀ`, i.e. rows of `a` dotted with rows of `b`.
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = mm_nt(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNT(a, b), Tensor::new(vec![m, n], data).unwrap(), Vec::new(), needs))
    }

    // ── nonlinearities ───────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let data: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| crate::math::tensor::sigmoid(x))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), value, Vec::new(), needs)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        const C: f32 = 0.797_884_56; // sqrt(2/pi)
        const A: f32 = 0.044_715;
        let xs = self.value(a).data();
        let mut data = Vec::with_capacity(xs.len());
        let mut aux = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = (C * (x + A * x * x * x)).tanh();
            aux.push(t);
            data.push(0.5 * x * (1.0 + t));
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(Op::Gelu(a), value, aux, needs)
    }

    /// Row-wise softmax (whole-vector softmax for 1-D input).
    pub fn softmax(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::domain("softmax of an empty tensor"));
        }
        let (m, n) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..m {
            data.extend(crate::math::tensor::softmax(&ta.data()[r * n..(r + 1) * n])?);
        }
        let value = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax(a), value, Vec::new(), needs))
    }

    /// Per-row layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f32) -> Result<VarId> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if self.value(gamma).shape() != [n] || self.value(beta).shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: self.value(gamma).shape().to_vec(),
            });
        }
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(tx.numel());
        // aux layout: xhat (m*n floats) then inv_std (m floats)
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_stds = Vec::with_capacity(m);
        for r in 0..m {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = f64::from(v) - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let inv_std = 1.0 / (var + f64::from(eps)).sqrt();
            inv_stds.push(inv_std as f32);
            for (j, &v) in row.iter().enumerate() {
                let xh = ((f64::from(v) - mean) * inv_std) as f32;
                xhat.push(xh);
                data.push(g[j] * xh + b[j]);
            }
        }
        let mut aux = xhat;
        aux.extend(inv_stds);
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta }, value, aux, needs))
    }

    // ── indexing / assembly ──────────────────────────────────────────

    /// Rows `ids` of a `[V×d]` table, in order, duplicates allowed.
    pub fn gather_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::domain(format!(
                    "gather_rows: row {id} out of range for table with {v} rows"
                )));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data).unwrap();
        let needs = self.needs(table);
        Ok(self.push(
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            value,
            Vec::new(),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if start > end || end > m {
            return Err(Error::domain(format!(
                "slice_rows: range {start}..{end} out of bounds for {m} rows"
            )));
        }
        let data = tx.data()[start * n..end * n].to_vec();
        let value = Tensor::new(vec![end - start, n], data).unwrap();
        let needs = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start, end }, value, Vec::new(), needs))
    }

    pub fn slice_cols(&mut self, x: VarId, start: usize, end: usize) -> Result<VarId> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if start > end || end > n {
            return Err(Error::domain(format!(
                "slice_cols: range {start}..{end} out of bounds for {n} cols"
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&tx.data()[r * n + start..r * n + end]);
        }
        let value = Tensor::new(vec![m, w], data).unwrap();
        let needs = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, end }, value, Vec::new(), needs))
    }

    /// Stack matrices (or `[d]` vectors treated as single rows) vertically.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::domain("concat_rows of zero parts"));
        }
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![n],
                    rhs: tp.shape().to_vec(),
                });
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![rows, n], data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, Vec::new(), needs))
    }

    /// Concatenate 1-D vectors end to end.
    pub fn concat_vec(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::domain("concat_vec of zero parts"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::vector(data);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatVec(parts.to_vec()), value, Vec::new(), needs))
    }

    /// Stack matrices side by side (equal row counts).
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::domain("concat_cols of zero parts"));
        }
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let tp = self.value(p);
            for r in 0..m {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&tp.data()[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(vec![m, total], data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, Vec::new(), needs))
    }

    /// Copy of `x` with row `row` replaced by the vector `v`.
    pub fn replace_row(&mut self, x: VarId, row: usize, v: VarId) -> Result<VarId> {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        if row >= m {
            return Err(Error::domain(format!(
                "replace_row: row {row} out of range for {m} rows"
            )));
        }
        if self.value(v).numel() != n {
            return Err(Error::ShapeMismatch {
                op: "replace_row",
                lhs: tx.shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        data[row * n..(row + 1) * n].copy_from_slice(self.value(v).data());
        let value = Tensor::new(vec![m, n], data).unwrap();
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Op::ReplaceRow { x, row, v }, value, Vec::new(), needs))
    }

    // ── reductions ───────────────────────────────────────────────────

    /// Column sums: `[m×n] -> [n]`.
    pub fn sum_rows(&mut self, x: VarId) -> VarId {
        let tx = self.value(x);
        let (m, n) = (tx.rows(), tx.cols());
        let mut acc = vec![0.0f64; n];
        for r in 0..m {
            for (a, &v) in acc.iter_mut().zip(&tx.data()[r * n..(r + 1) * n]) {
                *a += f64::from(v);
            }
        }
        let value = Tensor::vector(acc.iter().map(|&v| v as f32).collect());
        let needs = self.needs(x);
        self.push(Op::SumRows(x), value, Vec::new(), needs)
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        let needs = self.needs(x);
        let id = self.push(Op::SumAll(x), Tensor::scalar(s as f32), Vec::new(), needs);
        self.set_precise(id, s);
        id
    }

    pub fn dot(&mut self, u: VarId, v: VarId) -> Result<VarId> {
        let (tu, tv) = (self.value(u), self.value(v));
        if tu.numel() != tv.numel() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: tu.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let s: f64 = tu
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum();
        let needs = self.needs(u) || self.needs(v);
        let id = self.push(Op::Dot(u, v), Tensor::scalar(s as f32), Vec::new(), needs);
        self.set_precise(id, s);
        Ok(id)
    }

    /// `mul * s + add` on a scalar node.
    pub fn scalar_affine(&mut self, s: VarId, mul: f32, add: f32) -> Result<VarId> {
        if !self.value(s).is_scalar() {
            return Err(Error::domain("scalar_affine expects a scalar node"));
        }
        let v = mul * self.value(s).data()[0] + add;
        let needs = self.needs(s);
        let p = f64::from(mul) * self.precise_of(s) + f64::from(add);
        let id = self.push(Op::ScalarAffine { s, mul, add }, Tensor::scalar(v), Vec::new(), needs);
        self.set_precise(id, p);
        Ok(id)
    }

    /// Scale every element of `x` by the scalar node `s`.
    pub fn scale_by_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if !self.value(s).is_scalar() {
            return Err(Error::domain("scale_by_scalar expects a scalar node"));
        }
        let sv = self.value(s).data()[0];
        let tx = self.value(x);
        let data: Vec<f32> = tx.data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Op::ScaleByScalar { x, s }, value, Vec::new(), needs))
    }

    /// Mean cross-entropy of `logits[k×V]` rows against `targets[k]`.
    pub fn cross_entropy_mean(&mut self, logits: VarId, targets: &[usize]) -> Result<VarId> {
        let tl = self.value(logits);
        let (k, v) = (tl.rows(), tl.cols());
        if targets.len() != k || k == 0 {
            return Err(Error::domain(format!(
                "cross_entropy_mean: {} targets for {} logit rows",
                targets.len(),
                k
            )));
        }
        let mut aux = Vec::with_capacity(k * v); // per-row softmax probs
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::domain(format!(
                    "cross_entropy_mean: target {t} out of range for {v} classes"
                )));
            }
            let row = &tl.data()[r * v..(r + 1) * v];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &x in row {
                sum += f64::from(x - max).exp();
            }
            let lse = sum.ln() + f64::from(max);
            total += lse - f64::from(row[t]);
            for &x in row {
                aux.push((f64::from(x - max).exp() / sum) as f32);
            }
        }
        let loss = total / k as f64;
        let needs = self.needs(logits);
        let id = self.push(
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss as f32),
            aux,
            needs,
        );
        self.set_precise(id, loss);
        Ok(id)
    }

    /// Reinterpret the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let tx = self.value(x);
        if shape.iter().product::<usize>() != tx.numel() {
            return Err(Error::domain(format!(
                "reshape: {:?} incompatible with {} elements",
                shape,
                tx.numel()
            )));
        }
        let value = Tensor::new(shape, tx.data().to_vec()).unwrap();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, Vec::new(), needs))
    }

    // ── composites ───────────────────────────────────────────────────

    /// `x·w + b` with the bias broadcast over rows.
    pub fn affine(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let xw = self.matmul(x, w)?;
        self.add_bias_rows(xw, b)
    }

    /// Squared Euclidean distance between two equally shaped tensors.
    pub fn squared_distance(&mut self, u: VarId, v: VarId) -> Result<VarId> {
        let d = self.sub(u, v)?;
        let sq = self.mul(d, d)?;
        Ok(self.sum_all(sq))
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[VarId]) -> Result<VarId> {
        let cat = self.concat_vec(parts)?;
        let total = self.sum_all(cat);
        Ok(self.scale(total, 1.0 / parts.len() as f32))
    }

    // ── reverse pass ─────────────────────────────────────────────────

    /// Seed `loss` (a scalar node) with 1 and accumulate gradients through
    /// every recorded operation, skipping subgraphs no tracked leaf feeds.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::domain(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_to(&mut self, id: VarId, contrib: &[f32]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        for (a, c) in slot.iter_mut().zip(contrib) {
            *a += c;
        }
    }

    fn add_to_indexed(&mut self, id: VarId, f: impl Fn(&mut [f32])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = self.grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f32]) {
        // Ops are matched by value shape of their parents; all shapes were
        // validated on the forward pass.
        enum P {
            One(VarId, Vec<f32>),
            Two(VarId, Vec<f32>, VarId, Vec<f32>),
            Many(Vec<(VarId, Vec<f32>)>),
            None,
        }
        let contribution = match &self.nodes[i].op {
            Op::Leaf => P::None,
            Op::Add(a, b) => P::Two(*a, g.to_vec(), *b, g.to_vec()),
            Op::Sub(a, b) => P::Two(*a, g.to_vec(), *b, g.iter().map(|v| -v).collect()),
            Op::Mul(a, b) => {
                let da: Vec<f32> = g
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(gv, bv)| gv * bv)
                    .collect();
                let db: Vec<f32> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(gv, av)| gv * av)
                    .collect();
                P::Two(*a, da, *b, db)
            }
            Op::Scale(a, c) => P::One(*a, g.iter().map(|v| v * c).collect()),
            Op::AddBiasRows(x, b) => {
                let n = self.nodes[b.0].value.numel();
                let m = g.len() / n;
                let mut db = vec![0.0f32; n];
                for r in 0..m {
                    for (a, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *a += gv;
                    }
                }
                P::Two(*x, g.to_vec(), *b, db)
            }
            Op::Matmul(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    out.push((*a, mm_nt(g, tb.data(), m, n, k))); // g[m×n]·bᵀ[n×k]
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, mm_tn(ta.data(), g, m, k, n))); // aᵀ[k×m]·g[m×n]
                }
                P::Many(out)
            }
            Op::MatmulNT(a, b) => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].needs_grad {
                    out.push((*a, mm(g, tb.data(), m, n, k))); // g[m×n]·b[n×k]
                }
                if self.nodes[b.0].needs_grad {
                    out.push((*b, mm_tn(g, ta.data(), m, n, k))); // gᵀ[n×m]·a[m×k]
                }
                P::Many(out)
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                P::One(
                    *a,
                    g.iter().zip(y).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                )
            }
            Op::Gelu(a) => {
                const C: f32 = 0.797_884_56;
                const A: f32 = 0.044_715;
                let xs = self.nodes[a.0].value.data();
                let ts = &self.nodes[i].aux;
                let dx: Vec<f32> = g
                    .iter()
                    .zip(xs.iter().zip(ts))
                    .map(|(gv, (&x, &t))| {
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                        gv * d
                    })
                    .collect();
                P::One(*a, dx)
            }
            Op::Softmax(a) => {
                let y = self.nodes[i].value.data();
                let n = self.nodes[i].value.cols();
                let m = y.len() / n;
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..m {
                    let ys = &y[r * n..(r + 1) * n];
                    let gs = &g[r * n..(r + 1) * n];
                    let inner: f64 = ys
                        .iter()
                        .zip(gs)
                        .map(|(&yv, &gv)| f64::from(yv) * f64::from(gv))
                        .sum();
                    for ((d, &yv), &gv) in dx[r * n..(r + 1) * n].iter_mut().zip(ys).zip(gs) {
                        *d = yv * (gv - inner as f32);
                    }
                }
                P::One(*a, dx)
            }
            Op::LayerNorm { x, gamma, beta } => {
                let n = self.nodes[x.0].value.cols();
                let m = self.nodes[x.0].value.rows();
                let aux = &self.nodes[i].aux;
                let xhat = &aux[..m * n];
                let inv_std = &aux[m * n..];
                let gam = self.nodes[gamma.0].value.data();
                let mut dx = vec![0.0f32; m * n];
                let mut dgamma = vec![0.0f32; n];
                let mut dbeta = vec![0.0f32; n];
                for r in 0..m {
                    let gs = &g[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    let mut sum_dxhat = 0.0f64;
                    let mut sum_dxhat_xhat = 0.0f64;
                    for j in 0..n {
                        dgamma[j] += gs[j] * xh[j];
                        dbeta[j] += gs[j];
                        let dxh = f64::from(gs[j]) * f64::from(gam[j]);
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * f64::from(xh[j]);
                    }
                    let scale = f64::from(inv_std[r]) / n as f64;
                    for j in 0..n {
                        let dxh = f64::from(gs[j]) * f64::from(gam[j]);
                        dx[r * n + j] = (scale
                            * (n as f64 * dxh - sum_dxhat - f64::from(xh[j]) * sum_dxhat_xhat))
                            as f32;
                    }
                }
                P::Many(vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)])
            }
            Op::GatherRows { table, ids } => {
                let d = self.nodes[i].value.cols();
                let table = *table;
                let ids = ids.clone();
                let g = g.to_vec();
                self.add_to_indexed(table, |slot| {
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &gv) in slot[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d])
                        {
                            *a += gv;
                        }
                    }
                });
                P::None
            }
            Op::SliceRows { x, start, .. } => {
                let n = self.nodes[x.0].value.cols();
                let (x, start) = (*x, *start);
                let g = g.to_vec();
                self.add_to_indexed(x, |slot| {
                    for (a, &gv) in slot[start * n..start * n + g.len()].iter_mut().zip(&g) {
                        *a += gv;
                    }
                });
                P::None
            }
            Op::SliceCols { x, start, end } => {
                let n = self.nodes[x.0].value.cols();
                let m = self.nodes[x.0].value.rows();
                let (x, start, w) = (*x, *start, end - start);
                let g = g.to_vec();
                self.add_to_indexed(x, |slot| {
                    for r in 0..m {
                        for j in 0..w {
                            slot[r * n + start + j] += g[r * w + j];
                        }
                    }
                });
                P::None
            }
            Op::ConcatRows(parts) | Op::ConcatVec(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    out.push((p, g[off..off + len].to_vec()));
                    off += len;
                }
                P::Many(out)
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut dp = vec![0.0f32; m * w];
                    for r in 0..m {
                        dp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                    }
                    out.push((p, dp));
                    off += w;
                }
                P::Many(out)
            }
            Op::ReplaceRow { x, row, v } => {
                let n = self.nodes[v.0].value.numel();
                let mut dx = g.to_vec();
                dx[row * n..(row + 1) * n].iter_mut().for_each(|z| *z = 0.0);
                let dv = g[row * n..(row + 1) * n].to_vec();
                P::Two(*x, dx, *v, dv)
            }
            Op::SumRows(x) => {
                let n = g.len();
                let m = self.nodes[x.0].value.rows();
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend_from_slice(g);
                }
                P::One(*x, dx)
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].value.numel();
                P::One(*x, vec![g[0]; n])
            }
            Op::Dot(u, v) => {
                let g0 = g[0];
                let du: Vec<f32> = self.nodes[v.0].value.data().iter().map(|x| g0 * x).collect();
                let dv: Vec<f32> = self.nodes[u.0].value.data().iter().map(|x| g0 * x).collect();
                P::Two(*u, du, *v, dv)
            }
            Op::ScalarAffine { s, mul, .. } => P::One(*s, vec![g[0] * mul]),
            Op::ScaleByScalar { x, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                let dx: Vec<f32> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g
                    .iter()
                    .zip(self.nodes[x.0].value.data())
                    .map(|(&gv, &xv)| f64::from(gv) * f64::from(xv))
                    .sum();
                P::Two(*x, dx, *s, vec![ds as f32])
            }
            Op::CrossEntropyMean { logits, targets } => {
                let v = self.nodes[logits.0].value.cols();
                let k = targets.len();
                let probs = &self.nodes[i].aux;
                let scale = g[0] / k as f32;
                let mut dl = Vec::with_capacity(k * v);
                for (r, &t) in targets.iter().enumerate() {
                    for (j, &p) in probs[r * v..(r + 1) * v].iter().enumerate() {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl.push((p - onehot) * scale);
                    }
                }
                P::One(*logits, dl)
            }
            Op::Reshape(x) => P::One(*x, g.to_vec()),
        };
        match contribution {
            P::None => {}
            P::One(a, da) => self.add_to(a, &da),
            P::Two(a, da, b, db) => {
                self.add_to(a, &da);
                self.add_to(b, &db);
            }
            P::Many(list) => {
                for (p, dp) in list {
                    self.add_to(p, &dp);
                }
            }
        }
    }

    /// Check every recorded value (and gradient, if present) for NaN/Inf.
    pub fn check_finite(&self) -> Result<()> {
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.value.all_finite() {
                return Err(Error::domain(format!("non-finite value at node {idx}")));
            }
            if let Some(g) = &self.grads[idx] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::domain(format!("non-finite gradient at node {idx}")));
                }
            }
        }
        Ok(())
    }
}

// ── raw matrix kernels ───────────────────────────────────────────────

/// `a[m×k] · b[k×n]`, i-k-j loop order for unit-stride inner updates.
pub fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn mm_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (av, bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `a[m×k]ᵀ · b[m×n]` -> `[k×n]`.
pub fn mm_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i2 = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i2).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::uniform(vec![4, 5], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(vec![5, 3], -1.0, 1.0, &mut rng);
        // independent naive oracle
        let mut expected = vec![0.0f32; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += a.data()[i * 5 + p] * b.data()[p * 3 + j];
                }
                expected[i * 3 + j] = s;
            }
        }
        let mut tape = Tape::new();
        let av = tape.constant(a);
        let bv = tape.constant(b);
        let c = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(&expected) {
            assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn backward_square() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut tape = Tape::new();
        let frozen = Parameter::frozen_param("w", Tensor::vector(vec![2.0]));
        let w = tape.param(&frozen);
        let x = tape.leaf(Tensor::vector(vec![3.0]), true);
        let y = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        // gradient still flows through the op into the unfrozen side
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn gather_accumulates_duplicate_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let rows = tape.gather_rows(table, &[1, 1, 2]).unwrap();
        let loss = tape.sum_all(rows);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0., 0., 2., 2., 1., 1.]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(vec![4, 7], -3.0, 3.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv).unwrap();
        for r in 0..4 {
            let s: f32 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 0.5]).unwrap());
        let loss = tape.cross_entropy_mean(logits, &[1]).unwrap();
        let probs = crate::math::tensor::softmax(&[1.0, 2.0, 0.5]).unwrap();
        let expected = -probs[1].ln();
        assert!((tape.value(loss).data()[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 3, vec![7., 8., 9.]).unwrap());
        let cat = tape.concat_rows(&[a, b]).unwrap();
        let back = tape.slice_rows(cat, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), &[7., 8., 9.]);
        let cols = tape.slice_cols(cat, 1, 3).unwrap();
        assert_eq!(tape.value(cols).data(), &[2., 3., 5., 6., 8., 9.]);
    }
}
