//! Dense row-major f32 tensors and named trainable parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A dense tensor of 32-bit reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::domain(format!(
                "tensor data length {} does not match shape {:?} (expected {})",
                data.len(),
                shape,
                expected
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, lo: f32, hi: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn normal<R: Rng>(shape: Vec<usize>, mean: f32, std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(mean, std).expect("std must be finite and positive");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.len() <= 1
    }

    /// Row count when 2-D, 1 for vectors.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count when 2-D, element count for vectors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.data.len(),
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named tensor with a gradient accumulator and a freeze switch. Frozen
/// parameters never receive gradient and are skipped by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
    grad: Vec<f32>,
    frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = vec![0.0; value.numel()];
        Parameter {
            name: name.into(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn frozen_param(name: impl Into<String>, value: Tensor) -> Self {
        let mut p = Parameter::new(name, value);
        p.frozen = true;
        p
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &[f32] {
        &self.grad
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Sum `g` into the gradient slot. No-op for frozen parameters, so a
    /// frozen parameter's grad stays all-zero through any backward pass.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        if self.frozen {
            return;
        }
        debug_assert_eq!(g.len(), self.grad.len());
        for (acc, v) in self.grad.iter_mut().zip(g) {
            *acc += v;
        }
    }

    pub fn zero_grad(&mut self) {
        for v in &mut self.grad {
            *v = 0.0;
        }
    }
}

/// Numerically stable softmax of a vector; inputs are shifted by their max.
pub fn softmax(xs: &[f32]) -> Result<Vec<f32>> {
    if xs.is_empty() {
        return Err(Error::domain("softmax of an empty vector"));
    }
    let max = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = xs.iter().map(|&x| f64::from(x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / sum) as f32).collect())
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
