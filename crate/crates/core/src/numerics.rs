//! Dense `f64` matrices and the handful of differentiable pieces the
//! cascade heads need. Every op has an explicit backward; there is no tape.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Platform-independent seeded generator used everywhere randomness is needed.
pub type RngState = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> RngState {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::dim("matrix buffer", rows * cols, values.len()));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("matrix row", cols, r.len()));
            }
            values.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut values = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            values,
        }
    }

    /// Horizontal concatenation `[a | b | ...]`.
    pub fn hconcat(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::dim("hconcat rows", rows, bad.rows));
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                values.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, values })
    }

    /// Column slice `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        let mut values = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            values.extend_from_slice(&self.row(r)[start..start + width]);
        }
        Matrix {
            rows: self.rows,
            cols: width,
            values,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim("matrix add", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Fully connected layer `y = x·Wᵀ + b` with gradient accumulators and
/// AdamW moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub grad_weight: Matrix,
    pub grad_bias: Vec<f64>,
    moments: Moments,
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    m_weight: Vec<f64>,
    v_weight: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

impl Moments {
    fn zeros(out: usize, inp: usize) -> Self {
        Moments {
            m_weight: vec![0.0; out * inp],
            v_weight: vec![0.0; out * inp],
            m_bias: vec![0.0; out],
            v_bias: vec![0.0; out],
        }
    }
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
            grad_weight: Matrix::zeros(output, input),
            grad_bias: vec![0.0; output],
            moments: Moments::zeros(output, input),
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)) for weights, zero bias.
    pub fn init_uniform(input: usize, output: usize, rng: &mut RngState) -> Self {
        let mut layer = Linear::zeros(input, output);
        let bound = (6.0 / (input + output) as f64).sqrt();
        for w in layer.weight.values_mut() {
            *w = rng.random_range(-bound..bound);
        }
        layer
    }

    pub fn from_params(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::dim("linear bias", weight.rows(), bias.len()));
        }
        let mut layer = Linear::zeros(weight.cols(), weight.rows());
        layer.weight = weight;
        layer.bias = bias;
        Ok(layer)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let (inp, out) = (self.input_dim(), self.output_dim());
        if x.cols() != inp {
            return Err(Error::dim(
                "linear input",
                format!("[batch x {inp}] for weight [{out} x {inp}]"),
                format!("[{} x {}]", x.rows(), x.cols()),
            ));
        }
        let mut y = Matrix::zeros(x.rows(), out);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let yr = y.row_mut(b);
            for (o, yo) in yr.iter_mut().enumerate() {
                let w = self.weight.row(o);
                *yo = self.bias[o] + dot(w, xr);
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. `x`.
    pub fn backward(&mut self, x: &Matrix, grad_out: &Matrix) -> Result<Matrix> {
        if grad_out.shape() != (x.rows(), self.output_dim()) || x.cols() != self.input_dim() {
            return Err(Error::dim(
                "linear backward",
                format!("x [{} x {}], grad [{} x {}]", x.rows(), self.input_dim(), x.rows(), self.output_dim()),
                format!("x [{} x {}], grad [{} x {}]", x.rows(), x.cols(), grad_out.rows(), grad_out.cols()),
            ));
        }
        let inp = self.input_dim();
        let mut grad_x = Matrix::zeros(x.rows(), inp);
        for b in 0..x.rows() {
            let xr = x.row(b);
            let gr = grad_out.row(b);
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                self.grad_bias[o] += g;
                axpy(g, xr, self.grad_weight.row_mut(o));
                axpy(g, self.weight.row(o), grad_x.row_mut(b));
            }
        }
        Ok(grad_x)
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.values_mut().fill(0.0);
        self.grad_bias.fill(0.0);
    }

    pub fn grads_finite(&self) -> bool {
        self.grad_weight.all_finite() && self.grad_bias.iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// NaN passes through so divergence stays visible downstream.
pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for v in y.values_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Backward of ReLU given its input; the subgradient at 0 is 0.
pub fn relu_backward(x: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut g = grad_out.clone();
    for (gi, &xi) in g.values_mut().iter_mut().zip(x.values()) {
        if xi <= 0.0 {
            *gi = 0.0;
        }
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Returns the output and the per-entry scale (0 or
/// 1/(1-rate)) that backward must reuse; `None` when the op is the identity.
pub fn dropout(x: &Matrix, rate: f64, mode: Mode, rng: &mut RngState) -> Result<(Matrix, Option<Vec<f64>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..x.values().len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, s) in y.values_mut().iter_mut().zip(&scale) {
        *v *= s;
    }
    Ok((y, Some(scale)))
}

pub fn dropout_backward(grad_out: &Matrix, scale: Option<&[f64]>) -> Matrix {
    let mut g = grad_out.clone();
    if let Some(scale) = scale {
        for (v, s) in g.values_mut().iter_mut().zip(scale) {
            *v *= s;
        }
    }
    g
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamW {
    /// One update with decoupled weight decay. `step` starts at 1.
    pub fn step(&self, layer: &mut Linear, step: u64) -> Result<()> {
        if step == 0 {
            return Err(Error::Parameter("AdamW step index starts at 1".into()));
        }
        if !layer.grads_finite() {
            return Err(Error::Divergence("AdamW received a non-finite gradient".into()));
        }
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let Moments {
            m_weight,
            v_weight,
            m_bias,
            v_bias,
        } = &mut layer.moments;
        self.update(layer.weight.values_mut(), layer.grad_weight.values(), m_weight, v_weight, bc1, bc2);
        self.update(&mut layer.bias, &layer.grad_bias, m_bias, v_bias, bc1, bc2);
        Ok(())
    }

    fn update(&self, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], bc1: f64, bc2: f64) {
        for i in 0..p.len() {
            p[i] -= self.lr * self.weight_decay * p[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// One block of parameters for [`gradient_check`]: current values and the
/// analytic gradient at those values.
#[derive(Clone, Debug)]
pub struct GradBlock {
    pub name: String,
    pub values: Vec<f64>,
    pub analytic: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Compares analytic gradients against central differences of `loss`.
/// `loss` receives every block's values (one perturbed at a time).
/// Relative error is |a - n| / max(|a|, |n|, 1e-8).
pub fn gradient_check<F>(blocks: &[GradBlock], mut loss: F, tolerance: f64) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut values: Vec<Vec<f64>> = blocks.iter().map(|b| b.values.clone()).collect();
    let mut report = GradCheckReport {
        tolerance,
        blocks: Vec::with_capacity(blocks.len()),
    };
    for (bi, block) in blocks.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..block.values.len() {
            let orig = values[bi][i];
            values[bi][i] = orig + FD_STEP;
            let plus = loss(&values);
            values[bi][i] = orig - FD_STEP;
            let minus = loss(&values);
            values[bi][i] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = block.analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
        }
        report.blocks.push(BlockCheck {
            name: block.name.clone(),
            max_rel_error: worst,
            passed: worst < tolerance,
        });
    }
    report
}

/// One stored parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Parameter checkpoint: tensors keyed by `module.path/param`, plus free-form
/// metadata (checksums, variant, config).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn put_linear(&mut self, prefix: &str, layer: &Linear) {
        self.params.insert(
            format!("{prefix}/weight"),
            StoredTensor {
                shape: vec![layer.output_dim(), layer.input_dim()],
                values: layer.weight.values().to_vec(),
            },
        );
        self.params.insert(
            format!("{prefix}/bias"),
            StoredTensor {
                shape: vec![layer.output_dim()],
                values: layer.bias.clone(),
            },
        );
    }

    /// Loads weights into `layer`, failing on a missing key or any shape mismatch.
    pub fn load_linear(&self, prefix: &str, layer: &mut Linear) -> Result<()> {
        let w = self.tensor(&format!("{prefix}/weight"), &[layer.output_dim(), layer.input_dim()])?;
        let b = self.tensor(&format!("{prefix}/bias"), &[layer.output_dim()])?;
        layer.weight.values_mut().copy_from_slice(&w.values);
        layer.bias.copy_from_slice(&b.values);
        Ok(())
    }

    fn tensor(&self, key: &str, shape: &[usize]) -> Result<&StoredTensor> {
        let t = self
            .params
            .get(key)
            .ok_or_else(|| Error::Config(format!("checkpoint has no parameter {key:?}")))?;
        if t.shape != shape || t.values.len() != shape.iter().product::<usize>() {
            return Err(Error::dim(format!("checkpoint parameter {key}"), format!("{shape:?}"), format!("{:?}", t.shape)));
        }
        Ok(t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
