//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and enough context
//! to compute its vector-Jacobian product. [`Tape::backward`] consumes the tape
//! and walks it once in reverse.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a causal mask writes into the strictly upper triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Masked scores become 0 and still enter softmax denominators as exp(0).
    #[default]
    LiteralZero,
    /// Masked scores become -inf and receive exactly zero weight.
    NegInf,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Softmax { x: Var, axis: usize },
    CausalMask(Var),
    CausalConv { x: Var, kernel: Var, dilation: usize },
    CausalWeightedSum { weights: Var, src: Var },
    LowerRowSum(Var),
    ScaleRows { x: Var, scale: Var },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not reach it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of ops whose vector-Jacobian product was evaluated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize), TensorError> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(TensorError::Shape(format!("{what} must be rank 2, got {s:?}"))),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `[m,n] x [n,p]`, i-k-j loop order.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// (outer, len, inner) strides for iterating along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, data: Vec<f64>, shape: &[usize], op: Op, requires_grad: bool) -> Var {
        let value = Tensor::from_vec(shape, data).expect("op produced consistent shape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `tensor` as an input; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        let requires_grad = value.requires_grad();
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut value = tensor;
        value.set_requires_grad(false);
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, n) = dims2(self.value(a), "matmul lhs")?;
        let (n2, p) = dims2(self.value(b), "matmul rhs")?;
        if n != n2 {
            return Err(TensorError::Shape(format!(
                "matmul inner dimensions differ: [{m},{n}] x [{n2},{p}]"
            )));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, n, p);
        finite("matmul", &out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, &[m, p], Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2(self.value(a), "transpose input")?;
        let out = transpose_raw(self.value(a).data(), r, c);
        let rg = self.rg(a);
        Ok(self.push(out, &[c, r], Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        finite("add", &out)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, &shape, Op::Add(a, b), rg))
    }

    /// `[m,n] + [n]`, adding `bias` to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = dims2(self.value(x), "add_row_bias input")?;
        if self.value(bias).shape() != [n] {
            return Err(TensorError::Shape(format!(
                "bias {:?} does not match row width {n}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        finite("add_row_bias", &out)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, &[m, n], Op::AddRowBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        finite("mul", &out)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, &shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        finite("scale", &out)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, &shape, Op::Scale(a, factor), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, &shape, Op::Relu(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        finite("gelu", &out)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, &shape, Op::Gelu(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(a).data().iter().sum();
        finite("sum", &[s])?;
        let rg = self.rg(a);
        Ok(self.push(vec![s], &[], Op::Sum(a), rg))
    }

    /// Softmax along `axis` with max subtraction. Entries equal to `-inf`
    /// receive weight 0; a slice that is entirely `-inf` is an error.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Shape(format!(
                "softmax axis {axis} out of range for rank {}",
                shape.len()
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let idx = |a: usize| base + a * inner;
                let max = (0..n).map(|a| src[idx(a)]).fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::NonFinite { op: "softmax" });
                }
                let mut z = 0.0;
                for a in 0..n {
                    let e = (src[idx(a)] - max).exp();
                    out[idx(a)] = e;
                    z += e;
                }
                for a in 0..n {
                    out[idx(a)] /= z;
                }
            }
        }
        finite("softmax", &out)?;
        let rg = self.rg(x);
        Ok(self.push(out, &shape, Op::Softmax { x, axis }, rg))
    }

    /// Keeps the lower triangle (`i >= j`) of a square matrix.
    pub fn causal_mask(&mut self, x: Var, mode: MaskMode) -> Result<Var, TensorError> {
        let (r, c) = dims2(self.value(x), "causal_mask input")?;
        if r != c {
            return Err(TensorError::Shape(format!(
                "causal_mask needs a square matrix, got [{r},{c}]"
            )));
        }
        let fill = match mode {
            MaskMode::LiteralZero => 0.0,
            MaskMode::NegInf => f64::NEG_INFINITY,
        };
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            for v in &mut out[i * c + i + 1..(i + 1) * c] {
                *v = fill;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, &[r, c], Op::CausalMask(x), rg))
    }

    /// Causal dilated convolution of `x: [C_in, T]` with `kernel: [C_out, C_in, k]`.
    ///
    /// Tap `k-1` reads time `t`, tap `j` reads `t - (k-1-j)*dilation`; taps
    /// before the start of the sequence read zero.
    pub fn causal_conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        dilation: usize,
    ) -> Result<Var, TensorError> {
        let (c_in, t_len) = dims2(self.value(x), "conv input")?;
        let (c_out, kc_in, k) = match *self.value(kernel).shape() {
            [o, i, k] => (o, i, k),
            ref s => {
                return Err(TensorError::Shape(format!(
                    "conv kernel must be [C_out, C_in, k], got {s:?}"
                )))
            }
        };
        if kc_in != c_in {
            return Err(TensorError::Shape(format!(
                "conv kernel expects {kc_in} input channels, input has {c_in}"
            )));
        }
        if dilation == 0 {
            return Err(TensorError::Shape("dilation must be at least 1".into()));
        }
        let xd = self.value(x).data();
        let wd = self.value(kernel).data();
        let mut out = vec![0.0; c_out * t_len];
        for o in 0..c_out {
            let orow = &mut out[o * t_len..(o + 1) * t_len];
            for c in 0..c_in {
                let xrow = &xd[c * t_len..(c + 1) * t_len];
                for j in 0..k {
                    let w = wd[(o * c_in + c) * k + j];
                    let shift = (k - 1 - j) * dilation;
                    if w == 0.0 || shift >= t_len {
                        continue;
                    }
                    for (dst, &src) in orow[shift..].iter_mut().zip(xrow) {
                        *dst += w * src;
                    }
                }
            }
        }
        finite("causal_conv1d", &out)?;
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            out,
            &[c_out, t_len],
            Op::CausalConv {
                x,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// `out[t] = sum_{i <= t} weights[t][i] * src[i]`; entries above the
    /// diagonal of `weights` are never read.
    pub fn causal_weighted_sum(&mut self, weights: Var, src: Var) -> Result<Var, TensorError> {
        let (t_len, t2) = dims2(self.value(weights), "attention weights")?;
        let (ts, d) = dims2(self.value(src), "attention source")?;
        if t_len != t2 || ts != t_len {
            return Err(TensorError::Shape(format!(
                "weights [{t_len},{t2}] incompatible with source [{ts},{d}]"
            )));
        }
        let w = self.value(weights).data();
        let s = self.value(src).data();
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            let orow = &mut out[t * d..(t + 1) * d];
            for i in 0..=t {
                let wti = w[t * t_len + i];
                for (o, &sv) in orow.iter_mut().zip(&s[i * d..(i + 1) * d]) {
                    *o += wti * sv;
                }
            }
        }
        finite("causal_weighted_sum", &out)?;
        let rg = self.rg(weights) || self.rg(src);
        Ok(self.push(out, &[t_len, d], Op::CausalWeightedSum { weights, src }, rg))
    }

    /// Row sums over the lower triangle: `m[t] = sum_{j <= t} w[t][j]`.
    pub fn lower_row_sum(&mut self, w: Var) -> Result<Var, TensorError> {
        let (r, c) = dims2(self.value(w), "lower_row_sum input")?;
        if r != c {
            return Err(TensorError::Shape(format!(
                "lower_row_sum needs a square matrix, got [{r},{c}]"
            )));
        }
        let wd = self.value(w).data();
        let out: Vec<f64> = (0..r).map(|t| wd[t * c..=t * c + t].iter().sum()).collect();
        finite("lower_row_sum", &out)?;
        let rg = self.rg(w);
        Ok(self.push(out, &[r], Op::LowerRowSum(w), rg))
    }

    /// Multiplies row `t` of `x: [T, D]` by `scale[t]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var, TensorError> {
        let (t_len, d) = dims2(self.value(x), "scale_rows input")?;
        if self.value(scale).shape() != [t_len] {
            return Err(TensorError::Shape(format!(
                "row scale {:?} does not match {t_len} rows",
                self.value(scale).shape()
            )));
        }
        let s = self.value(scale).data();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(d)
            .zip(s)
            .flat_map(|(row, &m)| row.iter().map(move |v| v * m))
            .collect();
        finite("scale_rows", &out)?;
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(out, &[t_len, d], Op::ScaleRows { x, scale }, rg))
    }

    /// Rows `ids[t]` of `table: [V, D]`, stacked into `[T, D]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (v, d) = dims2(self.value(table), "embedding table")?;
        if ids.is_empty() {
            return Err(TensorError::Shape("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(TensorError::Index(format!(
                "id {bad} out of range for table of {v} rows"
            )));
        }
        let td = self.value(table).data();
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&id| td[id * d..(id + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(table);
        Ok(self.push(
            out,
            &[ids.len(), d],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[t, targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (t_len, v) = dims2(self.value(logits), "logits")?;
        if targets.len() != t_len {
            return Err(TensorError::Shape(format!(
                "{} targets for {t_len} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
            return Err(TensorError::Index(format!(
                "target {bad} out of range for {v} classes"
            )));
        }
        let ld = self.value(logits).data();
        let mut total = 0.0;
        for (row, &y) in ld.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let loss = total / t_len as f64;
        finite("cross_entropy", &[loss])?;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            &[],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients, TensorError> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
                slot => *slot = Some(contrib),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let p = val(*b).shape()[1];
                    if rg(*a) {
                        let bt = transpose_raw(val(*b).data(), n, p);
                        acc(&mut grads, *a, matmul_raw(&g, &bt, m, p, n));
                    }
                    if rg(*b) {
                        let at = transpose_raw(val(*a).data(), m, n);
                        acc(&mut grads, *b, matmul_raw(&at, &g, n, m, p));
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                    acc(&mut grads, *a, transpose_raw(&g, c, r));
                }
                Op::Add(a, b) => {
                    if rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRowBias(x, bias) => {
                    let n = val(*bias).numel();
                    if rg(*bias) {
                        let mut gb = vec![0.0; n];
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        acc(&mut grads, *bias, gb);
                    }
                    if rg(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if rg(*a) {
                        let c = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                        acc(&mut grads, *a, c);
                    }
                    if rg(*b) {
                        let c = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                        acc(&mut grads, *b, c);
                    }
                }
                Op::Scale(a, f) => {
                    acc(&mut grads, *a, g.iter().map(|g| g * f).collect());
                }
                Op::Relu(a) => {
                    let c = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, c);
                }
                Op::Gelu(a) => {
                    let c = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| {
                            let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                            let d = 0.5 * (1.0 + th)
                                + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * d
                        })
                        .collect();
                    acc(&mut grads, *a, c);
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, vec![g[0]; val(*a).numel()]);
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                    let mut c = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n)
                                .map(|a| y[base + a * inner] * g[base + a * inner])
                                .sum();
                            for a in 0..n {
                                let k = base + a * inner;
                                c[k] = y[k] * (g[k] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *x, c);
                }
                Op::CausalMask(x) => {
                    let n = node.value.shape()[0];
                    let mut c = g;
                    for i in 0..n {
                        for v in &mut c[i * n + i + 1..(i + 1) * n] {
                            *v = 0.0;
                        }
                    }
                    acc(&mut grads, *x, c);
                }
                Op::CausalConv {
                    x,
                    kernel,
                    dilation,
                } => {
                    let (c_in, t_len) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let ks = val(*kernel).shape();
                    let (c_out, k) = (ks[0], ks[2]);
                    let xd = val(*x).data();
                    let wd = val(*kernel).data();
                    let mut gx = rg(*x).then(|| vec![0.0; xd.len()]);
                    let mut gw = rg(*kernel).then(|| vec![0.0; wd.len()]);
                    for o in 0..c_out {
                        let grow = &g[o * t_len..(o + 1) * t_len];
                        for c in 0..c_in {
                            for j in 0..k {
                                let shift = (k - 1 - j) * dilation;
                                if shift >= t_len {
                                    continue;
                                }
                                let widx = (o * c_in + c) * k + j;
                                let xrow = &xd[c * t_len..(c + 1) * t_len];
                                if let Some(gw) = gw.as_mut() {
                                    gw[widx] += grow[shift..]
                                        .iter()
                                        .zip(xrow)
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let w = wd[widx];
                                    let gxrow = &mut gx[c * t_len..(c + 1) * t_len];
                                    for (dst, &gv) in gxrow.iter_mut().zip(&grow[shift..]) {
                                        *dst += w * gv;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(gx) = gx {
                        acc(&mut grads, *x, gx);
                    }
                    if let Some(gw) = gw {
                        acc(&mut grads, *kernel, gw);
                    }
                }
                Op::CausalWeightedSum { weights, src } => {
                    let t_len = val(*weights).shape()[0];
                    let d = val(*src).shape()[1];
                    let w = val(*weights).data();
                    let s = val(*src).data();
                    if rg(*weights) {
                        let mut gw = vec![0.0; t_len * t_len];
                        for t in 0..t_len {
                            let grow = &g[t * d..(t + 1) * d];
                            for i in 0..=t {
                                gw[t * t_len + i] = grow
                                    .iter()
                                    .zip(&s[i * d..(i + 1) * d])
                                    .map(|(a, b)| a * b)
                                    .sum();
                            }
                        }
                        acc(&mut grads, *weights, gw);
                    }
                    if rg(*src) {
                        let mut gs = vec![0.0; t_len * d];
                        for t in 0..t_len {
                            let grow = &g[t * d..(t + 1) * d];
                            for i in 0..=t {
                                let wti = w[t * t_len + i];
                                for (dst, &gv) in gs[i * d..(i + 1) * d].iter_mut().zip(grow) {
                                    *dst += wti * gv;
                                }
                            }
                        }
                        acc(&mut grads, *src, gs);
                    }
                }
                Op::LowerRowSum(w) => {
                    let n = val(*w).shape()[0];
                    let mut c = vec![0.0; n * n];
                    for t in 0..n {
                        c[t * n..=t * n + t].fill(g[t]);
                    }
                    acc(&mut grads, *w, c);
                }
                Op::ScaleRows { x, scale } => {
                    let d = val(*x).shape()[1];
                    if rg(*x) {
                        let c = g
                            .chunks(d)
                            .zip(val(*scale).data())
                            .flat_map(|(row, &m)| row.iter().map(move |v| v * m))
                            .collect();
                        acc(&mut grads, *x, c);
                    }
                    if rg(*scale) {
                        let c = g
                            .chunks(d)
                            .zip(val(*x).data().chunks(d))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect();
                        acc(&mut grads, *scale, c);
                    }
                }
                Op::Gather { table, ids } => {
                    let d = val(*table).shape()[1];
                    let mut c = vec![0.0; val(*table).numel()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        c[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                    acc(&mut grads, *table, c);
                }
                Op::CrossEntropy { logits, targets } => {
                    let v = val(*logits).shape()[1];
                    let scale = g[0] / targets.len() as f64;
                    let mut c = Vec::with_capacity(val(*logits).numel());
                    for (row, &y) in val(*logits).data().chunks(v).zip(targets) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        c.extend(row.iter().enumerate().map(|(j, x)| {
                            let p = (x - max).exp() / z;
                            scale * (p - if j == y { 1.0 } else { 0.0 })
                        }));
                    }
                    acc(&mut grads, *logits, c);
                }
            }
        }

        // only leaves keep their gradient
        for (slot, node) in grads.iter_mut().zip(&nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads, visited })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.5, -2.0, 3.0, 4.0]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.5, -2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        let yd = tape.value(y).data();
        assert!((yd[0] - 0.25).abs() < 1e-15 && (yd[1] - 0.75).abs() < 1e-15);

        let x = tape.constant(Tensor::constant(&[5], 2.5).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|v| (v - 0.2).abs() < 1e-15));

        let x = tape.constant(Tensor::zeros(&[2]).unwrap());
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_neg_inf_gets_zero_weight() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, f64::NEG_INFINITY, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.0, 0.5]);
        let x = tape.constant(t(&[2], &[f64::NEG_INFINITY; 2]));
        assert!(matches!(
            tape.softmax(x, 0),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = tape.causal_conv1d(x, k, 1).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0]);

        // single tap on the newest position is the identity
        let x = tape.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 7.0]));
        let mut kd = vec![0.0; 2 * 2 * 3];
        // kernel layout [c_out, c_in, tap]; taps (0, 0, 2) and (1, 1, 2)
        kd[2] = 1.0;
        kd[11] = 1.0;
        let k = tape.constant(t(&[2, 2, 3], &kd));
        let y = tape.causal_conv1d(x, k, 2).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let k = tape.constant(Tensor::zeros(&[2, 3, 2]).unwrap());
        assert!(matches!(
            tape.causal_conv1d(x, k, 1),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn conv_dilation_reads_spaced_taps() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]));
        let k = tape.constant(t(&[1, 1, 2], &[10.0, 1.0]));
        let y = tape.causal_conv1d(x, k, 2).unwrap();
        // y[t] = x[t] + 10 x[t-2]
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 13.0, 24.0, 35.0]);
    }

    #[test]
    fn mask_modes() {
        let mut tape = Tape::new();
        let w = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = tape.causal_mask(w, MaskMode::LiteralZero).unwrap();
        assert_eq!(tape.value(z).data(), &[1.0, 0.0, 3.0, 4.0]);
        let n = tape.causal_mask(w, MaskMode::NegInf).unwrap();
        assert_eq!(tape.value(n).data(), &[1.0, f64::NEG_INFINITY, 3.0, 4.0]);
        let one = tape.constant(t(&[1, 1], &[5.0]));
        let m = tape.causal_mask(one, MaskMode::NegInf).unwrap();
        assert_eq!(tape.value(m).data(), &[5.0]);
        let rect = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
        assert!(tape.causal_mask(rect, MaskMode::LiteralZero).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 4]).unwrap());
        let loss = tape.cross_entropy(l, &[0, 3, 1]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4f64.ln()).abs() < 1e-15);

        let mut data = vec![0.0; 8];
        data[1] = 20.0;
        data[4 + 2] = 20.0;
        let l = tape.constant(t(&[2, 4], &data));
        let loss = tape.cross_entropy(l, &[1, 2]).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-8);

        assert!(matches!(
            tape.cross_entropy(l, &[1, 4]),
            Err(TensorError::Index(_))
        ));
    }

    #[test]
    fn gather_repeats_rows_and_checks_range() {
        let mut tape = Tape::new();
        let table = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = tape.gather_rows(table, &[0, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            tape.gather_rows(table, &[3]),
            Err(TensorError::Index(_))
        ));
    }

    #[test]
    fn backward_linear_and_square() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0, 1.0]);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::zeros(&[3]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let y = tape.scale(xv, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(TensorError::Contract(_))));
    }

    #[test]
    fn backward_visits_each_differentiable_op_once() {
        let x = Tensor::uniform(&[3, 3], 1.0, 3).unwrap().with_grad();
        let c = Tensor::uniform(&[3, 3], 1.0, 4).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let cv = tape.constant(c);
        let a = tape.matmul(xv, cv).unwrap();
        let b = tape.relu(a).unwrap();
        let _unused = tape.scale(cv, 3.0).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.visited(), 3);
        assert!(g.get(cv).is_none());
        assert!(g.get(xv).is_some());
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::constant(&[1, 1], 1e200).unwrap());
        assert!(matches!(
            tape.matmul(a, a),
            Err(TensorError::NonFinite { op: "matmul" })
        ));
    }
}
