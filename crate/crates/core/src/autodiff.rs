//! Tape-based reverse-mode automatic differentiation over 2-d tensors.
//!
//! A [`Graph`] records every forward op in execution order, which is already
//! a topological order, so the backward pass is a single reverse sweep that
//! visits each node once. Parameters are borrowed from a [`ParamStore`] rather
//! than copied; their gradients come back in a [`Gradients`] buffer indexed by
//! [`ParamId`].

use std::collections::HashMap;
use std::ops::Range;

use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::kernels::Gemm;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Activation functions available to [`Graph::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
}

/// Masking applied inside [`Graph::attention`] before the softmax.
#[derive(Clone, Debug, PartialEq)]
pub enum AttnMask {
    None,
    /// Query `i` of a segment sees keys `0..=i` of the matching key segment.
    Causal,
    /// Row-major `q_rows × k_rows` visibility matrix; single segment only.
    Explicit(Vec<bool>),
}

/// Describes how the rows of a stacked query/key matrix are grouped into
/// independent sequences, and which key rows are real.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnSpec {
    pub heads: usize,
    pub scale: f64,
    pub q_segs: Vec<Range<usize>>,
    pub k_segs: Vec<Range<usize>>,
    pub mask: AttnMask,
    /// Per key row; `false` rows (padding) never receive attention.
    pub key_valid: Option<Vec<bool>>,
}

impl AttnSpec {
    /// One query segment against one key segment.
    pub fn single(q_rows: usize, k_rows: usize, heads: usize, scale: f64) -> Self {
        Self {
            heads,
            scale,
            q_segs: vec![0..q_rows],
            k_segs: vec![0..k_rows],
            mask: AttnMask::None,
            key_valid: None,
        }
    }
}

/// Attention probabilities saved by an attention node, per segment and head.
#[derive(Clone, Debug, Default)]
pub struct AttnProbs {
    heads: usize,
    /// `[segment * heads + head]` → row-major `q_len × k_len`.
    blocks: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl AttnProbs {
    pub fn segments(&self) -> usize {
        self.shapes.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head(&self, seg: usize, head: usize) -> &[f64] {
        &self.blocks[seg * self.heads + head]
    }

    pub fn shape(&self, seg: usize) -> (usize, usize) {
        self.shapes[seg]
    }

    /// Probability row of query `row` in segment `seg`, averaged over heads.
    pub fn mean_row(&self, seg: usize, row: usize) -> Vec<f64> {
        let (_, kl) = self.shapes[seg];
        let mut out = vec![0.0; kl];
        for h in 0..self.heads {
            let block = self.head(seg, h);
            for (o, p) in out.iter_mut().zip(&block[row * kl..(row + 1) * kl]) {
                *o += p;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.heads as f64);
        out
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    OneMinus(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    ScaleRows { x: Var, factors: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: AttnProbs,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        weight: f64,
    },
    Sum(Var),
}

struct Node {
    value: Option<Tensor>,
    param: Option<ParamId>,
    op: Op,
    requires_grad: bool,
}

/// Computation graph borrowing a parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

/// Parameter gradients produced by [`Graph::backward`]. Parameters the loss
/// does not reach keep an all-zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(params: &ParamStore) -> Self {
        Self {
            grads: params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.index()]
    }

    /// Elementwise sum of another gradient set into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place softmax over `row`, restricted to `valid` entries when given.
/// Masked entries become exactly zero. Returns false if nothing is valid.
pub(crate) fn softmax_in_place(row: &mut [f64], valid: Option<&[bool]>) -> bool {
    let ok = |j: usize| valid.is_none_or(|v| v[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if ok(j) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    row.iter_mut().for_each(|x| *x /= sum);
    true
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            track: true,
        }
    }

    /// A graph that never requires gradients (inference).
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(params)
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(id)) => self.params.get(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        matrix_dims(self.value(v))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let requires_grad = self.track && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf; never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_finite(&t, "constant")?;
        self.nodes.push(Node {
            value: Some(t),
            param: None,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            requires_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Copies the value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            bail!(Dimension, "matmul {m}x{k} by {kb}x{n}");
        }
        let mut out = vec![0.0; m * n];
        Gemm {
            b_t,
            ..Gemm::nn(m, k, n)
        }
        .run(self.value(a).data(), self.value(b).data(), &mut out);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, b_t },
            &[a, b],
            "matmul",
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x], "transpose")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            bail!(
                Dimension,
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            );
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a `1×n` bias row to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.value(bias).len() != c {
            bail!(Dimension, "bias of {} for width {c}", self.value(bias).len());
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for i in 0..r {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(b)
                .for_each(|(o, v)| *o += v);
        }
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::AddRow { x, bias },
            &[x, bias],
            "add_row",
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.map(x, |v| v * factor);
        self.push(t, Op::Scale(x, factor), &[x], "scale")
    }

    /// `1 - x` elementwise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| 1.0 - v);
        self.push(t, Op::OneMinus(x), &[x], "one_minus")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Gelu => {
                let t = self.map(x, gelu_scalar);
                self.push(t, Op::Gelu(x), &[x], "gelu")
            }
            Activation::Sigmoid => {
                let t = self.map(x, sigmoid_scalar);
                self.push(t, Op::Sigmoid(x), &[x], "sigmoid")
            }
        }
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows_masked(x, None)
    }

    /// Row-wise softmax; entries whose mask is false get probability 0.
    pub fn softmax_rows_masked(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(m) = &mask {
            if m.len() != r * c {
                bail!(Dimension, "softmax mask of {} for {r}x{c}", m.len());
            }
        }
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            let valid = mask.as_ref().map(|m| &m[i * c..(i + 1) * c]);
            if c > 0 && !softmax_in_place(&mut out[i * c..(i + 1) * c], valid) {
                bail!(Contract, "softmax row {i} is fully masked");
            }
        }
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::Softmax(x),
            &[x],
            "softmax",
        )
    }

    /// Per-row layer normalization with learned gain and bias (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if c < 2 {
            bail!(Contract, "layer_norm needs width >= 2, got {c}");
        }
        if self.value(gain).len() != c || self.value(bias).len() != c {
            bail!(Dimension, "layer_norm affine width mismatch");
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// Embedding lookup: row `i` of the output is `table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                bail!(Index, "id {id} outside table of {v} rows");
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather_rows",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != r) {
            bail!(Dimension, "concat_cols row mismatch");
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![r, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if cols.end > c || cols.start > cols.end {
            bail!(Index, "column range {cols:?} of width {c}");
        }
        let w = cols.len();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        self.push(
            Tensor::new(vec![r, w], out)?,
            Op::SliceCols {
                x,
                start: cols.start,
            },
            &[x],
            "slice_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map_or(0, |&p| self.shape(p).1);
        if parts.iter().any(|&p| self.shape(p).1 != c) {
            bail!(Dimension, "concat_rows width mismatch");
        }
        let mut out = Vec::new();
        let mut r = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
            r += self.shape(p).0;
        }
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
            "concat_rows",
        )
    }

    /// Gathers (possibly repeated) rows of `x`.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                bail!(Index, "row {i} of {r}");
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
            "select_rows",
        )
    }

    pub fn slice_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let idx: Vec<usize> = rows.collect();
        self.select_rows(x, &idx)
    }

    /// Multiplies row `i` by `factors[i]` (constant). Used for row masks.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if factors.len() != r {
            bail!(Dimension, "{} row factors for {r} rows", factors.len());
        }
        let mut out = self.value(x).data().to_vec();
        for (i, f) in factors.iter().enumerate() {
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= f);
        }
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ScaleRows {
                x,
                factors: factors.to_vec(),
            },
            &[x],
            "scale_rows",
        )
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged (no node).
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 || !self.track {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.constant(Tensor::new(vec![r, c], factors)?)?;
        self.mul(x, mask)
    }

    /// Multi-segment, multi-head scaled dot-product attention.
    ///
    /// `q` is `Nq×d`, `k` is `Nk×d`, `v` is `Nk×dv`; columns are split into
    /// `spec.heads` equal blocks and head outputs are laid side by side, so
    /// the result is `Nq×dv`. Each query segment attends only to its paired
    /// key segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Result<Var> {
        let (nq, d) = self.shape(q);
        let (nk, dk2) = self.shape(k);
        let (nv, dv) = self.shape(v);
        if d != dk2 || nk != nv {
            bail!(Dimension, "attention q {nq}x{d}, k {nk}x{dk2}, v {nv}x{dv}");
        }
        let h = spec.heads;
        if h == 0 || d % h != 0 || dv % h != 0 {
            bail!(Dimension, "{h} heads do not divide widths {d}/{dv}");
        }
        if spec.q_segs.len() != spec.k_segs.len() {
            bail!(Dimension, "segment count mismatch");
        }
        if let Some(kv) = &spec.key_valid {
            if kv.len() != nk {
                bail!(Dimension, "key mask of {} for {nk} keys", kv.len());
            }
        }
        if matches!(spec.mask, AttnMask::Explicit(_)) && spec.q_segs.len() != 1 {
            bail!(Dimension, "explicit attention mask needs a single segment");
        }
        let (dh, dvh) = (d / h, dv / h);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; nq * dv];
        let mut probs = AttnProbs {
            heads: h,
            blocks: Vec::with_capacity(spec.q_segs.len() * h),
            shapes: Vec::with_capacity(spec.q_segs.len()),
        };
        for (qs, ks) in spec.q_segs.iter().zip(&spec.k_segs) {
            if qs.end > nq || ks.end > nk {
                bail!(Index, "segment {qs:?}/{ks:?} outside {nq}/{nk} rows");
            }
            let (ql, kl) = (qs.len(), ks.len());
            probs.shapes.push((ql, kl));
            let mut valid = vec![true; ql * kl];
            for i in 0..ql {
                for j in 0..kl {
                    let mut ok = spec.key_valid.as_ref().is_none_or(|m| m[ks.start + j]);
                    match &spec.mask {
                        AttnMask::None => {}
                        AttnMask::Causal => ok &= j <= i,
                        AttnMask::Explicit(m) => {
                            if m.len() != ql * kl {
                                bail!(Dimension, "explicit mask of {} for {ql}x{kl}", m.len());
                            }
                            ok &= m[i * kl + j];
                        }
                    }
                    valid[i * kl + j] = ok;
                }
            }
            for head in 0..h {
                let qh = block(qd, d, qs.clone(), head * dh, dh);
                let kh = block(kd, d, ks.clone(), head * dh, dh);
                let vh = block(vd, dv, ks.clone(), head * dvh, dvh);
                let mut s = vec![0.0; ql * kl];
                Gemm {
                    b_t: true,
                    ..Gemm::nn(ql, dh, kl)
                }
                .run(&qh, &kh, &mut s);
                s.iter_mut().for_each(|x| *x *= spec.scale);
                for i in 0..ql {
                    if kl > 0
                        && !softmax_in_place(
                            &mut s[i * kl..(i + 1) * kl],
                            Some(&valid[i * kl..(i + 1) * kl]),
                        )
                    {
                        bail!(Contract, "attention row {i} is fully masked");
                    }
                }
                let mut o = vec![0.0; ql * dvh];
                Gemm::nn(ql, kl, dvh).run(&s, &vh, &mut o);
                for i in 0..ql {
                    let dst = (qs.start + i) * dv + head * dvh;
                    out[dst..dst + dvh].copy_from_slice(&o[i * dvh..(i + 1) * dvh]);
                }
                probs.blocks.push(s);
            }
        }
        self.push(
            Tensor::new(vec![nq, dv], out)?,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            &[q, k, v],
            "attention",
        )
    }

    /// Saved probabilities of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&AttnProbs> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean token-level cross-entropy of row-wise softmax(logits) against
    /// `targets`; `None` targets are ignored. Returns a `1×1` loss.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            bail!(Dimension, "{} targets for {r} rows", targets.len());
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            let valid = mask.map(|m| &m[i * c..(i + 1) * c]);
            if !softmax_in_place(row, valid) {
                bail!(Contract, "cross_entropy row {i} is fully masked");
            }
            if let Some(t) = *t {
                if t >= c {
                    bail!(Index, "target {t} of {c} classes");
                }
                if valid.is_some_and(|v| !v[t]) {
                    bail!(Contract, "target {t} is masked out");
                }
                loss -= row[t].max(f64::MIN_POSITIVE).ln();
                count += 1;
            }
        }
        if count == 0 {
            bail!(Contract, "cross_entropy without targets");
        }
        let loss = loss / count as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// `weight · mean(softplus(z) − y·z)`: binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weight: f64) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() || z.is_empty() {
            bail!(Dimension, "{} targets for {} logits", targets.len(), z.len());
        }
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum::<f64>()
            * weight
            / z.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
                weight,
            },
            &[logits],
            "bce_with_logits",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            bail!(
                Contract,
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            );
        }
        let mut out = Gradients::zeros(self.params);
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Some(pid) = node.param {
                out.get_mut(pid)
                    .iter_mut()
                    .zip(&g)
                    .for_each(|(a, b)| *a += b);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_val = node.value.as_ref().expect("op nodes own values");
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (m, k) = self.shape(*a);
                let n = out_val.cols();
                if self.wants(*a) {
                    // dA = dC · Bᵀ  (or dC · B when B was used transposed)
                    let mut da = vec![0.0; m * k];
                    Gemm {
                        b_t: !b_t,
                        ..Gemm::nn(m, n, k)
                    }
                    .run(g, self.value(*b).data(), &mut da);
                    add_into(&mut grads[a.0], &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *b_t {
                        // B is n×k: dB = dCᵀ · A
                        Gemm {
                            a_t: true,
                            ..Gemm::nn(n, m, k)
                        }
                        .run(g, self.value(*a).data(), &mut db);
                    } else {
                        Gemm {
                            a_t: true,
                            ..Gemm::nn(k, m, n)
                        }
                        .run(self.value(*a).data(), g, &mut db);
                    }
                    add_into(&mut grads[b.0], &db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j * r + i];
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &d);
                }
            }
            Op::AddRow { x, bias } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.wants(*bias) {
                    let c = out_val.cols();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c.max(1)) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::OneMinus(x) => {
                let d: Vec<f64> = g.iter().map(|v| -v).collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Gelu(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = g
                    .iter()
                    .zip(out_val.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                add_into(&mut grads[x.0], &d);
            }
            Op::Softmax(x) => {
                let c = out_val.cols();
                let y = out_val.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..out_val.rows() {
                    let r = i * c..(i + 1) * c;
                    let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = matrix_dims(out_val);
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let rg = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxh: Vec<f64> = rg.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    add_into(&mut grads[gain.0], &dg);
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    add_into(&mut grads[bias.0], &db);
                }
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.shape(*table);
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[i * d..(i + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[table.0], &dt);
            }
            Op::ConcatCols(parts) => {
                let r = out_val.rows();
                let total = out_val.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        add_into(&mut grads[p.0], &d);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.shape(*x);
                let w = out_val.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.wants(p) {
                        add_into(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                for (i, &src) in rows.iter().enumerate() {
                    dx[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[i * c..(i + 1) * c])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::ScaleRows { x, factors } => {
                let c = out_val.cols();
                let mut dx = g.to_vec();
                for (i, f) in factors.iter().enumerate() {
                    dx[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= f);
                }
                add_into(&mut grads[x.0], &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.backprop_attention(g, (*q, *k, *v), spec, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = self.shape(*logits).1;
                let scale = g[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..c {
                            d[i * c + j] = probs[i * c + j] * scale;
                        }
                        d[i * c + t] -= scale;
                    }
                }
                add_into(&mut grads[logits.0], &d);
            }
            Op::BceLogits {
                logits,
                targets,
                weight,
            } => {
                let n = targets.len() as f64;
                let d: Vec<f64> = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| g[0] * weight * (sigmoid_scalar(z) - y) / n)
                    .collect();
                add_into(&mut grads[logits.0], &d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                add_into(&mut grads[x.0], &vec![g[0]; n]);
            }
        }
    }

    fn backprop_attention(
        &self,
        g: &[f64],
        (q, k, v): (Var, Var, Var),
        spec: &AttnSpec,
        probs: &AttnProbs,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (nq, d) = self.shape(q);
        let (nk, dv) = self.shape(v);
        let h = spec.heads;
        let (dh, dvh) = (d / h, dv / h);
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dvv = vec![0.0; nk * dv];
        for (s, (qs, ks)) in spec.q_segs.iter().zip(&spec.k_segs).enumerate() {
            let (ql, kl) = (qs.len(), ks.len());
            if ql == 0 || kl == 0 {
                continue;
            }
            for head in 0..h {
                let p = probs.head(s, head);
                let qh = block(qd, d, qs.clone(), head * dh, dh);
                let kh = block(kd, d, ks.clone(), head * dh, dh);
                let vh = block(vd, dv, ks.clone(), head * dvh, dvh);
                let go = block(g, dv, qs.clone(), head * dvh, dvh);
                // dP = dO · Vᵀ
                let mut dp = vec![0.0; ql * kl];
                Gemm {
                    b_t: true,
                    ..Gemm::nn(ql, dvh, kl)
                }
                .run(&go, &vh, &mut dp);
                // dV = Pᵀ · dO
                let mut dvh_buf = vec![0.0; kl * dvh];
                Gemm {
                    a_t: true,
                    ..Gemm::nn(kl, ql, dvh)
                }
                .run(p, &go, &mut dvh_buf);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the score scale.
                let mut ds = dp;
                for i in 0..ql {
                    let r = i * kl..(i + 1) * kl;
                    let dot: f64 = ds[r.clone()].iter().zip(&p[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        ds[j] = p[j] * (ds[j] - dot) * spec.scale;
                    }
                }
                let mut dqh = vec![0.0; ql * dh];
                Gemm::nn(ql, kl, dh).run(&ds, &kh, &mut dqh);
                let mut dkh = vec![0.0; kl * dh];
                Gemm {
                    a_t: true,
                    ..Gemm::nn(kl, ql, dh)
                }
                .run(&ds, &qh, &mut dkh);
                scatter_add(&mut dq, d, qs.clone(), head * dh, dh, &dqh);
                scatter_add(&mut dk, d, ks.clone(), head * dh, dh, &dkh);
                scatter_add(&mut dvv, dv, ks.clone(), head * dvh, dvh, &dvh_buf);
            }
        }
        if self.wants(q) {
            add_into(&mut grads[q.0], &dq);
        }
        if self.wants(k) {
            add_into(&mut grads[k.0], &dk);
        }
        if self.wants(v) {
            add_into(&mut grads[v.0], &dvv);
        }
    }
}

/// Copies rows `rows`, columns `col..col + w` of a row-major matrix of width
/// `width` into a contiguous buffer.
fn block(src: &[f64], width: usize, rows: Range<usize>, col: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * w);
    for i in rows {
        out.extend_from_slice(&src[i * width + col..i * width + col + w]);
    }
    out
}

fn scatter_add(dst: &mut [f64], width: usize, rows: Range<usize>, col: usize, w: usize, src: &[f64]) {
    for (r, i) in rows.enumerate() {
        dst[i * width + col..i * width + col + w]
            .iter_mut()
            .zip(&src[r * w..(r + 1) * w])
            .for_each(|(a, b)| *a += b);
    }
}
