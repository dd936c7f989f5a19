//! Define-by-run reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns a [`Gradients`] map. Nodes that do not depend on any leaf created
//! with [`Tape::leaf`] are marked as constants and never receive gradients,
//! so frozen weights cost nothing on the backward pass.
//!
//! A tape is rebuilt for each forward pass and is confined to one thread.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    MulScalar { input: usize, scalar: usize },
    Transpose(usize),
    FrobeniusNorm(usize),
    NormalizeDirection { input: usize, norm: f64 },
    Gram(usize),
    AddRow { input: usize, bias: usize },
    LayerNorm { input: usize, gain: usize, bias: usize, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(usize),
    Attention { q: usize, k: usize, v: usize, segments: Rc<[usize]>, heads: usize, probs: Vec<f64> },
    SegmentMean { input: usize, segments: Rc<[usize]> },
    ConcatCols(usize, usize),
    Sum(usize),
    SoftmaxCrossEntropy { logits: usize, targets: Vec<usize>, probs: Tensor },
    SigmoidBce { logits: usize, targets: Tensor },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> Rc<Tensor> {
        self.check(var);
        Rc::clone(&self.nodes.borrow()[var.index].value)
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.check(var);
        self.nodes.borrow()[var.index].requires_grad
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let var = Var {
            tape: self.id,
            index: nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
        };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        var
    }

    fn check(&self, var: Var) {
        assert_eq!(var.tape, self.id, "variable belongs to a different tape");
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.index].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a);
        self.check(b);
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        let value = self.value(a).matmul(&self.value(b))?;
        Ok(self.push(value, Op::MatMul(a.index, b.index), self.any_grad(&[a, b])))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).add(&self.value(b))?;
        Ok(self.push(value, Op::Add(a.index, b.index), self.any_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).sub(&self.value(b))?;
        Ok(self.push(value, Op::Sub(a.index, b.index), self.any_grad(&[a, b])))
    }

    pub fn scale(&self, a: Var, factor: f64) -> Var {
        self.check(a);
        let value = self.value(a).scale(factor);
        self.push(value, Op::Scale(a.index, factor), self.any_grad(&[a]))
    }

    /// Multiplies every entry of `a` by the 1×1 node `scalar`.
    pub fn mul_scalar(&self, a: Var, scalar: Var) -> Result<Var> {
        self.check(a);
        self.check(scalar);
        if scalar.shape() != (1, 1) {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: a.shape(),
                rhs: scalar.shape(),
            });
        }
        let value = self.value(a).scale(self.value(scalar).item());
        Ok(self.push(
            value,
            Op::MulScalar {
                input: a.index,
                scalar: scalar.index,
            },
            self.any_grad(&[a, scalar]),
        ))
    }

    pub fn transpose(&self, a: Var) -> Var {
        self.check(a);
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a.index), self.any_grad(&[a]))
    }

    /// 1×1 node holding `||a||_F`. The gradient at the zero matrix is taken as zero.
    pub fn frobenius_norm(&self, a: Var) -> Var {
        self.check(a);
        let norm = self.value(a).frobenius_norm();
        self.push(Tensor::scalar(norm), Op::FrobeniusNorm(a.index), self.any_grad(&[a]))
    }

    pub fn normalize_direction(&self, a: Var, eps: f64) -> Result<Var> {
        self.check(a);
        let input = self.value(a);
        let norm = input.frobenius_norm();
        let value = input.normalize_direction(eps)?;
        Ok(self.push(value, Op::NormalizeDirection { input: a.index, norm }, self.any_grad(&[a])))
    }

    /// `s · sᵀ`.
    pub fn gram(&self, s: Var) -> Var {
        self.check(s);
        let input = self.value(s);
        let (r, d) = input.shape();
        let mut out = vec![0.0; r * r];
        gemm(r, d, r, (input.data(), false), (input.data(), true), &mut out, false);
        // exact symmetry regardless of kernel summation order
        for i in 0..r {
            for j in 0..i {
                out[i * r + j] = out[j * r + i];
            }
        }
        self.push(Tensor::from_raw(r, r, out), Op::Gram(s.index), self.any_grad(&[s]))
    }

    /// Adds the 1×c row `bias` to every row of `a`.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var> {
        self.check(a);
        self.check(bias);
        if bias.rows != 1 || bias.cols != a.cols {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: a.shape(),
                rhs: bias.shape(),
            });
        }
        let input = self.value(a);
        let b = self.value(bias);
        let mut data = input.data().to_vec();
        for row in data.chunks_mut(a.cols) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        Ok(self.push(
            Tensor::from_raw(a.rows, a.cols, data),
            Op::AddRow {
                input: a.index,
                bias: bias.index,
            },
            self.any_grad(&[a, bias]),
        ))
    }

    /// Row-wise layer normalization with 1×d gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.check(x);
        for p in [gain, bias] {
            self.check(p);
            if p.rows != 1 || p.cols != x.cols {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: x.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let input = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let d = x.cols;
        let mut xhat = vec![0.0; input.len()];
        let mut out = vec![0.0; input.len()];
        let mut inv_std = Vec::with_capacity(x.rows);
        for (r, row) in input.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for c in 0..d {
                let h = (row[c] - mean) * istd;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g.data()[c] + b.data()[c];
            }
        }
        Ok(self.push(
            Tensor::from_raw(x.rows, d, out),
            Op::LayerNorm {
                input: x.index,
                gain: gain.index,
                bias: bias.index,
                xhat: Tensor::from_raw(x.rows, d, xhat),
                inv_std,
            },
            self.any_grad(&[x, gain, bias]),
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: Var) -> Var {
        self.check(x);
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x.index), self.any_grad(&[x]))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` hold several sequences stacked by rows; `segments` gives
    /// each sequence's length. Tokens attend only within their own sequence.
    pub fn attention(&self, q: Var, k: Var, v: Var, segments: &[usize], heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let d = q.cols;
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Contract(format!("width {d} not divisible into {heads} heads")));
        }
        check_segments(segments, q.rows)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; q.rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| heads * l * l).sum());
        let mut offset = 0;
        for &len in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..len {
                    let qi = &qd[(offset + i) * d + c0..][..dh];
                    let start = probs.len();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        let kj = &kd[(offset + j) * d + c0..][..dh];
                        let s = dot(qi, kj) * scale;
                        max = max.max(s);
                        probs.push(s);
                    }
                    let row = &mut probs[start..];
                    let mut total = 0.0;
                    for p in row.iter_mut() {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    for p in row.iter_mut() {
                        *p /= total;
                    }
                    let oi = &mut out[(offset + i) * d + c0..][..dh];
                    for (j, p) in row.iter().enumerate() {
                        let vj = &vd[(offset + j) * d + c0..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
            offset += len;
        }
        Ok(self.push(
            Tensor::from_raw(q.rows, d, out),
            Op::Attention {
                q: q.index,
                k: k.index,
                v: v.index,
                segments: segments.into(),
                heads,
                probs,
            },
            self.any_grad(&[q, k, v]),
        ))
    }

    /// Mean over the rows of each segment; one output row per segment.
    pub fn segment_mean(&self, x: Var, segments: &[usize]) -> Result<Var> {
        self.check(x);
        check_segments(segments, x.rows)?;
        let input = self.value(x);
        let d = x.cols;
        let mut out = vec![0.0; segments.len() * d];
        let mut offset = 0;
        for (s, &len) in segments.iter().enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for r in offset..offset + len {
                for (acc, v) in o.iter_mut().zip(input.row(r)) {
                    *acc += v;
                }
            }
            for v in o.iter_mut() {
                *v /= len as f64;
            }
            offset += len;
        }
        Ok(self.push(
            Tensor::from_raw(segments.len(), d, out),
            Op::SegmentMean {
                input: x.index,
                segments: segments.into(),
            },
            self.any_grad(&[x]),
        ))
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        self.check(a);
        self.check(b);
        if a.rows != b.rows {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(a.rows * (a.cols + b.cols));
        for r in 0..a.rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        Ok(self.push(
            Tensor::from_raw(a.rows, a.cols + b.cols, data),
            Op::ConcatCols(a.index, b.index),
            self.any_grad(&[a, b]),
        ))
    }

    pub fn sum(&self, a: Var) -> Var {
        self.check(a);
        let total = self.value(a).sum();
        self.push(Tensor::scalar(total), Op::Sum(a.index), self.any_grad(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let total = self.sum(a);
        self.scale(total, 1.0 / n)
    }

    /// Mean softmax cross-entropy of each logit row against a class index.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits);
        if targets.len() != logits.rows || targets.iter().any(|&t| t >= logits.cols) {
            return Err(Error::Contract(format!(
                "targets do not fit logits of shape {:?}",
                logits.shape()
            )));
        }
        let input = self.value(logits);
        let c = logits.cols;
        let mut probs = vec![0.0; input.len()];
        let mut loss = 0.0;
        for (r, row) in input.data().chunks(c).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[targets[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= logits.rows as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: logits.index,
                targets: targets.to_vec(),
                probs: Tensor::from_raw(logits.rows, c, probs),
            },
            self.any_grad(&[logits]),
        ))
    }

    /// Mean binary cross-entropy with logits over every entry.
    pub fn sigmoid_bce(&self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.check(logits);
        if targets.shape() != logits.shape() {
            return Err(Error::Dimension {
                op: "sigmoid_bce",
                lhs: logits.shape(),
                rhs: targets.shape(),
            });
        }
        let input = self.value(logits);
        let loss = input
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / input.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SigmoidBce {
                logits: logits.index,
                targets: targets.clone(),
            },
            self.any_grad(&[logits]),
        ))
    }

    /// Reverse sweep from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss);
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.index] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.index).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            propagate(&nodes, idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not reach it.
    pub fn get(&self, var: Var) -> Tensor {
        self.grads
            .get(var.index)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(var.rows, var.cols))
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

fn check_segments(segments: &[usize], rows: usize) -> Result<()> {
    if segments.contains(&0) || segments.iter().sum::<usize>() != rows {
        return Err(Error::Contract(format!(
            "segments {segments:?} do not partition {rows} rows"
        )));
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], idx: usize) -> &'a mut Tensor {
    let value = &nodes[idx].value;
    grads[idx].get_or_insert_with(|| Tensor::zeros(value.rows(), value.cols()))
}

fn propagate(nodes: &[Node], idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let need = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| nodes[i].value.as_ref();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.rows(), va.cols(), vb.cols());
            if need(*a) {
                let ga = slot(grads, nodes, *a);
                gemm(m, n, k, (g.data(), false), (vb.data(), true), ga.data_mut(), true);
            }
            if need(*b) {
                let gb = slot(grads, nodes, *b);
                gemm(k, m, n, (va.data(), true), (g.data(), false), gb.data_mut(), true);
            }
        }
        Op::Add(a, b) => {
            if need(*a) {
                slot(grads, nodes, *a).add_assign(g);
            }
            if need(*b) {
                slot(grads, nodes, *b).add_assign(g);
            }
        }
        Op::Sub(a, b) => {
            if need(*a) {
                slot(grads, nodes, *a).add_assign(g);
            }
            if need(*b) {
                slot(grads, nodes, *b).add_assign(&g.scale(-1.0));
            }
        }
        Op::Scale(a, factor) => {
            if need(*a) {
                slot(grads, nodes, *a).add_assign(&g.scale(*factor));
            }
        }
        Op::MulScalar { input, scalar } => {
            if need(*input) {
                let s = val(*scalar).item();
                slot(grads, nodes, *input).add_assign(&g.scale(s));
            }
            if need(*scalar) {
                let d = dot(g.data(), val(*input).data());
                slot(grads, nodes, *scalar).data_mut()[0] += d;
            }
        }
        Op::Transpose(a) => {
            if need(*a) {
                slot(grads, nodes, *a).add_assign(&g.transpose());
            }
        }
        Op::FrobeniusNorm(a) => {
            let norm = nodes[idx].value.item();
            if need(*a) && norm > 0.0 {
                let factor = g.item() / norm;
                slot(grads, nodes, *a).add_assign(&val(*a).scale(factor));
            }
        }
        Op::NormalizeDirection { input, norm } => {
            if need(*input) {
                let out = nodes[idx].value.as_ref();
                let radial = dot(g.data(), out.data());
                let gi = slot(grads, nodes, *input);
                for ((x, gv), o) in gi.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += (gv - radial * o) / norm;
                }
            }
        }
        Op::Gram(s) => {
            if need(*s) {
                let vs = val(*s);
                let (r, d) = vs.shape();
                let sym = g.add(&g.transpose()).expect("square gradient");
                let gs = slot(grads, nodes, *s);
                gemm(r, r, d, (sym.data(), false), (vs.data(), false), gs.data_mut(), true);
            }
        }
        Op::AddRow { input, bias } => {
            if need(*input) {
                slot(grads, nodes, *input).add_assign(g);
            }
            if need(*bias) {
                let gb = slot(grads, nodes, *bias);
                for row in g.data().chunks(g.cols()) {
                    for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = g.cols();
            if need(*gain) {
                let gg = slot(grads, nodes, *gain);
                for (grow, hrow) in g.data().chunks(d).zip(xhat.data().chunks(d)) {
                    for c in 0..d {
                        gg.data_mut()[c] += grow[c] * hrow[c];
                    }
                }
            }
            if need(*bias) {
                let gb = slot(grads, nodes, *bias);
                for grow in g.data().chunks(d) {
                    for (acc, v) in gb.data_mut().iter_mut().zip(grow) {
                        *acc += v;
                    }
                }
            }
            if need(*input) {
                let gain_v = val(*gain).data().to_vec();
                let gi = slot(grads, nodes, *input);
                let mut dxh = vec![0.0; d];
                for (r, (grow, hrow)) in g.data().chunks(d).zip(xhat.data().chunks(d)).enumerate() {
                    for c in 0..d {
                        dxh[c] = grow[c] * gain_v[c];
                    }
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = dot(&dxh, hrow) / d as f64;
                    let out = &mut gi.data_mut()[r * d..(r + 1) * d];
                    for c in 0..d {
                        out[c] += inv_std[r] * (dxh[c] - m1 - hrow[c] * m2);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if need(*x) {
                let vx = val(*x);
                let gx = slot(grads, nodes, *x);
                for ((acc, gv), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                    *acc += gv * gelu_grad(*xv);
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), segments, *heads, probs),
        Op::SegmentMean { input, segments } => {
            if need(*input) {
                let d = g.cols();
                let gi = slot(grads, nodes, *input);
                let mut offset = 0;
                for (s, &len) in segments.iter().enumerate() {
                    let gs = g.row(s);
                    for r in offset..offset + len {
                        let out = &mut gi.data_mut()[r * d..(r + 1) * d];
                        for (acc, v) in out.iter_mut().zip(gs) {
                            *acc += v / len as f64;
                        }
                    }
                    offset += len;
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let ca = val(*a).cols();
            let cb = val(*b).cols();
            if need(*a) {
                let ga = slot(grads, nodes, *a);
                for r in 0..g.rows() {
                    let src = &g.row(r)[..ca];
                    for (acc, v) in ga.data_mut()[r * ca..(r + 1) * ca].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            if need(*b) {
                let gb = slot(grads, nodes, *b);
                for r in 0..g.rows() {
                    let src = &g.row(r)[ca..];
                    for (acc, v) in gb.data_mut()[r * cb..(r + 1) * cb].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if need(*a) {
                let s = g.item();
                for x in slot(grads, nodes, *a).data_mut() {
                    *x += s;
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, targets, probs } => {
            if need(*logits) {
                let c = probs.cols();
                let factor = g.item() / probs.rows() as f64;
                let gl = slot(grads, nodes, *logits);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl.data_mut()[r * c + j] += factor * (probs.get(r, j) - onehot);
                    }
                }
            }
        }
        Op::SigmoidBce { logits, targets } => {
            if need(*logits) {
                let factor = g.item() / targets.len() as f64;
                let vl = val(*logits);
                let gl = slot(grads, nodes, *logits);
                for ((acc, x), t) in gl.data_mut().iter_mut().zip(vl.data()).zip(targets.data()) {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *acc += factor * (sig - t);
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    g: &Tensor,
    (q, k, v): (usize, usize, usize),
    segments: &[usize],
    heads: usize,
    probs: &[f64],
) {
    let (need_q, need_k, need_v) = (
        nodes[q].requires_grad,
        nodes[k].requires_grad,
        nodes[v].requires_grad,
    );
    if !(need_q || need_k || need_v) {
        return;
    }
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let d = qv.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = vec![0.0; qd.len()];
    let mut gk = vec![0.0; kd.len()];
    let mut gv = vec![0.0; vd.len()];
    let gd = g.data();
    let max_len = segments.iter().copied().max().unwrap_or(0);
    let mut dp = vec![0.0; max_len];
    let mut offset = 0;
    let mut poff = 0;
    for &len in segments {
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..len {
                let p = &probs[poff + i * len..poff + (i + 1) * len];
                let goi = &gd[(offset + i) * d + c0..][..dh];
                for j in 0..len {
                    let vj = &vd[(offset + j) * d + c0..][..dh];
                    dp[j] = dot(goi, vj);
                    if need_v {
                        let out = &mut gv[(offset + j) * d + c0..][..dh];
                        for (acc, x) in out.iter_mut().zip(goi) {
                            *acc += p[j] * x;
                        }
                    }
                }
                let weighted = dot(&dp[..len], p);
                for j in 0..len {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    if need_q {
                        let kj = &kd[(offset + j) * d + c0..][..dh];
                        let out = &mut gq[(offset + i) * d + c0..][..dh];
                        for (acc, x) in out.iter_mut().zip(kj) {
                            *acc += ds * x;
                        }
                    }
                    if need_k {
                        let qi = &qd[(offset + i) * d + c0..][..dh];
                        let out = &mut gk[(offset + j) * d + c0..][..dh];
                        for (acc, x) in out.iter_mut().zip(qi) {
                            *acc += ds * x;
                        }
                    }
                }
            }
            poff += len * len;
        }
        offset += len;
    }
    let rows = qv.rows();
    for (idx, need, buf) in [(q, need_q, gq), (k, need_k, gk), (v, need_v, gv)] {
        if need {
            slot(grads, nodes, idx).add_assign(&Tensor::from_raw(rows, d, buf));
        }
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        point[i] = x[i] + h;
        let plus = f(&point)?;
        point[i] = x[i] - h;
        let minus = f(&point)?;
        point[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_scalar_gradient_is_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.5));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).item(), 1.0);
    }

    #[test]
    fn norm_gradient_at_identity() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::identity(2));
        let n = tape.frobenius_norm(w);
        let g = tape.backward(n).unwrap().get(w);
        let expect = Tensor::identity(2).scale(1.0 / 2f64.sqrt());
        assert!(g.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let w = tape.leaf(Tensor::identity(2));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zeros() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(2, 3));
        let b = tape.leaf(Tensor::ones(1, 1));
        let loss = tape.sum(a);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b), Tensor::zeros(1, 1));
        assert_eq!(grads.get(a), Tensor::ones(2, 3));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let w = tape.constant(Tensor::identity(2));
        let x = tape.leaf(Tensor::ones(1, 2));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get_ref(w).is_none());
        assert_eq!(grads.get(x), Tensor::ones(1, 2));
    }

    #[test]
    fn gram_by_hand() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let g = tape.value(tape.gram(s));
        assert_eq!(*g, Tensor::from_rows(&[&[5.0, 11.0], &[11.0, 25.0]]).unwrap());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_gradient(|x| Ok(x[0] * x[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_diff_gradient(|_| Ok(4.2), &[1.0, -2.0, 0.3], 1e-5).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        let g = finite_diff_gradient(|x| Ok(x.iter().sum()), &[0.1, 7.0, -3.0], 1e-5).unwrap();
        assert!(g.iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(finite_diff_gradient(|x| Ok(x[0]), &[1.0], 0.0).is_err());
        assert!(matches!(
            finite_diff_gradient(|x| Ok(if x[0] > 0.0 { f64::INFINITY } else { 0.0 }), &[0.0], 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one_in_attention() {
        // with v = identity rows, each output row is the attention distribution
        let tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[&[0.3, -1.0, 2.0], &[1.0, 0.5, 0.0], &[-0.2, 0.1, 0.9]]).unwrap());
        let v = tape.constant(Tensor::identity(3));
        let out = tape.value(tape.attention(q, q, v, &[3], 1).unwrap());
        for r in 0..3 {
            let s: f64 = out.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_hand_values() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_rows(&[&[3f64.ln(), 0.0]]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(loss).item() + (0.75f64).ln()).abs() < 1e-15);
        let z = tape.constant(Tensor::zeros(1, 1));
        let bce = tape.sigmoid_bce(z, &Tensor::ones(1, 1)).unwrap();
        assert!((tape.value(bce).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn mixing_tapes_panics() {
        let a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(Tensor::ones(1, 1));
        b.sum(x);
    }
}
