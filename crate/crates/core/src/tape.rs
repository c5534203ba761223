//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the tape. Nodes are
//! only ever appended, so the tape is topologically ordered by construction;
//! [`Tape::backward`] walks it once from the loss down to the first node.
//!
//! Broadcasting is limited to a constant scalar against a tensor, plus the
//! explicit row-vector ops [`Tape::add_row`] and [`Tape::mul_row`].

use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Guard used for zero-norm rows and vectors.
pub const NORM_EPS: f32 = 1e-8;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Right-hand operand for [`Tape::elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand {
    Var(Var),
    Scalar(f32),
}

impl From<Var> for Operand {
    fn from(v: Var) -> Self {
        Operand::Var(v)
    }
}

impl From<f32> for Operand {
    fn from(s: f32) -> Self {
        Operand::Scalar(s)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(usize, usize, BinaryKind),
    Scalar(usize, f32, BinaryKind),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    ReduceMean {
        input: usize,
        axis: usize,
    },
    Sum(usize),
    Reshape(usize),
    SliceRows {
        input: usize,
        start: usize,
    },
    SliceCols {
        input: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    L2NormalizeRows {
        input: usize,
        eps: f32,
    },
    Cosine {
        q: usize,
        s: usize,
        eps: f32,
    },
    SoftmaxRows(usize),
    SoftmaxCrossEntropy {
        logits: usize,
        onehot: Vec<f32>,
    },
    NllClamped {
        probs: usize,
        labels: Vec<usize>,
        floor: f32,
    },
    BatchNorm {
        input: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Output of [`Tape::batch_norm`]: the normalized features plus the biased
/// batch statistics used to produce them.
#[derive(Debug, Clone)]
pub struct BatchNormOutput {
    pub normalized: Var,
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// Recording of one forward computation.
///
/// A tape is confined to one thread. Parameters are copied onto the tape by
/// [`Tape::param`]; gradients flow back to the [`ParamSet`] through
/// [`Tape::accumulate_param_grads`].
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softplus_scalar(x: f32) -> f32 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn logistic(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Vec<f32>>, src: Vec<f32>) {
    match dst {
        Some(d) => d.iter_mut().zip(&src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx as usize >= self.nodes.len() {
            return Err(Error::ForeignTensor);
        }
        Ok(v.idx as usize)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var {
            tape: self.id,
            idx: (self.nodes.len() - 1) as u32,
        }
    }

    /// Records a derived value; it requires grad iff any input does.
    fn derived(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].value.requires_grad());
        let value = Tensor::new(shape, data)
            .expect("op produced consistent shape")
            .with_requires_grad(rg);
        self.push(value, op)
    }

    /// Records an input tensor. Its `requires_grad` flag is kept.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.set_grad(None);
        self.push(tensor, Op::Leaf)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Copies a parameter onto the tape as a gradient-requiring leaf.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let mut t = params.get(id).clone().with_requires_grad(true);
        t.set_grad(None);
        let v = self.push(t, Op::Leaf);
        self.nodes[v.idx as usize].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let i = self.idx(v).expect("var belongs to this tape");
        &self.nodes[i].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.idx(v).ok().and_then(|i| self.nodes[i].value.grad())
    }

    fn dims2(&self, i: usize) -> Result<(usize, usize)> {
        self.nodes[i].value.dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let sa = self.nodes[ia].value.shape().to_vec();
        let sb = self.nodes[ib].value.shape().to_vec();
        let (m, k, k2, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let out = matmul_raw(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(ia, ib), &[ia, ib]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia)?;
        let out = transpose_raw(self.nodes[ia].value.data(), r, c);
        Ok(self.derived(vec![c, r], out, Op::Transpose(ia), &[ia]))
    }

    /// Elementwise arithmetic between equal shapes, or a tensor and a constant
    /// scalar.
    pub fn elementwise(&mut self, a: Var, b: impl Into<Operand>, kind: BinaryKind) -> Result<Var> {
        let ia = self.idx(a)?;
        match b.into() {
            Operand::Var(b) => {
                let ib = self.idx(b)?;
                let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
                if va.shape() != vb.shape() {
                    return Err(Error::shape("elementwise", va.shape(), vb.shape()));
                }
                let f = match kind {
                    BinaryKind::Add => |x: f32, y: f32| x + y,
                    BinaryKind::Sub => |x: f32, y: f32| x - y,
                    BinaryKind::Mul => |x: f32, y: f32| x * y,
                    BinaryKind::Div => |x: f32, y: f32| x / y,
                };
                let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                let shape = va.shape().to_vec();
                Ok(self.derived(shape, out, Op::Binary(ia, ib, kind), &[ia, ib]))
            }
            Operand::Scalar(s) => {
                if kind == BinaryKind::Div && s == 0.0 {
                    return Err(Error::NonFinite("division by constant zero".into()));
                }
                let va = &self.nodes[ia].value;
                let out = va
                    .data()
                    .iter()
                    .map(|&x| match kind {
                        BinaryKind::Add => x + s,
                        BinaryKind::Sub => x - s,
                        BinaryKind::Mul => x * s,
                        BinaryKind::Div => x / s,
                    })
                    .collect();
                let shape = va.shape().to_vec();
                Ok(self.derived(shape, out, Op::Scalar(ia, s, kind), &[ia]))
            }
        }
    }

    pub fn add(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: impl Into<Operand>) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Div)
    }

    fn row_op(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (r, c) = self.dims2(ia)?;
        let vb = &self.nodes[ib].value;
        if vb.numel() != c {
            let op = if mul { "mul_row" } else { "add_row" };
            return Err(Error::shape(op, self.nodes[ia].value.shape(), vb.shape()));
        }
        let bd = vb.data();
        let ad = self.nodes[ia].value.data();
        let mut out = Vec::with_capacity(r * c);
        for row in ad.chunks_exact(c) {
            if mul {
                out.extend(row.iter().zip(bd).map(|(x, y)| x * y));
            } else {
                out.extend(row.iter().zip(bd).map(|(x, y)| x + y));
            }
        }
        let shape = self.nodes[ia].value.shape().to_vec();
        let op = if mul { Op::MulRow(ia, ib) } else { Op::AddRow(ia, ib) };
        Ok(self.derived(shape, out, op, &[ia, ib]))
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, false)
    }

    /// Multiplies every row of `a` elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_op(a, row, true)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let out = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        Ok(self.derived(shape, out, op(ia), &[ia]))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus_scalar, Op::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f32::exp, Op::Exp)
    }

    /// Mean along `axis` of a rank-1 or rank-2 tensor; the axis is dropped.
    ///
    /// Accumulates in f64, so permuting the reduced elements leaves the f32
    /// result unchanged except in vanishingly rare rounding ties.
    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let shape = va.shape().to_vec();
        if axis >= shape.len() || shape.len() > 2 {
            return Err(Error::Axis { axis, shape });
        }
        if shape[axis] == 0 {
            return Err(Error::EmptyAxis { axis, shape });
        }
        let (r, c) = va.dims2()?;
        let d = va.data();
        let (out, out_shape) = if shape.len() == 1 || axis == 1 {
            let out: Vec<f32> = d
                .chunks_exact(c)
                .map(|row| (row.iter().map(|&x| f64::from(x)).sum::<f64>() / c as f64) as f32)
                .collect();
            let s = if shape.len() == 1 { vec![1] } else { vec![r] };
            (out, s)
        } else {
            let mut acc = vec![0.0f64; c];
            for row in d.chunks_exact(c) {
                acc.iter_mut().zip(row).for_each(|(o, &x)| *o += f64::from(x));
            }
            (acc.iter().map(|&o| (o / r as f64) as f32).collect(), vec![c])
        };
        Ok(self.derived(out_shape, out, Op::ReduceMean { input: ia, axis }, &[ia]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.derived(vec![1], vec![s], Op::Sum(ia), &[ia]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != va.numel() {
            return Err(Error::shape("reshape", va.shape(), shape));
        }
        let out = va.data().to_vec();
        Ok(self.derived(shape.to_vec(), out, Op::Reshape(ia), &[ia]))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia)?;
        if len == 0 || start + len > r {
            return Err(Error::Invalid(format!("row slice {start}+{len} of {r} rows")));
        }
        let out = self.nodes[ia].value.data()[start * c..(start + len) * c].to_vec();
        let shape = if self.nodes[ia].value.rank() == 1 {
            vec![c]
        } else {
            vec![len, c]
        };
        Ok(self.derived(shape, out, Op::SliceRows { input: ia, start }, &[ia]))
    }

    /// Columns `start..start+len` (last axis) of a rank-1 or rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia)?;
        if len == 0 || start + len > c {
            return Err(Error::Invalid(format!("column slice {start}+{len} of {c} columns")));
        }
        let d = self.nodes[ia].value.data();
        let out: Vec<f32> = d
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let shape = if self.nodes[ia].value.rank() == 1 {
            vec![len]
        } else {
            vec![r, len]
        };
        Ok(self.derived(shape, out, Op::SliceCols { input: ia, start }, &[ia]))
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let (_, c) = self.dims2(idx[0])?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let (r, ci) = self.dims2(i)?;
            if ci != c {
                return Err(Error::shape(
                    "concat_rows",
                    self.nodes[idx[0]].value.shape(),
                    self.nodes[i].value.shape(),
                ));
            }
            rows += r;
            out.extend_from_slice(self.nodes[i].value.data());
        }
        Ok(self.derived(vec![rows, c], out, Op::ConcatRows(idx.clone()), &idx))
    }

    /// Divides each row by `max(||row||_2, eps)`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f32) -> Result<Var> {
        let ia = self.idx(a)?;
        let (_, c) = self.dims2(ia)?;
        let va = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(va.numel());
        for row in va.data().chunks_exact(c) {
            let n = row.iter().map(|x| x * x).sum::<f32>().sqrt().max(eps);
            out.extend(row.iter().map(|x| x / n));
        }
        let shape = va.shape().to_vec();
        Ok(self.derived(shape, out, Op::L2NormalizeRows { input: ia, eps }, &[ia]))
    }

    /// `q.s / (max(|q|, eps) max(|s|, eps))` for two equal-length vectors.
    pub fn cosine_similarity(&mut self, q: Var, s: Var, eps: f32) -> Result<Var> {
        let (iq, is) = (self.idx(q)?, self.idx(s)?);
        let (vq, vs) = (&self.nodes[iq].value, &self.nodes[is].value);
        if vq.numel() != vs.numel() {
            return Err(Error::shape("cosine_similarity", vq.shape(), vs.shape()));
        }
        let dot: f32 = vq.data().iter().zip(vs.data()).map(|(a, b)| a * b).sum();
        let nq = vq.data().iter().map(|x| x * x).sum::<f32>().sqrt().max(eps);
        let ns = vs.data().iter().map(|x| x * x).sum::<f32>().sqrt().max(eps);
        Ok(self.derived(
            vec![1],
            vec![dot / (nq * ns)],
            Op::Cosine { q: iq, s: is, eps },
            &[iq, is],
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (_, c) = self.dims2(ia)?;
        let va = &self.nodes[ia].value;
        let mut out = Vec::with_capacity(va.numel());
        for row in va.data().chunks_exact(c) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let start = out.len();
            out.extend(row.iter().map(|x| (x - m).exp()));
            let z: f32 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|e| *e /= z);
        }
        let shape = va.shape().to_vec();
        Ok(self.derived(shape, out, Op::SoftmaxRows(ia), &[ia]))
    }

    /// Mean over rows of `logsumexp(logits) - logits . onehot`.
    ///
    /// `onehot` has the same shape as `logits` and each row must sum to one.
    pub fn softmax_cross_entropy(&mut self, logits: Var, onehot: &Tensor) -> Result<Var> {
        let il = self.idx(logits)?;
        let vl = &self.nodes[il].value;
        if vl.shape() != onehot.shape() {
            return Err(Error::shape("softmax_cross_entropy", vl.shape(), onehot.shape()));
        }
        if !vl.all_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy logits".into()));
        }
        let (r, c) = vl.dims2()?;
        let mut loss = 0.0f32;
        for (row, hot) in vl.data().chunks_exact(c).zip(onehot.data().chunks_exact(c)) {
            let hs: f32 = hot.iter().sum();
            if (hs - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!("one-hot row sums to {hs}")));
            }
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f32>().ln();
            let picked: f32 = row.iter().zip(hot).map(|(x, h)| x * h).sum();
            loss += lse - picked;
        }
        loss /= r as f32;
        Ok(self.derived(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits: il,
                onehot: onehot.data().to_vec(),
            },
            &[il],
        ))
    }

    /// Mean over rows of `-ln(max(p[row, label], floor))`.
    pub fn nll_clamped(&mut self, probs: Var, labels: &[usize], floor: f32) -> Result<Var> {
        let ip = self.idx(probs)?;
        let (r, c) = self.dims2(ip)?;
        if labels.len() != r {
            return Err(Error::shape("nll_clamped", &[r, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Invalid(format!("label {bad} out of range for {c} classes")));
        }
        let d = self.nodes[ip].value.data();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -d[i * c + l].max(floor).ln())
            .sum::<f32>()
            / r as f32;
        Ok(self.derived(
            vec![1],
            vec![loss],
            Op::NllClamped {
                probs: ip,
                labels: labels.to_vec(),
                floor,
            },
            &[ip],
        ))
    }

    /// Standardizes each column with the biased statistics of this batch.
    pub fn batch_norm(&mut self, a: Var, eps: f32) -> Result<BatchNormOutput> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia)?;
        if r < 2 {
            return Err(Error::Insufficient(format!(
                "batch normalization needs at least 2 rows, got {r}"
            )));
        }
        let d = self.nodes[ia].value.data();
        let mut mean = vec![0.0f32; c];
        for row in d.chunks_exact(c) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= r as f32);
        let mut var = vec![0.0f32; c];
        for row in d.chunks_exact(c) {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= r as f32);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(r * c);
        for row in d.chunks_exact(c) {
            for ((x, m), s) in row.iter().zip(&mean).zip(&inv_std) {
                xhat.push((x - m) * s);
            }
        }
        let shape = self.nodes[ia].value.shape().to_vec();
        let normalized = self.derived(
            shape,
            xhat.clone(),
            Op::BatchNorm {
                input: ia,
                xhat,
                inv_std,
            },
            &[ia],
        );
        Ok(BatchNormOutput { normalized, mean, var })
    }

    /// Populates gradients of every gradient-requiring node reachable from
    /// `loss`. Gradients from earlier passes are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let il = self.idx(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::NotScalar(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; il + 1];
        grads[il] = Some(vec![1.0]);
        for node in &mut self.nodes {
            node.value.set_grad(None);
        }
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad() {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            self.nodes[i].value.set_grad(Some(g));
        }
        Ok(())
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].value.requires_grad()
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        let val = |j: usize| self.nodes[j].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a)?;
                let n = out.shape()[1];
                if self.needs(*a) {
                    let bt = transpose_raw(val(*b), k, n);
                    add_into(&mut grads[*a], matmul_raw(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    let at = transpose_raw(val(*a), m, k);
                    add_into(&mut grads[*b], matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims2(*a)?;
                add_into(&mut grads[*a], transpose_raw(g, c, r));
            }
            Op::Binary(a, b, kind) => {
                let (x, y) = (val(*a), val(*b));
                let (ga, gb): (Vec<f32>, Vec<f32>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    BinaryKind::Mul => (
                        g.iter().zip(y).map(|(g, y)| g * y).collect(),
                        g.iter().zip(x).map(|(g, x)| g * x).collect(),
                    ),
                    BinaryKind::Div => {
                        if y.contains(&0.0) {
                            return Err(Error::NonFinite("div backward at zero denominator".into()));
                        }
                        (
                            g.iter().zip(y).map(|(g, y)| g / y).collect(),
                            g.iter().zip(x).zip(y).map(|((g, x), y)| -g * x / (y * y)).collect(),
                        )
                    }
                };
                if self.needs(*a) {
                    add_into(&mut grads[*a], ga);
                }
                if self.needs(*b) {
                    add_into(&mut grads[*b], gb);
                }
            }
            Op::Scalar(a, s, kind) => {
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                    BinaryKind::Mul => g.iter().map(|g| g * s).collect(),
                    BinaryKind::Div => g.iter().map(|g| g / s).collect(),
                };
                add_into(&mut grads[*a], ga);
            }
            Op::AddRow(a, b) | Op::MulRow(a, b) => {
                let is_mul = matches!(self.nodes[i].op, Op::MulRow(..));
                let c = self.nodes[*b].value.numel();
                let row = val(*b);
                if self.needs(*a) {
                    let ga = if is_mul {
                        g.chunks_exact(c)
                            .flat_map(|gr| gr.iter().zip(row).map(|(g, r)| g * r))
                            .collect()
                    } else {
                        g.to_vec()
                    };
                    add_into(&mut grads[*a], ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0f32; c];
                    if is_mul {
                        for (gr, xr) in g.chunks_exact(c).zip(val(*a).chunks_exact(c)) {
                            for ((o, g), x) in gb.iter_mut().zip(gr).zip(xr) {
                                *o += g * x;
                            }
                        }
                    } else {
                        for gr in g.chunks_exact(c) {
                            gb.iter_mut().zip(gr).for_each(|(o, g)| *o += g);
                        }
                    }
                    add_into(&mut grads[*b], gb);
                }
            }
            Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[*a], ga);
            }
            Op::Softplus(a) => {
                let ga = g.iter().zip(val(*a)).map(|(g, &x)| g * logistic(x)).collect();
                add_into(&mut grads[*a], ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                add_into(&mut grads[*a], ga);
            }
            Op::ReduceMean { input, axis } => {
                let src = &self.nodes[*input].value;
                let (r, c) = src.dims2()?;
                let mut ga = Vec::with_capacity(r * c);
                if src.rank() == 1 || *axis == 1 {
                    for gi in g.iter().take(r) {
                        ga.extend(std::iter::repeat_n(gi / c as f32, c));
                    }
                } else {
                    for _ in 0..r {
                        ga.extend(g.iter().map(|gi| gi / r as f32));
                    }
                }
                add_into(&mut grads[*input], ga);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.numel();
                add_into(&mut grads[*a], vec![g[0]; n]);
            }
            Op::Reshape(a) => add_into(&mut grads[*a], g.to_vec()),
            Op::SliceRows { input, start } => {
                let src = &self.nodes[*input].value;
                let (_, c) = src.dims2()?;
                let mut ga = vec![0.0f32; src.numel()];
                ga[start * c..start * c + g.len()].copy_from_slice(g);
                add_into(&mut grads[*input], ga);
            }
            Op::SliceCols { input, start } => {
                let src = &self.nodes[*input].value;
                let (_, c) = src.dims2()?;
                let len = *out.shape().last().unwrap_or(&1);
                let mut ga = vec![0.0f32; src.numel()];
                for (dst, gr) in ga.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                    dst[*start..start + len].copy_from_slice(gr);
                }
                add_into(&mut grads[*input], ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if self.needs(p) {
                        add_into(&mut grads[p], g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::L2NormalizeRows { input, eps } => {
                let (_, c) = self.dims2(*input)?;
                let mut ga = Vec::with_capacity(g.len());
                for ((xr, yr), gr) in val(*input)
                    .chunks_exact(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(g.chunks_exact(c))
                {
                    let n = xr.iter().map(|x| x * x).sum::<f32>().sqrt();
                    if n > *eps {
                        let yg: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        ga.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * yg) / n));
                    } else {
                        ga.extend(gr.iter().map(|g| g / eps));
                    }
                }
                add_into(&mut grads[*input], ga);
            }
            Op::Cosine { q, s, eps } => {
                let (qv, sv) = (val(*q), val(*s));
                let cos = out.data()[0];
                let nq_raw = qv.iter().map(|x| x * x).sum::<f32>().sqrt();
                let ns_raw = sv.iter().map(|x| x * x).sum::<f32>().sqrt();
                let (nq, ns) = (nq_raw.max(*eps), ns_raw.max(*eps));
                let grad_of = |own: &[f32], other: &[f32], n_own_raw: f32, n_own: f32| {
                    own.iter()
                        .zip(other)
                        .map(|(o, t)| {
                            let mut d = t / (nq * ns);
                            if n_own_raw > *eps {
                                d -= cos * o / (n_own * n_own);
                            }
                            g[0] * d
                        })
                        .collect::<Vec<f32>>()
                };
                if self.needs(*q) {
                    add_into(&mut grads[*q], grad_of(qv, sv, nq_raw, nq));
                }
                if self.needs(*s) {
                    add_into(&mut grads[*s], grad_of(sv, qv, ns_raw, ns));
                }
            }
            Op::SoftmaxRows(a) => {
                let c = *out.shape().last().unwrap_or(&1);
                let mut ga = Vec::with_capacity(g.len());
                for (yr, gr) in out.data().chunks_exact(c).zip(g.chunks_exact(c)) {
                    let dot: f32 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                add_into(&mut grads[*a], ga);
            }
            Op::SoftmaxCrossEntropy { logits, onehot } => {
                let (r, c) = self.dims2(*logits)?;
                let mut ga = Vec::with_capacity(r * c);
                for (row, hot) in val(*logits).chunks_exact(c).zip(onehot.chunks_exact(c)) {
                    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = row.iter().map(|x| (x - m).exp()).sum();
                    ga.extend(
                        row.iter()
                            .zip(hot)
                            .map(|(x, h)| g[0] * ((x - m).exp() / z - h) / r as f32),
                    );
                }
                add_into(&mut grads[*logits], ga);
            }
            Op::NllClamped { probs, labels, floor } => {
                let (r, c) = self.dims2(*probs)?;
                let p = val(*probs);
                let mut ga = vec![0.0f32; r * c];
                for (row, &l) in labels.iter().enumerate() {
                    let v = p[row * c + l];
                    if v > *floor {
                        ga[row * c + l] = -g[0] / (r as f32 * v);
                    }
                }
                add_into(&mut grads[*probs], ga);
            }
            Op::BatchNorm { input, xhat, inv_std } => {
                let (r, c) = self.dims2(*input)?;
                let mut sum_g = vec![0.0f32; c];
                let mut sum_gx = vec![0.0f32; c];
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * xr[j];
                    }
                }
                let rf = r as f32;
                let mut ga = Vec::with_capacity(r * c);
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        ga.push(inv_std[j] / rf * (rf * gr[j] - sum_g[j] - xr[j] * sum_gx[j]));
                    }
                }
                add_into(&mut grads[*input], ga);
            }
        }
        Ok(())
    }

    /// Adds the gradients of all parameter leaves into `params`.
    ///
    /// Every parameter recorded on this tape ends up with a gradient buffer,
    /// zero-filled if the loss did not reach it.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let Some(id) = node.param {
                let t = params.get_mut(id);
                match node.value.grad() {
                    Some(g) => t.accumulate_grad(g),
                    None => {
                        if t.grad().is_none() {
                            t.set_grad(Some(vec![0.0; t.numel()]));
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = t.constant(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(mat(&[&[1.0, 2.0]]));
        let col = t.constant(mat(&[&[3.0], &[4.0]]));
        let d = t.matmul(r, col).unwrap();
        assert_eq!(t.value(d).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn elementwise_basics() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.constant(Tensor::vector(vec![3.0, 4.0]));
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        let z = t.mul(a, 0.0).unwrap();
        assert_eq!(t.value(z).data(), &[0.0, 0.0]);
        let c = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(t.add(a, c).is_err());
        assert!(t.div(a, 0.0).is_err());
    }

    #[test]
    fn div_backward_at_zero_is_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let b = t.leaf(Tensor::vector(vec![0.0, 1.0]).with_requires_grad(true));
        let q = t.div(a, b).unwrap();
        let s = t.sum(q).unwrap();
        assert!(matches!(t.backward(s), Err(Error::NonFinite(_))));
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = t.relu(a).unwrap();
        assert_eq!(t.value(r).data(), &[0.0, 0.0, 2.0]);

        let x = t.leaf(Tensor::vector(vec![-1.0, 2.0]).with_requires_grad(true));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.0]).with_requires_grad(true));
        let y = t.relu(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn softplus_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![0.0, 100.0, -100.0]));
        let s = t.softplus(a).unwrap();
        let v = t.value(s).data();
        assert!((v[0] - std::f32::consts::LN_2).abs() < 1e-6);
        assert!((v[1] - 100.0).abs() < 1e-4 && v[1].is_finite());
        assert!(v[2] >= 0.0 && v[2] < 1e-30);
    }

    #[test]
    fn reduce_mean_axes() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let m0 = t.reduce_mean(a, 0).unwrap();
        assert_eq!(t.value(m0).data(), &[2.0, 3.0]);
        let m1 = t.reduce_mean(a, 1).unwrap();
        assert_eq!(t.value(m1).data(), &[1.5, 3.5]);
        let single = t.constant(Tensor::vector(vec![7.5]));
        let ms = t.reduce_mean(single, 0).unwrap();
        assert_eq!(t.value(ms).data(), &[7.5]);
        assert!(matches!(t.reduce_mean(a, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn normalize_rows() {
        let mut t = Tape::new();
        let a = t.constant(mat(&[&[3.0, 4.0], &[0.6, 0.8], &[0.0, 0.0]]));
        let n = t.l2_normalize_rows(a, NORM_EPS).unwrap();
        let v = t.value(n).data();
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        assert!((v[2] - 0.6).abs() < 1e-7 && (v[3] - 0.8).abs() < 1e-7);
        assert_eq!(&v[4..], &[0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let b = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let c = t.constant(Tensor::vector(vec![0.0, 3.0]));
        let ab = t.cosine_similarity(a, b, NORM_EPS).unwrap();
        assert!((t.value(ab).data()[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        let ac = t.cosine_similarity(a, c, NORM_EPS).unwrap();
        assert_eq!(t.value(ac).data()[0], 0.0);
        let bb = t.cosine_similarity(b, b, NORM_EPS).unwrap();
        assert!((t.value(bb).data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_and_dominant() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::vector(vec![0.3; 5]));
        let mut hot = vec![0.0; 5];
        hot[2] = 1.0;
        let hot = Tensor::vector(hot);
        let ce = t.softmax_cross_entropy(l, &hot).unwrap();
        assert!((t.value(ce).data()[0] - 5f32.ln()).abs() < 1e-6);

        let dom = t.constant(Tensor::vector(vec![0.0, 0.0, 80.0, 0.0, 0.0]));
        let ce = t.softmax_cross_entropy(dom, &hot).unwrap();
        assert!(t.value(ce).data()[0] < 1e-6);

        let bad = t.constant(Tensor::vector(vec![0.0, f32::INFINITY, 0.0, 0.0, 0.0]));
        assert!(matches!(t.softmax_cross_entropy(bad, &hot), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_identity_and_reuse() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0).with_requires_grad(true));
        t.backward(x).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));

        let mut other = Tape::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.backward(y), Err(Error::ForeignTensor)));
        assert!(matches!(t.relu(y), Err(Error::ForeignTensor)));
    }

    #[test]
    fn batch_norm_needs_two_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(t.batch_norm(x, 1e-5), Err(Error::Insufficient(_))));
    }

    #[test]
    fn param_grads_flow_back() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::vector(vec![1.0, -2.0]));
        let unused = params.add("unused", Tensor::vector(vec![5.0]));
        let mut t = Tape::new();
        let wv = t.param(&params, w);
        let _ = t.param(&params, unused);
        let sq = t.mul(wv, wv).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        t.accumulate_param_grads(&mut params);
        assert_eq!(params.get(w).grad().unwrap(), &[2.0, -4.0]);
        assert_eq!(params.get(unused).grad().unwrap(), &[0.0]);
    }
}
