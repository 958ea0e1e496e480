use std::sync::Arc;

use rand::Rng;

use super::kernels::gemm;
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    LeakyRelu { a: Var, slope: f64 },
    Elu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    LogSigmoid(Var),
    /// Elementwise factors: 0 for dropped entries, 1/(1-rate) otherwise.
    Dropout { a: Var, factors: Vec<f64> },
    GatherRows { a: Var, idx: Arc<[usize]> },
    GatherElements { a: Var, rows: Arc<[usize]>, cols: Arc<[usize]> },
    SegmentSoftmax { a: Var, ids: Arc<[usize]> },
    SegmentSum { a: Var, ids: Arc<[usize]> },
    SumAll(Var),
    SumSquares(Var),
    LogSoftmaxRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records the forward computation for one backward pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction. A tape supports a single [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; all zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.id];
        self.grads[v.id].take().unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

fn broadcast_shape(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::Shape { op, lhs: a, rhs: b }),
    }
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows {
        let orow = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols {
            let ocol = if shape.1 == 1 { 0 } else { c };
            out.data[orow * shape.1 + ocol] += g.data[r * g.cols + c];
        }
    }
    out
}

#[inline]
fn bcast_index(r: usize, c: usize, shape: (usize, usize)) -> usize {
    let rr = if shape.0 == 1 { 0 } else { r };
    let cc = if shape.1 == 1 { 0 } else { c };
    rr * shape.1 + cc
}

fn check_segments(ids: &[usize], len: usize, num_segments: Option<usize>) -> Result<()> {
    if ids.len() != len {
        return Err(Error::Shape {
            op: "segment",
            lhs: (len, 1),
            rhs: (ids.len(), 1),
        });
    }
    if let Some(w) = ids.windows(2).position(|w| w[0] > w[1]) {
        return Err(Error::Contract(format!(
            "segment_ids not sorted ascending at position {}",
            w + 1
        )));
    }
    if let (Some(n), Some(&last)) = (num_segments, ids.last()) {
        if last >= n {
            return Err(Error::Contract(format!(
                "segment id {last} exceeds num_segments {n}"
            )));
        }
    }
    Ok(())
}

/// Contiguous runs of equal ids as `start..end` ranges.
fn segments(ids: &[usize]) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= ids.len() {
            return None;
        }
        let id = ids[start];
        let mut end = start + 1;
        while end < ids.len() && ids[end] == id {
            end += 1;
        }
        let r = start..end;
        start = end;
        Some(r)
    })
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -log(1 + e^{-x}), stable for both signs
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Tensor::zeros(a.rows, b.cols);
        gemm(self.value(a), false, self.value(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, b_t: false }, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let mut out = Tensor::zeros(a.rows, b.rows);
        gemm(self.value(a), false, self.value(b), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, b_t: true }, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (rows, cols) = broadcast_shape(name, a.shape(), b.shape())?;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.data[r * cols + c] = f(
                    av.data[bcast_index(r, c, a.shape())],
                    bv.data[bcast_index(r, c, b.shape())],
                );
            }
        }
        Ok(out)
    }

    /// Elementwise sum; either operand may broadcast along a unit axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(p) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::Shape {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let v = self.value(*p);
            for r in 0..rows {
                out.data[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(v.row(r));
            }
            offset += p.cols;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |p| p.cols);
        if let Some(p) = parts.iter().find(|p| p.cols != cols) {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { rows, cols, data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > a.cols {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: a.shape(),
                rhs: (start, len),
            });
        }
        let v = self.value(a);
        let mut out = Tensor::zeros(a.rows, len);
        for r in 0..a.rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        self.push(out, Op::LeakyRelu { a, slope }, rg)
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(&[a]);
        self.push(out, Op::Elu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `log σ(x)`, evaluated without forming σ(x).
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSigmoid(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(out, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(out, Op::Exp(a), rg)
    }

    /// Inverted dropout: zeroes each entry with probability `rate` and
    /// scales survivors by `1/(1-rate)`. Identity when not training or when
    /// `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Range(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let factors: Vec<f64> = (0..a.rows * a.cols)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(a);
        let data = v.data.iter().zip(&factors).map(|(x, f)| x * f).collect();
        let out = Tensor {
            rows: a.rows,
            cols: a.cols,
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Dropout { a, factors }, rg))
    }

    /// Row `idx[k]` of `a` becomes row `k` of the output.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= a.rows) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: a.shape(),
                rhs: (bad, 0),
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * a.cols);
        for &i in idx.iter() {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor {
            rows: idx.len(),
            cols: a.cols,
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows { a, idx }, rg))
    }

    /// Column vector of `a[rows[k], cols[k]]`.
    pub fn gather_elements(&mut self, a: Var, rows: Arc<[usize]>, cols: Arc<[usize]>) -> Result<Var> {
        if rows.len() != cols.len() {
            return Err(Error::Shape {
                op: "gather_elements",
                lhs: (rows.len(), 1),
                rhs: (cols.len(), 1),
            });
        }
        if let Some((r, c)) = rows
            .iter()
            .zip(cols.iter())
            .find(|(&r, &c)| r >= a.rows || c >= a.cols)
        {
            return Err(Error::Shape {
                op: "gather_elements",
                lhs: a.shape(),
                rhs: (*r, *c),
            });
        }
        let v = self.value(a);
        let data = rows.iter().zip(cols.iter()).map(|(&r, &c)| v.get(r, c)).collect();
        let out = Tensor::column(data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherElements { a, rows, cols }, rg))
    }

    /// Softmax within each run of equal segment ids, independently per
    /// column.
    ///
    /// The per-segment maximum is subtracted before exponentiation.
    pub fn segment_softmax(&mut self, scores: Var, ids: Arc<[usize]>) -> Result<Var> {
        let out = self.segment_softmax_values(scores, &ids, None)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(out, Op::SegmentSoftmax { a: scores, ids }, rg))
    }

    /// Like [`Tape::segment_softmax`], but entries with `keep[k] == false`
    /// receive exactly zero weight and are left out of the normalisation.
    /// A segment with no kept entry is all zeros.
    pub fn segment_softmax_masked(&mut self, scores: Var, ids: Arc<[usize]>, keep: Arc<[bool]>) -> Result<Var> {
        if keep.len() != scores.rows {
            return Err(Error::Shape {
                op: "segment_softmax_masked",
                lhs: scores.shape(),
                rhs: (keep.len(), 1),
            });
        }
        let out = self.segment_softmax_values(scores, &ids, Some(&keep))?;
        let rg = self.rg(&[scores]);
        // masked entries have zero output, so the unmasked VJP gives them zero
        Ok(self.push(out, Op::SegmentSoftmax { a: scores, ids }, rg))
    }

    fn segment_softmax_values(&self, scores: Var, ids: &[usize], keep: Option<&[bool]>) -> Result<Tensor> {
        check_segments(ids, scores.rows, None)?;
        let kept = |k: usize| keep.map_or(true, |m| m[k]);
        let x = self.value(scores);
        let cols = scores.cols;
        let mut out = Tensor::zeros(scores.rows, cols);
        for seg in segments(ids) {
            for c in 0..cols {
                let max = seg
                    .clone()
                    .filter(|&k| kept(k))
                    .map(|k| x.data[k * cols + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for k in seg.clone().filter(|&k| kept(k)) {
                    let e = (x.data[k * cols + c] - max).exp();
                    out.data[k * cols + c] = e;
                    total += e;
                }
                for k in seg.clone() {
                    out.data[k * cols + c] /= total;
                }
            }
        }
        Ok(out)
    }

    /// Sums the rows of `values` into `num_segments` output rows by id.
    pub fn segment_sum(&mut self, values: Var, ids: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        check_segments(&ids, values.rows, Some(num_segments))?;
        let v = self.value(values);
        let mut out = Tensor::zeros(num_segments, values.cols);
        for (k, &s) in ids.iter().enumerate() {
            for (o, x) in out.row_mut(s).iter_mut().zip(v.row(k)) {
                *o += x;
            }
        }
        let rg = self.rg(&[values]);
        Ok(self.push(out, Op::SegmentSum { a: values, ids }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols).max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum_squares());
        let rg = self.rg(&[a]);
        self.push(out, Op::SumSquares(a), rg)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..a.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::LogSoftmaxRows(a), rg)
    }

    /// Sum of scalar vars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        iter.try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Reverse pass from a 1×1 `loss`.
    ///
    /// Gradients of every node that depends on a trainable leaf are summed
    /// over all uses. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        // interior gradients are not exposed for constant subgraphs
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.id].value;
        let needs = |v: Var| self.nodes[v.id].requires_grad;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.id].requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (a, b, b_t) = (*a, *b, *b_t);
                if needs(a) {
                    // dA = G · op(B)ᵀ
                    let mut da = Tensor::zeros(a.rows, a.cols);
                    gemm(g, false, val(b), !b_t, &mut da, 0.0);
                    acc(a, da);
                }
                if needs(b) {
                    let mut db = Tensor::zeros(b.rows, b.cols);
                    if b_t {
                        // B is n×k and C = A·Bᵀ, so dB = Gᵀ · A
                        gemm(g, true, val(a), false, &mut db, 0.0);
                    } else {
                        gemm(val(a), true, g, false, &mut db, 0.0);
                    }
                    acc(b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, reduce_to(g, a.shape()));
                acc(*b, reduce_to(g, b.shape()));
            }
            Op::Sub(a, b) => {
                acc(*a, reduce_to(g, a.shape()));
                acc(*b, reduce_to(&g.map(|x| -x), b.shape()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (rows, cols) = g.shape();
                if needs(*a) {
                    let mut ga = g.clone();
                    for r in 0..rows {
                        for c in 0..cols {
                            ga.data[r * cols + c] *= bv.data[bcast_index(r, c, b.shape())];
                        }
                    }
                    acc(*a, reduce_to(&ga, a.shape()));
                }
                if needs(*b) {
                    let mut gb = g.clone();
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.data[r * cols + c] *= av.data[bcast_index(r, c, a.shape())];
                        }
                    }
                    acc(*b, reduce_to(&gb, b.shape()));
                }
            }
            Op::Scale(a, f) => acc(*a, g.map(|x| x * f)),
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    if needs(*p) {
                        let mut d = Tensor::zeros(p.rows, p.cols);
                        for r in 0..p.rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + p.cols]);
                        }
                        acc(*p, d);
                    }
                    offset += p.cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = p.rows * p.cols;
                    if needs(*p) {
                        let d = Tensor {
                            rows: p.rows,
                            cols: p.cols,
                            data: g.data[offset..offset + n].to_vec(),
                        };
                        acc(*p, d);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { a, start } => {
                if !needs(*a) {
                    return;
                }
                // write into the existing gradient to avoid a full-width zero buffer per slice
                let d = grads[a.id].get_or_insert_with(|| Tensor::zeros(a.rows, a.cols));
                for r in 0..a.rows {
                    for (o, x) in d.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let x = val(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { gi * slope })
                    .collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Elu(a) => {
                let x = val(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { gi * xi.exp() })
                    .collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let data = g.data.iter().zip(&y.data).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(-x)
                let x = val(*a);
                let data = g.data.iter().zip(&x.data).map(|(gi, &xi)| gi * sigmoid(-xi)).collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Log(a) => {
                let x = val(*a);
                let data = g.data.iter().zip(&x.data).map(|(gi, xi)| gi / xi).collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Exp(a) => {
                let y = &node.value;
                let data = g.data.iter().zip(&y.data).map(|(gi, yi)| gi * yi).collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::Dropout { a, factors } => {
                let data = g.data.iter().zip(factors).map(|(gi, f)| gi * f).collect();
                acc(*a, Tensor { data, ..g.clone() });
            }
            Op::GatherRows { a, idx } => {
                let mut d = Tensor::zeros(a.rows, a.cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, x) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                acc(*a, d);
            }
            Op::GatherElements { a, rows, cols } => {
                let mut d = Tensor::zeros(a.rows, a.cols);
                for (k, (&r, &c)) in rows.iter().zip(cols.iter()).enumerate() {
                    d.data[r * a.cols + c] += g.data[k];
                }
                acc(*a, d);
            }
            Op::SegmentSoftmax { a, ids } => {
                // dx_k = y_k (g_k - Σ_seg g_j y_j), per column
                let y = &node.value.data;
                let cols = a.cols;
                let mut d = Tensor::zeros(a.rows, cols);
                for seg in segments(ids) {
                    for c in 0..cols {
                        let dot: f64 = seg.clone().map(|k| g.data[k * cols + c] * y[k * cols + c]).sum();
                        for k in seg.clone() {
                            d.data[k * cols + c] = y[k * cols + c] * (g.data[k * cols + c] - dot);
                        }
                    }
                }
                acc(*a, d);
            }
            Op::SegmentSum { a, ids } => {
                let mut d = Tensor::zeros(a.rows, a.cols);
                for (k, &s) in ids.iter().enumerate() {
                    d.row_mut(k).copy_from_slice(g.row(s));
                }
                acc(*a, d);
            }
            Op::SumAll(a) => acc(*a, Tensor::full(a.rows, a.cols, g.item())),
            Op::SumSquares(a) => {
                let s = 2.0 * g.item();
                acc(*a, val(*a).map(|x| s * x));
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax · rowsum(g)
                let y = &node.value;
                let mut d = g.clone();
                for r in 0..a.rows {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (dx, ly) in d.row_mut(r).iter_mut().zip(y.row(r)) {
                        *dx -= ly.exp() * gsum;
                    }
                }
                acc(*a, d);
            }
        }
    }
}
