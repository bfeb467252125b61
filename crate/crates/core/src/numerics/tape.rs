//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every primitive evaluates eagerly and appends a record holding its
//! output value and input handles. [`Tape::backward`] walks the records
//! in reverse once, producing vector-Jacobian products for every node
//! that depends on a trainable [`Param`](super::Param).

use std::fmt::Write as _;
use std::sync::Arc;

use super::param::{ParamId, ParamStore};
use super::tensor::{dot, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed segment layout: entry `e` of segment `s` lives in
/// `offsets[s]..offsets[s + 1]` and refers to source row `index[e]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    index: Vec<usize>,
}

impl Segments {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut index = Vec::new();
        offsets.push(0);
        for l in lists {
            index.extend_from_slice(l);
            offsets.push(index.len());
        }
        Segments { offsets, index }
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_entries(&self) -> usize {
        self.index.len()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// Segment id of every entry.
    pub fn owners(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.index.len());
        for s in 0..self.num_segments() {
            out.extend(std::iter::repeat_n(s, self.range(s).len()));
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    ElemMul(Var, Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    ReduceMeanRows(Var),
    SumAll(Var),
    L2NormalizeRows(Var, Vec<usize>),
    FrobeniusNormSq(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentAttend(Var, Var, Arc<Segments>),
    Pick(Var, Arc<[(usize, usize)]>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::ElemMul(..) => "elementwise_mul",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Transpose(..) => "transpose",
            Op::RowSoftmax(..) => "row_softmax",
            Op::RowLogSoftmax(..) => "row_log_softmax",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::ReduceMeanRows(..) => "reduce_mean_rows",
            Op::SumAll(..) => "sum_all",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::FrobeniusNormSq(..) => "frobenius_norm_sq",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSoftmax(..) => "segment_softmax",
            Op::SegmentAttend(..) => "segment_attend",
            Op::Pick(..) => "pick",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::ElemMul(a, b)
            | Op::SegmentAttend(a, b, _) => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::Scale(a, _)
            | Op::SliceRows(a, ..)
            | Op::SliceCols(a, ..)
            | Op::Transpose(a)
            | Op::RowSoftmax(a)
            | Op::RowLogSoftmax(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::ReduceMeanRows(a)
            | Op::SumAll(a)
            | Op::L2NormalizeRows(a, _)
            | Op::FrobeniusNormSq(a)
            | Op::GatherRows(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::Pick(a, _) => vec![*a],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive evaluations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape(),
        rhs: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// Binds a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push_raw(p.value.clone(), Op::Leaf, p.trainable);
        if p.trainable {
            self.params.push((v, id));
        }
        v
    }

    pub(crate) fn param_bindings(&self) -> &[(Var, ParamId)] {
        &self.params
    }

    /// Zero-norm rows encountered by an `l2_normalize_rows` record.
    pub fn zero_rows(&self, v: Var) -> &[usize] {
        match &self.nodes[v.0].op {
            Op::L2NormalizeRows(_, z) => z,
            _ => &[],
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul_raw(tb);
        self.push(out, Op::MatMul(a, b))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let tb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o -= v;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a `1×c` row to every row of an `n×c` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.rows() != 1 || tr.cols() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(tr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies `x` by the value of a `1×1` tape variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.shape() != (1, 1) {
            return Err(shape_err("mul_scalar", self.value(x), ts));
        }
        let c = ts.item();
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar(x, s))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("elementwise_mul", a, b)?;
        let tb = self.value(b);
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= v;
        }
        self.push(out, Op::ElemMul(a, b))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for &p in parts {
                let t = self.value(p);
                out.row_mut(r)[c0..c0 + t.cols()].copy_from_slice(t.row(r));
                c0 += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let idx: Vec<usize> = (start..end).collect();
        let out = t.select_rows(&idx);
        self.push(out, Op::SliceRows(x, start))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start > end || end > t.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: t.shape(),
                rhs: (start, end),
            });
        }
        let mut out = Tensor::zeros(t.rows(), end - start);
        for r in 0..t.rows() {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..end]);
        }
        self.push(out, Op::SliceCols(x, start, end))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Softmax along each row, computed with row-max subtraction.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::RowSoftmax(x))
    }

    pub fn row_log_softmax(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(out, Op::RowLogSoftmax(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x))
    }

    /// Column means: `n×c → 1×c`.
    pub fn reduce_mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.rows();
        if n == 0 {
            return Err(Error::Contract("reduce_mean_rows over zero rows".into()));
        }
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..n {
            for (o, v) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        out.scale_in_place(1.0 / n as f64);
        self.push(out, Op::ReduceMeanRows(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// Scales each row to unit Euclidean norm. Zero rows stay zero and
    /// are reported through [`Tape::zero_rows`].
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut zero = Vec::new();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                zero.push(r);
                continue;
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
        self.push(out, Op::L2NormalizeRows(x, zero))
    }

    pub fn frobenius_norm_sq(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).frobenius_norm_sq();
        self.push(Tensor::scalar(s), Op::FrobeniusNormSq(x))
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: t.shape(),
                rhs: (bad, 0),
            });
        }
        let out = t.select_rows(&index);
        self.push(out, Op::GatherRows(x, index))
    }

    /// Softmax of an `E×1` column within each segment.
    pub fn segment_softmax(&mut self, x: Var, segs: Arc<Segments>) -> Result<Var> {
        let t = self.value(x);
        if t.cols() != 1 || t.rows() != segs.num_entries() {
            return Err(Error::Shape {
                op: "segment_softmax",
                lhs: t.shape(),
                rhs: (segs.num_entries(), 1),
            });
        }
        let mut out = t.clone();
        for s in 0..segs.num_segments() {
            softmax_in_place(&mut out.data_mut()[segs.range(s)]);
        }
        self.push(out, Op::SegmentSoftmax(x, segs))
    }

    /// Row `s` of the result is `Σ_{e ∈ s} weights[e] · source[index[e]]`.
    pub fn segment_attend(&mut self, weights: Var, source: Var, segs: Arc<Segments>) -> Result<Var> {
        let (tw, ts) = (self.value(weights), self.value(source));
        if tw.cols() != 1 || tw.rows() != segs.num_entries() {
            return Err(Error::Shape {
                op: "segment_attend",
                lhs: tw.shape(),
                rhs: (segs.num_entries(), 1),
            });
        }
        if segs.index().iter().any(|&i| i >= ts.rows()) {
            return Err(Error::Shape {
                op: "segment_attend",
                lhs: ts.shape(),
                rhs: (segs.num_entries(), 1),
            });
        }
        let d = ts.cols();
        let mut out = Tensor::zeros(segs.num_segments(), d);
        for s in 0..segs.num_segments() {
            let row = out.row_mut(s);
            for e in segs.range(s) {
                let w = tw.data()[e];
                for (o, v) in row.iter_mut().zip(ts.row(segs.index()[e])) {
                    *o += w * v;
                }
            }
        }
        self.push(out, Op::SegmentAttend(weights, source, segs))
    }

    /// Collects the listed `(row, col)` entries into a `k×1` column.
    pub fn pick(&mut self, x: Var, entries: Arc<[(usize, usize)]>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= t.rows() || c >= t.cols()) {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape(),
                rhs: (r, c),
            });
        }
        let vals: Vec<f64> = entries.iter().map(|&(r, c)| t.get(r, c)).collect();
        self.push(Tensor::column(&vals), Op::Pick(x, entries))
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.matmul_t_raw(self.value(*b)));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.value(*a).t_matmul_raw(g));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::AddRow(x, row) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.clone());
                }
                if self.wants(*row) {
                    let mut acc = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in acc.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *row, acc);
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * c)),
            Op::MulScalar(x, s) => {
                let tx = self.value(*x);
                if self.wants(*x) {
                    let c = self.value(*s).item();
                    accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    accumulate(grads, *s, Tensor::scalar(dot(g.data(), tx.data())));
                }
            }
            Op::ElemMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(grads, *a, hadamard(g, tb));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, hadamard(g, ta));
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut part = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            part.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + w]);
                        }
                        accumulate(grads, p, part);
                    }
                    c0 += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.wants(p) {
                        let idx: Vec<usize> = (r0..r0 + h).collect();
                        accumulate(grads, p, g.select_rows(&idx));
                    }
                    r0 += h;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let mut full = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..g.rows() {
                    full.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, full);
            }
            Op::SliceCols(x, start, end) => {
                let tx = self.value(*x);
                let mut full = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..g.rows() {
                    full.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, full);
            }
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::RowSoftmax(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::RowLogSoftmax(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                let mut dx = g.clone();
                for (o, v) in dx.data_mut().iter_mut().zip(tx.data()) {
                    if *v <= 0.0 {
                        *o *= slope;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let mut dx = g.clone();
                for (o, yv) in dx.data_mut().iter_mut().zip(y.data()) {
                    *o *= 1.0 - yv * yv;
                }
                accumulate(grads, *x, dx);
            }
            Op::ReduceMeanRows(x) => {
                let tx = self.value(*x);
                let n = tx.rows() as f64;
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    for (o, v) in dx.row_mut(r).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, Tensor::filled(tx.rows(), tx.cols(), g.item()));
            }
            Op::L2NormalizeRows(x, zero) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    if zero.binary_search(&r).is_ok() {
                        continue;
                    }
                    let xr = tx.row(r);
                    let norm = dot(xr, xr).sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, yv), gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * inner) / norm;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::FrobeniusNormSq(x) => {
                let c = 2.0 * g.item();
                accumulate(grads, *x, self.value(*x).map(|v| v * c));
            }
            Op::GatherRows(x, index) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for (e, &i) in index.iter().enumerate() {
                    for (o, v) in dx.row_mut(i).iter_mut().zip(g.row(e)) {
                        *o += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentSoftmax(x, segs) => {
                let mut dx = Tensor::zeros(y.rows(), 1);
                for s in 0..segs.num_segments() {
                    let range = segs.range(s);
                    let (yr, gr) = (&y.data()[range.clone()], &g.data()[range.clone()]);
                    let inner = dot(yr, gr);
                    for ((o, yv), gv) in dx.data_mut()[range].iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentAttend(w, src, segs) => {
                let (tw, ts) = (self.value(*w), self.value(*src));
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(tw.rows(), 1);
                    for s in 0..segs.num_segments() {
                        for e in segs.range(s) {
                            dw.data_mut()[e] = dot(g.row(s), ts.row(segs.index()[e]));
                        }
                    }
                    accumulate(grads, *w, dw);
                }
                if self.wants(*src) {
                    let mut ds = Tensor::zeros(ts.rows(), ts.cols());
                    for s in 0..segs.num_segments() {
                        for e in segs.range(s) {
                            let wv = tw.data()[e];
                            for (o, v) in ds.row_mut(segs.index()[e]).iter_mut().zip(g.row(s)) {
                                *o += wv * v;
                            }
                        }
                    }
                    accumulate(grads, *src, ds);
                }
            }
            Op::Pick(x, entries) => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.rows(), tx.cols());
                for (k, &(r, c)) in entries.iter().enumerate() {
                    let cur = dx.get(r, c);
                    dx.set(r, c, cur + g.data()[k]);
                }
                accumulate(grads, *x, dx);
            }
        }
    }

    /// Text listing of the recorded operations, one per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = n.op.inputs().iter().map(|v| format!("%{}", v.0)).collect();
            let _ = writeln!(
                out,
                "%{i}\t{}\t{}x{}\t{}{}",
                n.op.name(),
                n.value.rows(),
                n.value.cols(),
                inputs.join(","),
                if n.requires_grad { "\tgrad" } else { "" }
            );
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
