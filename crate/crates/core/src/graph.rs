//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves borrowed from a [`ParamStore`]; [`Graph::backward`] returns the
//! gradient of a scalar node with respect to every parameter that was used.
//!
//! Shape errors inside the graph are programming errors and panic. Public
//! model functions validate their inputs before building nodes.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `a + 1·rowᵀ` with `row` of shape `1 × cols`.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// Multiply by a `1 × 1` node.
    ScaleBy(NodeId, NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    /// Row softmax; `mask[i]` true means entry `i` is excluded (weight 0).
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    MeanRows(NodeId),
    RepeatRows(NodeId),
    Transpose(NodeId),
    NormalizeRows(NodeId, Vec<T>),
    RowDot(NodeId, NodeId),
    LogSigmoid(NodeId),
    Sum(NodeId),
    /// Per-row cross entropy; `None` targets contribute 0.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Matrix<T>,
    },
    Gather(NodeId, Vec<usize>),
}

enum Value<T> {
    Owned(Matrix<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    /// False when no parameter or input leaf is upstream.
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Matrix<T>>>,
    inputs: BTreeMap<usize, Matrix<T>>,
}

impl<T: Real> Gradients<T> {
    /// `None` when the parameter did not take part in the loss.
    pub fn param(&self, id: ParamId) -> Option<&Matrix<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[Option<Matrix<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Matrix<T>>] {
        &mut self.params
    }

    /// Gradient for an [`Graph::input`] node.
    pub fn input(&self, id: NodeId) -> Option<&Matrix<T>> {
        self.inputs.get(&id.0)
    }

    /// Adds `other` into `self`, parameter by parameter.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.params.iter_mut().flatten() {
            for x in g.data_mut() {
                *x = *x * factor;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

/// `ln σ(x)` evaluated without overflow.
pub fn log_sigmoid<T: Real>(x: T) -> T {
    let zero = T::zero();
    x.min(zero) - (-x.abs()).exp().ln_1p()
}

/// `σ(x)` evaluated without overflow.
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax over a slice, honoring an optional exclusion mask.
fn softmax_row<T: Real>(row: &[T], mask: Option<&[bool]>, out: &mut [T]) {
    let blocked = |i: usize| mask.is_some_and(|m| m[i]);
    let mut max = T::neg_infinity();
    for (i, &x) in row.iter().enumerate() {
        if !blocked(i) && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (i, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if blocked(i) { T::zero() } else { (x - max).exp() };
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub struct Graph<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> NodeId {
        let tracked = self.op_tracked(&op);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        match &self.nodes[id.0].value {
            Value::Owned(m) => m,
            Value::Param(p) => self.store.get(*p),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn op_tracked(&self, op: &Op<T>) -> bool {
        let t = |n: &NodeId| self.nodes[n.0].tracked;
        match op {
            Op::Input | Op::Param(_) => true,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::RowDot(a, b) => t(a) || t(b),
            Op::LayerNorm { x, gain, bias, .. } => t(x) || t(gain) || t(bias),
            Op::ConcatRows(parts) => parts.iter().any(t),
            Op::Scale(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::SliceRows(a, _)
            | Op::MeanRows(a)
            | Op::RepeatRows(a)
            | Op::Transpose(a)
            | Op::NormalizeRows(a, _)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::Gather(a, _) => t(a),
            Op::CrossEntropy { logits, .. } => t(logits),
        }
    }

    /// A leaf whose gradient is reported by [`Gradients::input`].
    pub fn input(&mut self, value: Matrix<T>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Input,
            tracked: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            tracked: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Broadcast-adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut v = self.value(a).clone();
        let cols = v.cols();
        for chunk in v.data_mut().chunks_mut(cols) {
            for (x, &b) in chunk.iter_mut().zip(r.data()) {
                *x = *x + b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let v = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let factor = self.value(s).item();
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.softmax_impl(a, None)
    }

    /// Row softmax where `mask[r * cols + c] == true` excludes that entry.
    /// Every row must keep at least one entry.
    pub fn softmax_rows_masked(&mut self, a: NodeId, mask: Vec<bool>) -> NodeId {
        assert_eq!(mask.len(), self.value(a).data().len(), "mask shape mismatch");
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: NodeId, mask: Option<Vec<bool>>) -> NodeId {
        let x = self.value(a);
        let cols = x.cols();
        let mut v = Matrix::zeros(x.rows(), cols);
        for r in 0..x.rows() {
            let m = mask.as_ref().map(|m| &m[r * cols..(r + 1) * cols]);
            softmax_row(x.row(r), m, v.row_mut(r));
        }
        self.push(v, Op::Softmax(a))
    }

    /// Row layer normalization followed by `gain ⊙ · + bias` (both `1 × cols`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(self.value(gain).shape(), (1, cols), "layer_norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, cols), "layer_norm bias shape");
        let n = T::of(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            rstd.push(s);
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = xhat.clone();
        for chunk in out.data_mut().chunks_mut(cols) {
            for ((o, &gg), &bb) in chunk.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let vals: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&vals);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start))
    }

    /// Column mean, `1 × cols`.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    /// Stacks `n` copies of the row vector `a`.
    pub fn repeat_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let r = self.value(a);
        assert_eq!(r.rows(), 1, "repeat_rows expects a row vector");
        let parts: Vec<&Matrix<T>> = (0..n).map(|_| r).collect();
        let v = Matrix::concat_rows(&parts);
        self.push(v, Op::RepeatRows(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Scales every row to unit L2 norm. Rows must be non-zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        let mut norms = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let n = dot(x.row(r), x.row(r)).sqrt();
            norms.push(n);
            for o in v.row_mut(r) {
                *o = *o / n;
            }
        }
        self.push(v, Op::NormalizeRows(a, norms))
    }

    /// Dot product of matching rows, `rows × 1`.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let data = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let v = Matrix::from_vec(va.rows(), 1, data);
        self.push(v, Op::RowDot(a, b))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    /// Sum of all entries, `1 × 1`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Mean of all entries, `1 × 1`.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).data().len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Per-row `−log softmax(logits)[target]`, shape `rows × 1`.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: Vec<Option<usize>>) -> NodeId {
        let x = self.value(logits);
        assert_eq!(targets.len(), x.rows(), "one target per row");
        let mut probs = Matrix::zeros(x.rows(), x.cols());
        let mut losses = Vec::with_capacity(x.rows());
        for (r, t) in targets.iter().enumerate() {
            softmax_row(x.row(r), None, probs.row_mut(r));
            match t {
                Some(t) => {
                    assert!(*t < x.cols(), "target out of range");
                    let row = x.row(r);
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                    losses.push(lse - row[*t]);
                }
                None => losses.push(T::zero()),
            }
        }
        let v = Matrix::from_vec(x.rows(), 1, losses);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let rows: Vec<&[T]> = ids.iter().map(|&i| t.row(i)).collect();
        let v = Matrix::from_rows(&rows);
        let v = if ids.is_empty() { Matrix::zeros(0, t.cols()) } else { v };
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    /// Gradients of the `1 × 1` node `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        self.backward_from(loss, Matrix::scalar(T::one()))
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_from(&self, output: NodeId, seed: Matrix<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(output), "seed shape mismatch");
        let mut grads: Vec<Option<Matrix<T>>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed);
        let mut out = Gradients {
            params: vec![None; self.store.len()],
            inputs: BTreeMap::new(),
        };

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {
                    if let Some(g) = grads[idx].take() {
                        if node.tracked {
                            out.inputs.insert(idx, g);
                        }
                    }
                    continue;
                }
                Op::Param(p) => {
                    if let Some(g) = grads[idx].take() {
                        out.params[p.index()] = Some(g);
                    }
                    continue;
                }
                _ => {}
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if !node.tracked {
                continue;
            }
            self.propagate(idx, &dy, &mut grads);
        }
        out
    }

    #[inline]
    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn propagate(&self, idx: usize, dy: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let y = self.value(NodeId(idx));
        match &self.nodes[idx].op {
            Op::Input | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    let da = dy.matmul_t(self.value(*b));
                    acc(grads, *a, da);
                }
                if self.tracked(*b) {
                    let db = self.value(*a).t_matmul(dy);
                    acc(grads, *b, db);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ ⇒ da = dy b, db = dyᵀ a
                if self.tracked(*a) {
                    let da = dy.matmul(self.value(*b));
                    acc(grads, *a, da);
                }
                if self.tracked(*b) {
                    let db = dy.t_matmul(self.value(*a));
                    acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                acc(grads, *a, dy.clone());
                acc(grads, *b, dy.clone());
            }
            Op::AddRow(a, row) => {
                acc(grads, *a, dy.clone());
                let mut dr = Matrix::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (o, &g) in dr.data_mut().iter_mut().zip(dy.row(r)) {
                        *o = *o + g;
                    }
                }
                acc(grads, *row, dr);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = zip_map(dy, vb, |g, x| g * x);
                let db = zip_map(dy, va, |g, x| g * x);
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Scale(a, f) => {
                let f = *f;
                acc(grads, *a, dy.map(|g| g * f));
            }
            Op::ScaleBy(a, s) => {
                let f = self.value(*s).item();
                let va = self.value(*a);
                let ds = dot(dy.data(), va.data());
                acc(grads, *a, dy.map(|g| g * f));
                acc(grads, *s, Matrix::scalar(ds));
            }
            Op::Tanh(a) => {
                let d = zip_map(dy, y, |g, t| g * (T::one() - t * t));
                acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = zip_map(dy, self.value(*a), |g, x| g * gelu_grad(x));
                acc(grads, *a, d);
            }
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let s = dot(yr, gr);
                    for ((o, &p), &g) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (g - s);
                    }
                }
                acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = y.cols();
                let n = T::of(cols as f64);
                let g = self.value(*gain).data();
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                let mut dx = Matrix::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let (gr, xh) = (dy.row(r), xhat.row(r));
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for c in 0..cols {
                        dgain.data_mut()[c] = dgain.data()[c] + gr[c] * xh[c];
                        dbias.data_mut()[c] = dbias.data()[c] + gr[c];
                        let dxh = gr[c] * g[c];
                        sum_d = sum_d + dxh;
                        sum_dx = sum_dx + dxh * xh[c];
                    }
                    let (md, mdx) = (sum_d / n, sum_dx / n);
                    for c in 0..cols {
                        let dxh = gr[c] * g[c];
                        dx.row_mut(r)[c] = rstd[r] * (dxh - md - xh[c] * mdx);
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dgain);
                acc(grads, *bias, dbias);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows();
                    acc(grads, *p, dy.slice_rows(start, rows));
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let va = self.value(*a);
                let mut d = Matrix::zeros(va.rows(), va.cols());
                let c = va.cols();
                d.data_mut()[start * c..start * c + dy.data().len()].copy_from_slice(dy.data());
                acc(grads, *a, d);
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let inv = T::one() / T::of(va.rows() as f64);
                let row = dy.map(|g| g * inv);
                let parts: Vec<&Matrix<T>> = (0..va.rows()).map(|_| &row).collect();
                acc(grads, *a, Matrix::concat_rows(&parts));
            }
            Op::RepeatRows(a) => {
                let mut d = Matrix::zeros(1, dy.cols());
                for r in 0..dy.rows() {
                    for (o, &g) in d.data_mut().iter_mut().zip(dy.row(r)) {
                        *o = *o + g;
                    }
                }
                acc(grads, *a, d);
            }
            Op::Transpose(a) => acc(grads, *a, dy.transpose()),
            Op::NormalizeRows(a, norms) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), dy.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yy), &g) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (g - yy * s) / norms[r];
                    }
                }
                acc(grads, *a, d);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Matrix::zeros(va.rows(), va.cols());
                let mut db = Matrix::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let g = dy.data()[r];
                    for (o, &x) in da.row_mut(r).iter_mut().zip(vb.row(r)) {
                        *o = g * x;
                    }
                    for (o, &x) in db.row_mut(r).iter_mut().zip(va.row(r)) {
                        *o = g * x;
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::LogSigmoid(a) => {
                let d = zip_map(dy, self.value(*a), |g, x| g * sigmoid(-x));
                acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let g = dy.item();
                acc(grads, *a, Matrix::filled(va.rows(), va.cols(), g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        let g = dy.data()[r];
                        for (o, &p) in d.row_mut(r).iter_mut().zip(probs.row(r)) {
                            *o = g * p;
                        }
                        d.row_mut(r)[*t] = d.row(r)[*t] - g;
                    }
                }
                acc(grads, *logits, d);
            }
            Op::Gather(table, ids) => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (o, &g) in d.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *o = *o + g;
                    }
                }
                acc(grads, *table, d);
            }
        }
    }
}

fn zip_map<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn acc<T: Real>(grads: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    /// Central-difference check of `f` built on a single input node.
    fn check_unary(x0: Matrix<f64>, build: impl Fn(&mut Graph<'_, f64>, NodeId) -> NodeId) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let y = build(&mut g, x);
        let loss = g.sum(y);
        let grads = g.backward(loss);
        let analytic = grads.input(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..x0.data().len() {
            let eval = |delta: f64| {
                let mut xm = x0.clone();
                xm.data_mut()[i] += delta;
                let mut g = Graph::new(&store);
                let x = g.input(xm);
                let y = build(&mut g, x);
                let l = g.sum(y);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample() -> Matrix<f64> {
        Matrix::from_rows(&[&[0.3, -1.2, 0.7], &[1.5, 0.1, -0.4]])
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check_unary(sample(), |g, x| g.tanh(x));
        check_unary(sample(), |g, x| g.gelu(x));
        check_unary(sample(), |g, x| g.log_sigmoid(x));
        check_unary(sample(), |g, x| {
            let w = g.constant(Matrix::from_rows(&[&[0.2, 1.0, -0.5], &[0.9, 0.3, 0.4]]));
            g.mul(x, w)
        });
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let w = Matrix::from_rows(&[&[0.2, 1.0, -0.5], &[0.9, 0.3, 0.4]]);
        check_unary(sample(), |g, x| {
            let s = g.softmax_rows(x);
            let c = g.constant(w.clone());
            g.mul(s, c)
        });
        check_unary(sample(), |g, x| {
            let s = g.softmax_rows_masked(x, alloc::vec![false, true, false, false, false, true]);
            let c = g.constant(w.clone());
            g.mul(s, c)
        });
        check_unary(sample(), |g, x| {
            let s = g.normalize_rows(x);
            let c = g.constant(w.clone());
            g.mul(s, c)
        });
        check_unary(sample(), |g, x| {
            let gain = g.constant(Matrix::row_vector(alloc::vec![1.3, -0.7, 0.5]));
            let bias = g.constant(Matrix::row_vector(alloc::vec![0.1, 0.2, 0.3]));
            let y = g.layer_norm(x, gain, bias, 1e-5);
            let c = g.constant(w.clone());
            g.mul(y, c)
        });
        check_unary(sample(), |g, x| g.cross_entropy_rows(x, alloc::vec![Some(2), None]));
        check_unary(sample(), |g, x| {
            let c = g.constant(w.clone());
            g.row_dot(x, c)
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let w = Matrix::from_rows(&[&[0.2, 1.0], &[0.9, 0.3], &[-0.4, 0.6]]);
        check_unary(sample(), |g, x| {
            let c = g.constant(w.clone());
            let y = g.matmul(x, c);
            g.tanh(y)
        });
        check_unary(sample(), |g, x| {
            let c = g.constant(w.transpose());
            let y = g.matmul_t(x, c);
            g.tanh(y)
        });
        check_unary(sample(), |g, x| {
            let t = g.transpose(x);
            let top = g.slice_rows(t, 1, 2);
            let tt = g.transpose(top);
            let tt = g.tanh(tt);
            let m = g.mean_rows(x);
            let r = g.repeat_rows(m, 2);
            let both = g.concat_rows(&[x, r]);
            let both = g.tanh(both);
            let (s1, s2) = (g.sum(tt), g.sum(both));
            g.add(s1, s2)
        });
        check_unary(sample(), |g, x| {
            let e = g.gather_rows(x, &[1, 0, 1]);
            g.tanh(e)
        });
        check_unary(sample(), |g, x| {
            let s = g.slice_rows(x, 0, 1);
            let s = g.sum(s);
            let y = g.scale_by(x, s);
            let row = g.slice_rows(x, 1, 1);
            let y = g.add_row(y, row);
            g.tanh(y)
        });
    }

    #[test]
    fn stable_log_sigmoid_matches_naive_form() {
        for &x in &[-30.0f64, -2.0, 0.0, 1.5, 40.0] {
            let naive = -(1.0 + (-x).exp()).ln();
            assert!((log_sigmoid(x) - naive).abs() < 1e-12);
        }
        let vals: Vec<f64> = [-800.0f64, 800.0].iter().map(|&x| log_sigmoid(x)).collect();
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn param_leaf_is_shared_and_gradient_accumulates() {
        let mut store = ParamStore::new();
        let p = store.add("w", Matrix::row_vector(alloc::vec![2.0f64, 3.0]), true);
        let mut g = Graph::new(&store);
        let a = g.param(p);
        let b = g.param(p);
        assert_eq!(a, b);
        let y = g.mul(a, b);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert_eq!(grads.param(p).unwrap().data(), &[4.0, 6.0]);
    }
}
