//! Reverse-mode tape. Every op records its inputs; `backward` walks the tape
//! once in reverse and returns the gradient of a scalar output with respect to
//! every node.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Abs(Var),
    Sin(Var),
    Cos(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    Gather { x: Var, idx: Vec<usize> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Transpose(Var),
    Reshape(Var),
    HeadDot { a: Var, b: Var, heads: usize },
    HeadExpand { x: Var, width: usize },
    SegmentSoftmax { x: Var, seg: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Softplus(_) => "softplus",
            Op::Abs(_) => "abs",
            Op::Sin(_) => "sin",
            Op::Cos(_) => "cos",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::LayerNormRows { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::Gather { .. } => "gather",
            Op::ScatterAdd { .. } => "scatter_add",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::HeadDot { .. } => "head_dot",
            Op::HeadExpand { .. } => "head_expand",
            Op::SegmentSoftmax { .. } => "segment_softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast(a: [usize; 2], b: [usize; 2]) -> Option<Bcast> {
    if a == b {
        Some(Bcast::Same)
    } else if b == [1, 1] {
        Some(Bcast::Scalar)
    } else if b[0] == 1 && b[1] == a[1] {
        Some(Bcast::Row)
    } else if b[1] == 1 && b[0] == a[0] {
        Some(Bcast::Col)
    } else {
        None
    }
}

fn bidx(kind: Bcast, cols: usize, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    detached: Vec<usize>,
    frozen: Option<Vec<Tensor>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

type R = Result<Var, NnError>;

fn shape_err(op: &str, detail: String) -> NnError {
    NnError::Shape { node: op.into(), detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Graph whose `k`-th [`Graph::detach`] returns `frozen[k]` instead of
    /// the current value, so a detached subexpression stays constant under
    /// perturbation (see [`Graph::detached_values`]).
    pub fn with_frozen(frozen: Vec<Tensor>) -> Self {
        Self {
            frozen: Some(frozen),
            ..Self::default()
        }
    }

    /// Values produced by every `detach` so far, in call order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.iter().map(|&i| self.nodes[i].value.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape
    }

    /// Constant input; gradients are still reported for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Copy of `x` that blocks gradients.
    pub fn detach(&mut self, x: Var) -> Var {
        let k = self.detached.len();
        let t = match &self.frozen {
            Some(f) if k < f.len() && f[k].shape == self.shape(x) => f[k].clone(),
            _ => self.value(x).clone(),
        };
        let v = self.push(t, Op::Leaf);
        self.detached.push(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> R {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NnError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let kind = bcast(sa, sb).ok_or_else(|| shape_err(name, format!("{sa:?} with {sb:?}")))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, vb.data[bidx(kind, sa[1], i)]))
            .collect();
        Ok(Tensor { shape: sa, data })
    }

    /// `a + b`; `b` may broadcast as a row, a column or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> R {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b)))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let v = Tensor {
            shape: t.shape,
            data: t.data.iter().map(|v| f(*v)).collect(),
        };
        self.push(v, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), |v| v.max(0.0) + (-v.abs()).exp().ln_1p())
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Op::Cos(x), f64::cos)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor { shape: t.shape, data };
        self.push(v, Op::SoftmaxRows(x))
    }

    /// `[r, c] → [r, 1]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let data = t
            .data
            .chunks(c.max(1))
            .map(|row| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let v = Tensor { shape: [t.rows(), 1], data };
        self.push(v, Op::LogSumExpRows(x))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data.clone();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in data.chunks_mut(c.max(1)) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor { shape: t.shape, data };
        self.push(v, Op::LayerNormRows { x, inv_std })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> R {
        let rows = self.shape(xs[0])[0];
        if xs.iter().any(|v| self.shape(*v)[0] != rows) {
            return Err(shape_err("concat_cols", "row counts differ".into()));
        }
        let cols: usize = xs.iter().map(|v| self.shape(*v)[1]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in xs {
                data.extend_from_slice(self.value(*v).row(r));
            }
        }
        Ok(self.push(Tensor { shape: [rows, cols], data }, Op::ConcatCols(xs.to_vec())))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> R {
        let cols = self.shape(xs[0])[1];
        if xs.iter().any(|v| self.shape(*v)[1] != cols) {
            return Err(shape_err("concat_rows", "column counts differ".into()));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for v in xs {
            data.extend_from_slice(&self.value(*v).data);
            rows += self.shape(*v)[0];
        }
        Ok(self.push(Tensor { shape: [rows, cols], data }, Op::ConcatRows(xs.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> R {
        let s = self.shape(x);
        if start + len > s[1] {
            return Err(shape_err("slice_cols", format!("{start}+{len} of {s:?}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(s[0] * len);
        for r in 0..s[0] {
            data.extend_from_slice(&t.row(r)[start..start + len]);
        }
        Ok(self.push(Tensor { shape: [s[0], len], data }, Op::SliceCols { x, start }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> R {
        let s = self.shape(x);
        if start + len > s[0] {
            return Err(shape_err("slice_rows", format!("{start}+{len} of {s:?}")));
        }
        let data = self.value(x).data[start * s[1]..(start + len) * s[1]].to_vec();
        Ok(self.push(Tensor { shape: [len, s[1]], data }, Op::SliceRows { x, start }))
    }

    pub fn gather(&mut self, x: Var, idx: &[usize]) -> R {
        let s = self.shape(x);
        if let Some(bad) = idx.iter().find(|i| **i >= s[0]) {
            return Err(shape_err("gather", format!("row {bad} of {s:?}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * s[1]);
        for i in idx {
            data.extend_from_slice(t.row(*i));
        }
        Ok(self.push(
            Tensor {
                shape: [idx.len(), s[1]],
                data,
            },
            Op::Gather { x, idx: idx.to_vec() },
        ))
    }

    /// Row `i` of `x` is added into output row `idx[i]` of an `[n, c]` result.
    pub fn scatter_add(&mut self, x: Var, idx: &[usize], n: usize) -> R {
        let s = self.shape(x);
        if idx.len() != s[0] || idx.iter().any(|i| *i >= n) {
            return Err(shape_err("scatter_add", format!("{} indices for {s:?} into {n}", idx.len())));
        }
        let t = self.value(x);
        let mut out = Tensor::zeros(n, s[1]);
        for (r, i) in idx.iter().enumerate() {
            let src = t.row(r);
            for (o, v) in out.data[i * s[1]..(i + 1) * s[1]].iter_mut().zip(src) {
                *o += v;
            }
        }
        Ok(self.push(out, Op::ScatterAdd { x, idx: idx.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data.iter().sum::<f64>() / t.len().max(1) as f64;
        self.push(Tensor::scalar(v), Op::Mean(x))
    }

    /// `[r, c] → [r, 1]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols().max(1);
        let data = t.data.chunks(c).map(|r| r.iter().sum()).collect();
        let v = Tensor { shape: [t.rows(), 1], data };
        self.push(v, Op::RowSum(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).transpose();
        self.push(v, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> R {
        let t = self.value(x);
        if t.len() != rows * cols {
            return Err(shape_err("reshape", format!("{:?} to [{rows}, {cols}]", t.shape)));
        }
        let v = Tensor {
            shape: [rows, cols],
            data: t.data.clone(),
        };
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Per-row, per-head dot products: `[E, D] · [E, D] → [E, heads]`.
    pub fn head_dot(&mut self, a: Var, b: Var, heads: usize) -> R {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || heads == 0 || sa[1] % heads != 0 {
            return Err(shape_err("head_dot", format!("{sa:?}, {sb:?}, {heads} heads")));
        }
        let w = sa[1] / heads;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(sa[0], heads);
        for e in 0..sa[0] {
            let (ra, rb) = (ta.row(e), tb.row(e));
            for h in 0..heads {
                out.data[e * heads + h] = (h * w..(h + 1) * w).map(|j| ra[j] * rb[j]).sum();
            }
        }
        Ok(self.push(out, Op::HeadDot { a, b, heads }))
    }

    /// Repeats each column `width` times: `[E, H] → [E, H·width]`.
    pub fn head_expand(&mut self, x: Var, width: usize) -> Var {
        let t = self.value(x);
        let (e, h) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(e * h * width);
        for r in 0..e {
            for v in t.row(r) {
                data.extend(std::iter::repeat_n(*v, width));
            }
        }
        self.push(Tensor { shape: [e, h * width], data }, Op::HeadExpand { x, width })
    }

    /// Column-wise softmax over the rows sharing a segment id.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n_seg: usize) -> R {
        let s = self.shape(x);
        if seg.len() != s[0] || seg.iter().any(|g| *g >= n_seg) {
            return Err(shape_err("segment_softmax", format!("{} segment ids for {s:?}", seg.len())));
        }
        let t = self.value(x);
        let c = s[1];
        let mut max = vec![f64::NEG_INFINITY; n_seg * c];
        for (r, g) in seg.iter().enumerate() {
            for j in 0..c {
                max[g * c + j] = max[g * c + j].max(t.data[r * c + j]);
            }
        }
        let mut data = vec![0.0; s[0] * c];
        let mut z = vec![0.0; n_seg * c];
        for (r, g) in seg.iter().enumerate() {
            for j in 0..c {
                let e = (t.data[r * c + j] - max[g * c + j]).exp();
                data[r * c + j] = e;
                z[g * c + j] += e;
            }
        }
        for (r, g) in seg.iter().enumerate() {
            for j in 0..c {
                data[r * c + j] /= z[g * c + j];
            }
        }
        Ok(self.push(Tensor { shape: s, data }, Op::SegmentSoftmax { x, seg: seg.to_vec() }))
    }

    pub fn backward(&self, out: Var) -> Result<Gradients, NnError> {
        if self.shape(out) != [1, 1] {
            return Err(shape_err("backward", format!("output shape {:?} is not scalar", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter gradients from `grads` into `store`.
    pub fn accumulate(&self, grads: &Gradients, store: &mut ParamStore) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.grad_mut(*id).add_assign(g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let map = |x: Var, f: &dyn Fn(usize) -> f64| Tensor {
            shape: self.shape(x),
            data: (0..g.len()).map(|k| g.data[k] * f(k)).collect(),
        };
        let reduce = |kind: Bcast, shape: [usize; 2], vals: &dyn Fn(usize) -> f64| {
            let mut t = Tensor::zeros(shape[0], shape[1]);
            for k in 0..g.len() {
                t.data[bidx(kind, g.cols(), k)] += vals(k);
            }
            t
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b)));
                acc(*b, self.value(*a).t_matmul(g));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let kind = bcast(self.shape(*a), self.shape(*b)).unwrap();
                acc(*a, g.clone());
                acc(*b, reduce(kind, self.shape(*b), &|k| sign * g.data[k]));
            }
            Op::Mul(a, b) => {
                let kind = bcast(self.shape(*a), self.shape(*b)).unwrap();
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = g.cols();
                acc(*a, map(*a, &|k| vb.data[bidx(kind, c, k)]));
                acc(*b, reduce(kind, vb.shape, &|k| g.data[k] * va.data[k]));
            }
            Op::Div(a, b) => {
                let kind = bcast(self.shape(*a), self.shape(*b)).unwrap();
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = g.cols();
                acc(*a, map(*a, &|k| 1.0 / vb.data[bidx(kind, c, k)]));
                acc(
                    *b,
                    reduce(kind, vb.shape, &|k| {
                        let d = vb.data[bidx(kind, c, k)];
                        -g.data[k] * va.data[k] / (d * d)
                    }),
                );
            }
            Op::Scale(x, c) => acc(*x, map(*x, &|_| *c)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Relu(x) => {
                let v = self.value(*x);
                acc(*x, map(*x, &|k| if v.data[k] > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Tanh(x) => acc(*x, map(*x, &|k| 1.0 - y.data[k] * y.data[k])),
            Op::Sigmoid(x) => acc(*x, map(*x, &|k| y.data[k] * (1.0 - y.data[k]))),
            Op::Exp(x) => acc(*x, map(*x, &|k| y.data[k])),
            Op::Log(x) => {
                let v = self.value(*x);
                acc(*x, map(*x, &|k| 1.0 / v.data[k]));
            }
            Op::Softplus(x) => {
                let v = self.value(*x);
                acc(*x, map(*x, &|k| 1.0 / (1.0 + (-v.data[k]).exp())));
            }
            Op::Abs(x) => {
                let v = self.value(*x);
                acc(*x, map(*x, &|k| if v.data[k] > 0.0 { 1.0 } else if v.data[k] < 0.0 { -1.0 } else { 0.0 }));
            }
            Op::Sin(x) => {
                let v = self.value(*x);
                acc(*x, map(*x, &|k| v.data[k].cos()));
            }
            Op::Cos(x) => {
                let v = self.value(*x);
                acc(*x, map(*x, &|k| -v.data[k].sin()));
            }
            Op::SoftmaxRows(x) => {
                let c = y.cols();
                let mut t = Tensor::zeros(y.rows(), c);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        t.data[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, t);
            }
            Op::LogSumExpRows(x) => {
                let v = self.value(*x);
                let c = v.cols();
                let mut t = Tensor::zeros(v.rows(), c);
                for r in 0..v.rows() {
                    for j in 0..c {
                        t.data[r * c + j] = g.data[r] * (v.data[r * c + j] - y.data[r]).exp();
                    }
                }
                acc(*x, t);
            }
            Op::LayerNormRows { x, inv_std } => {
                let c = y.cols();
                let n = c as f64;
                let mut t = Tensor::zeros(y.rows(), c);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = yr.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        t.data[r * c + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(*x, t);
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for v in xs {
                    let s = self.shape(*v);
                    let mut t = Tensor::zeros(s[0], s[1]);
                    for r in 0..s[0] {
                        t.data[r * s[1]..(r + 1) * s[1]].copy_from_slice(&g.row(r)[off..off + s[1]]);
                    }
                    off += s[1];
                    acc(*v, t);
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for v in xs {
                    let s = self.shape(*v);
                    let n = s[0] * s[1];
                    acc(
                        *v,
                        Tensor {
                            shape: s,
                            data: g.data[off..off + n].to_vec(),
                        },
                    );
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let w = g.cols();
                let mut t = Tensor::zeros(s[0], s[1]);
                for r in 0..s[0] {
                    t.data[r * s[1] + start..r * s[1] + start + w].copy_from_slice(g.row(r));
                }
                acc(*x, t);
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let mut t = Tensor::zeros(s[0], s[1]);
                t.data[start * s[1]..start * s[1] + g.len()].copy_from_slice(&g.data);
                acc(*x, t);
            }
            Op::Gather { x, idx } => {
                let s = self.shape(*x);
                let mut t = Tensor::zeros(s[0], s[1]);
                for (r, i) in idx.iter().enumerate() {
                    for j in 0..s[1] {
                        t.data[i * s[1] + j] += g.data[r * s[1] + j];
                    }
                }
                acc(*x, t);
            }
            Op::ScatterAdd { x, idx } => {
                let s = self.shape(*x);
                let mut data = Vec::with_capacity(s[0] * s[1]);
                for i in idx {
                    data.extend_from_slice(g.row(*i));
                }
                acc(*x, Tensor { shape: s, data });
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                acc(*x, Tensor::filled(s[0], s[1], g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                acc(*x, Tensor::filled(s[0], s[1], g.item() / (s[0] * s[1]).max(1) as f64));
            }
            Op::RowSum(x) => {
                let s = self.shape(*x);
                let data = (0..s[0] * s[1]).map(|k| g.data[k / s[1]]).collect();
                acc(*x, Tensor { shape: s, data });
            }
            Op::Transpose(x) => acc(*x, g.transpose()),
            Op::Reshape(x) => acc(
                *x,
                Tensor {
                    shape: self.shape(*x),
                    data: g.data.clone(),
                },
            ),
            Op::HeadDot { a, b, heads } => {
                let s = self.shape(*a);
                let w = s[1] / heads;
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = Tensor::zeros(s[0], s[1]);
                let mut gb = Tensor::zeros(s[0], s[1]);
                for e in 0..s[0] {
                    for j in 0..s[1] {
                        let gh = g.data[e * heads + j / w];
                        ga.data[e * s[1] + j] = gh * vb.data[e * s[1] + j];
                        gb.data[e * s[1] + j] = gh * va.data[e * s[1] + j];
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::HeadExpand { x, width } => {
                let s = self.shape(*x);
                let mut t = Tensor::zeros(s[0], s[1]);
                for e in 0..s[0] {
                    for h in 0..s[1] {
                        t.data[e * s[1] + h] = g.row(e)[h * width..(h + 1) * width].iter().sum();
                    }
                }
                acc(*x, t);
            }
            Op::SegmentSoftmax { x, seg } => {
                let c = y.cols();
                let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg * c];
                for (r, s) in seg.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += y.data[r * c + j] * g.data[r * c + j];
                    }
                }
                let mut t = Tensor::zeros(y.rows(), c);
                for (r, s) in seg.iter().enumerate() {
                    for j in 0..c {
                        t.data[r * c + j] = y.data[r * c + j] * (g.data[r * c + j] - dot[s * c + j]);
                    }
                }
                acc(*x, t);
            }
        }
    }

    /// Name of the op that produced `v` (for diagnostics).
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::row_vector(vec![1.0, 2.0]));
        let xt = g.transpose(x);
        let y = g.matmul(x, xt).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(2, 3));
        let b = g.input(Tensor::zeros(2, 3));
        match g.matmul(a, b) {
            Err(NnError::Shape { node, .. }) => assert_eq!(node, "matmul"),
            other => panic!("{other:?}"),
        }
        let c = g_zero(&mut g, 3, 2);
        assert!(g.add(a, c).is_err());
        assert!(g.backward(a).is_err());
    }

    fn g_zero(g: &mut Graph, r: usize, c: usize) -> Var {
        g.input(Tensor::zeros(r, c))
    }

    #[test]
    fn segment_softmax_groups_rows() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(3, 1, vec![0.0, 0.0, 5.0]).unwrap());
        let y = g.segment_softmax(x, &[0, 0, 1], 2).unwrap();
        assert_eq!(g.value(y).data, vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).unwrap().item(), 3.0);
    }
}
