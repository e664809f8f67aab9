//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every forward operation in execution order, so each
//! node's inputs always precede it. [`Tape::backward`] walks the record in
//! reverse once and returns the gradient of a scalar root with respect to
//! every tracked leaf.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn};
use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-sparse binary input matrix: row `r` has ones at `rows[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRows {
    pub width: usize,
    pub rows: Vec<Vec<u32>>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Sum(usize),
    Mean(usize),
    SqDist(usize, usize),
    Concat(usize, usize),
    RowMin(usize, Vec<usize>),
    ClampMax(usize, f64),
    Pick(usize, Arc<Vec<usize>>),
    SparseMatMul(Arc<SparseRows>, usize),
    GatherRows(usize, Arc<Vec<usize>>),
    SegmentSoftmax(usize, Arc<Vec<Range<usize>>>),
    SegmentWeightedSum(usize, usize, Arc<Vec<Range<usize>>>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    tracked: bool,
}

/// Gradients of a scalar root, keyed by leaf handle.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    /// Takes the gradient for `var`, or zeros of `shape` when the root does
    /// not depend on it.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor {
        self.grads.remove(&var).unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_finite(op: &'static str, t: &Tensor) {
    debug_assert!(t.is_finite(), "non-finite output from {op}: {t:?}");
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

    /// Records a tracked leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Records an untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].tracked)
    }

    fn unary(&mut self, op: Op, x: usize, value: Tensor, name: &'static str) -> Var {
        check_finite(name, &value);
        let tracked = self.nodes[x].tracked;
        self.push(op, value, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(mismatch("matmul", av, bv));
        }
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        let out = Tensor::matrix(n, m, matmul_raw(av.data(), bv.data(), n, k, m))?;
        check_finite("matmul", &out);
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(Op::MatMul(a.0, b.0), out, tracked))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        check_finite(name, &out);
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(op, out, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Broadcast-add of a single row (`1 x c` or `[c]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(mismatch("broadcast-add", av, rv));
        }
        let c = av.cols();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        check_finite("broadcast-add", &out);
        let tracked = self.tracked(&[a.0, row.0]);
        Ok(self.push(Op::AddRow(a.0, row.0), out, tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|v| v * factor);
        self.unary(Op::Scale(a.0, factor), a.0, out, "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.unary(Op::Tanh(a.0), a.0, out, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.unary(Op::Relu(a.0), a.0, out, "relu")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.unary(Op::Exp(a.0), a.0, out, "exp")
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.unary(Op::Log(a.0), a.0, out, "log")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.unary(Op::Softmax(a.0), a.0, out, "softmax")
    }

    /// Numerically stable `log(softmax(a))` along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.unary(Op::LogSoftmax(a.0), a.0, out, "log_softmax")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary(Op::Sum(a.0), a.0, out, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.sum() / av.len().max(1) as f64);
        self.unary(Op::Mean(a.0), a.0, out, "mean")
    }

    /// Pairwise squared Euclidean distances between the rows of `a`
    /// (`n x d`) and `b` (`m x d`), giving `n x m`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("squared-distance", av, bv));
        }
        let (n, m) = (av.rows(), bv.rows());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let x = av.row(i);
            for j in 0..m {
                data.push(x.iter().zip(bv.row(j)).map(|(p, q)| (p - q) * (p - q)).sum());
            }
        }
        let out = Tensor::matrix(n, m, data)?;
        check_finite("squared-distance", &out);
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(Op::SqDist(a.0, b.0), out, tracked))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(mismatch("concat", av, bv));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(n, ca + cb, data)?;
        let tracked = self.tracked(&[a.0, b.0]);
        Ok(self.push(Op::Concat(a.0, b.0), out, tracked))
    }

    /// Minimum of each row, giving an `n x 1` column. Ties resolve to the
    /// lowest column.
    pub fn row_min(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, c) = (av.rows(), av.cols());
        let mut arg = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for r in 0..n {
            let row = av.row(r);
            let (mut best, mut best_v) = (0, row[0]);
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v < best_v {
                    best = j;
                    best_v = v;
                }
            }
            debug_assert!(c > 0);
            arg.push(best);
            data.push(best_v);
        }
        let out = Tensor::matrix(n, 1, data).expect("column");
        self.unary(Op::RowMin(a.0, arg), a.0, out, "row_min")
    }

    /// Elementwise `min(a, cap)`.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        let out = self.value(a).map(|v| v.min(cap));
        self.unary(Op::ClampMax(a.0, cap), a.0, out, "clamp_max")
    }

    /// Selects column `index[r]` of each row `r`, giving an `n x 1` column.
    pub fn pick(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if index.len() != av.rows() || index.iter().any(|&i| i >= av.cols()) {
            return Err(NumericsError::ShapeMismatch {
                op: "pick",
                left: av.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let data = index.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let out = Tensor::matrix(index.len(), 1, data)?;
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(Op::Pick(a.0, index), out, tracked))
    }

    /// Product of a constant row-sparse binary matrix with `w`.
    pub fn sparse_matmul(&mut self, x: Arc<SparseRows>, w: Var) -> Result<Var, NumericsError> {
        let wv = self.value(w);
        if wv.rows() != x.width || x.rows.iter().flatten().any(|&i| i as usize >= x.width) {
            return Err(NumericsError::ShapeMismatch {
                op: "sparse_matmul",
                left: vec![x.rows.len(), x.width],
                right: wv.shape().to_vec(),
            });
        }
        let m = wv.cols();
        let mut data = vec![0.0; x.rows.len() * m];
        for (r, idx) in x.rows.iter().enumerate() {
            let out = &mut data[r * m..(r + 1) * m];
            for &i in idx {
                for (o, v) in out.iter_mut().zip(wv.row(i as usize)) {
                    *o += v;
                }
            }
        }
        let out = Tensor::matrix(x.rows.len(), m, data)?;
        let tracked = self.nodes[w.0].tracked;
        Ok(self.push(Op::SparseMatMul(x, w.0), out, tracked))
    }

    /// Row `t` of the output is row `index[t]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if index.iter().any(|&i| i >= av.rows()) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_rows",
                left: av.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        let c = av.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(av.row(i));
        }
        let out = Tensor::matrix(index.len(), c, data)?;
        let tracked = self.nodes[a.0].tracked;
        Ok(self.push(Op::GatherRows(a.0, index), out, tracked))
    }

    /// Softmax of a column vector computed independently within each
    /// contiguous segment of rows.
    pub fn segment_softmax(&mut self, scores: Var, segments: Arc<Vec<Range<usize>>>) -> Result<Var, NumericsError> {
        let sv = self.value(scores);
        check_segments("segment_softmax", sv, &segments)?;
        let mut data = sv.data().to_vec();
        for seg in segments.iter() {
            let part = &mut data[seg.clone()];
            let lse = logsumexp(part);
            part.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let out = Tensor::new(sv.shape().to_vec(), data)?;
        Ok(self.unary(Op::SegmentSoftmax(scores.0, segments), scores.0, out, "segment_softmax"))
    }

    /// `out[b] = Σ_{t ∈ segment b} weights[t] * values[t]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        segments: Arc<Vec<Range<usize>>>,
    ) -> Result<Var, NumericsError> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.rows() != vv.rows() || wv.cols() != 1 {
            return Err(mismatch("segment_weighted_sum", wv, vv));
        }
        check_segments("segment_weighted_sum", vv, &segments)?;
        let d = vv.cols();
        let mut data = vec![0.0; segments.len() * d];
        for (b, seg) in segments.iter().enumerate() {
            let out = &mut data[b * d..(b + 1) * d];
            for t in seg.clone() {
                let w = wv.data()[t];
                for (o, v) in out.iter_mut().zip(vv.row(t)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::matrix(segments.len(), d, data)?;
        check_finite("segment_weighted_sum", &out);
        let tracked = self.tracked(&[weights.0, values.0]);
        Ok(self.push(Op::SegmentWeightedSum(weights.0, values.0, segments), out, tracked))
    }

    /// Reverse pass from a scalar `root`, consuming the tape.
    pub fn backward(self, root: Var) -> Result<Gradients, NumericsError> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(NumericsError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let nodes = self.nodes;
        let mut adj: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.0].tracked {
            adj[root.0] = Some(Tensor::full(nodes[root.0].value.shape(), 1.0));
        }

        let mut grads = Gradients::default();
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads.grads.insert(Var(idx), g);
                }
                Op::Constant => {}
                op => backprop(op, node, &g, &nodes, &mut adj),
            }
        }
        Ok(grads)
    }
}

fn check_segments(op: &'static str, t: &Tensor, segments: &[Range<usize>]) -> Result<(), NumericsError> {
    let mut next = 0;
    for seg in segments {
        if seg.start != next || seg.end <= seg.start {
            return Err(NumericsError::Segments { op });
        }
        next = seg.end;
    }
    if next != t.rows() {
        return Err(NumericsError::Segments { op });
    }
    Ok(())
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut data = t.data().to_vec();
    for row in data.chunks_mut(c.max(1)) {
        let lse = logsumexp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn accumulate(adj: &mut [Option<Tensor>], nodes: &[Node], idx: usize, g: Tensor) {
    if !nodes[idx].tracked {
        return;
    }
    match &mut adj[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            // Reshape so the gradient always mirrors its node's shape.
            let shape = nodes[idx].value.shape().to_vec();
            *slot = Some(Tensor::new(shape, g.into_data()).expect("gradient shape"));
        }
    }
}

fn backprop(op: &Op, node: &Node, g: &Tensor, nodes: &[Node], adj: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let like = |i: usize, data: Vec<f64>| Tensor::new(nodes[i].value.shape().to_vec(), data).expect("shape");
    match *op {
        Op::Leaf | Op::Constant => unreachable!(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (n, k, m) = (av.rows(), av.cols(), bv.cols());
            if nodes[a].tracked {
                accumulate(adj, nodes, a, like(a, matmul_nt(g.data(), bv.data(), n, m, k)));
            }
            if nodes[b].tracked {
                accumulate(adj, nodes, b, like(b, matmul_tn(av.data(), g.data(), n, k, m)));
            }
        }
        Op::Add(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(adj, nodes, a, g.clone());
            accumulate(adj, nodes, b, g.map(|v| -v));
        }
        Op::AddRow(a, row) => {
            accumulate(adj, nodes, a, g.clone());
            if nodes[row].tracked {
                let c = g.cols();
                let mut sums = vec![0.0; c];
                for r in 0..g.rows() {
                    for (s, v) in sums.iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                accumulate(adj, nodes, row, like(row, sums));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            if nodes[a].tracked {
                let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                accumulate(adj, nodes, a, like(a, d));
            }
            if nodes[b].tracked {
                let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                accumulate(adj, nodes, b, like(b, d));
            }
        }
        Op::Scale(a, f) => accumulate(adj, nodes, a, g.map(|v| v * f)),
        Op::Tanh(a) => {
            let d = g
                .data()
                .iter()
                .zip(node.value.data())
                .map(|(x, y)| x * (1.0 - y * y))
                .collect();
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::Relu(a) => {
            let d = g
                .data()
                .iter()
                .zip(val(a).data())
                .map(|(x, &y)| if y > 0.0 { *x } else { 0.0 })
                .collect();
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::Exp(a) => {
            let d = g.data().iter().zip(node.value.data()).map(|(x, y)| x * y).collect();
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::Log(a) => {
            let d = g.data().iter().zip(val(a).data()).map(|(x, y)| x / y).collect();
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::Softmax(a) => {
            let c = node.value.cols();
            let mut d = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(c).zip(node.value.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                d.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
            }
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::LogSoftmax(a) => {
            let c = node.value.cols();
            let mut d = Vec::with_capacity(g.len());
            for (gr, yr) in g.data().chunks(c).zip(node.value.data().chunks(c)) {
                let total: f64 = gr.iter().sum();
                d.extend(gr.iter().zip(yr).map(|(x, y)| x - y.exp() * total));
            }
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::Sum(a) => {
            let n = val(a).len();
            accumulate(adj, nodes, a, like(a, vec![g.item(); n]));
        }
        Op::Mean(a) => {
            let n = val(a).len();
            accumulate(adj, nodes, a, like(a, vec![g.item() / n as f64; n]));
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (n, m, d) = (av.rows(), bv.rows(), av.cols());
            let mut da = vec![0.0; n * d];
            let mut db = vec![0.0; m * d];
            for i in 0..n {
                for j in 0..m {
                    let gij = 2.0 * g.get(i, j);
                    if gij == 0.0 {
                        continue;
                    }
                    for k in 0..d {
                        let diff = gij * (av.get(i, k) - bv.get(j, k));
                        da[i * d + k] += diff;
                        db[j * d + k] -= diff;
                    }
                }
            }
            accumulate(adj, nodes, a, like(a, da));
            accumulate(adj, nodes, b, like(b, db));
        }
        Op::Concat(a, b) => {
            let (ca, cb) = (val(a).cols(), val(b).cols());
            let mut da = Vec::with_capacity(val(a).len());
            let mut db = Vec::with_capacity(val(b).len());
            for r in 0..g.rows() {
                let row = g.row(r);
                da.extend_from_slice(&row[..ca]);
                db.extend_from_slice(&row[ca..ca + cb]);
            }
            accumulate(adj, nodes, a, like(a, da));
            accumulate(adj, nodes, b, like(b, db));
        }
        Op::RowMin(a, ref arg) => {
            let c = val(a).cols();
            let mut d = vec![0.0; val(a).len()];
            for (r, &j) in arg.iter().enumerate() {
                d[r * c + j] = g.data()[r];
            }
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::ClampMax(a, cap) => {
            let d = g
                .data()
                .iter()
                .zip(val(a).data())
                .map(|(x, &y)| if y < cap { *x } else { 0.0 })
                .collect();
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::Pick(a, ref index) => {
            let c = val(a).cols();
            let mut d = vec![0.0; val(a).len()];
            for (r, &j) in index.iter().enumerate() {
                d[r * c + j] = g.data()[r];
            }
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::SparseMatMul(ref x, w) => {
            let m = val(w).cols();
            let mut d = vec![0.0; val(w).len()];
            for (r, idx) in x.rows.iter().enumerate() {
                let gr = g.row(r);
                for &i in idx {
                    let i = i as usize;
                    for (o, v) in d[i * m..(i + 1) * m].iter_mut().zip(gr) {
                        *o += v;
                    }
                }
            }
            accumulate(adj, nodes, w, like(w, d));
        }
        Op::GatherRows(a, ref index) => {
            let c = val(a).cols();
            let mut d = vec![0.0; val(a).len()];
            for (t, &i) in index.iter().enumerate() {
                for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(t)) {
                    *o += v;
                }
            }
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::SegmentSoftmax(a, ref segments) => {
            let y = node.value.data();
            let mut d = vec![0.0; y.len()];
            for seg in segments.iter() {
                let dot: f64 = seg.clone().map(|t| g.data()[t] * y[t]).sum();
                for t in seg.clone() {
                    d[t] = y[t] * (g.data()[t] - dot);
                }
            }
            accumulate(adj, nodes, a, like(a, d));
        }
        Op::SegmentWeightedSum(w, v, ref segments) => {
            let (wv, vv) = (val(w), val(v));
            let dcols = vv.cols();
            let mut dw = vec![0.0; wv.len()];
            let mut dv = vec![0.0; vv.len()];
            for (b, seg) in segments.iter().enumerate() {
                let gb = g.row(b);
                for t in seg.clone() {
                    let vt = vv.row(t);
                    dw[t] = gb.iter().zip(vt).map(|(x, y)| x * y).sum();
                    let wt = wv.data()[t];
                    for (o, x) in dv[t * dcols..(t + 1) * dcols].iter_mut().zip(gb) {
                        *o += wt * x;
                    }
                }
            }
            accumulate(adj, nodes, w, like(w, dw));
            accumulate(adj, nodes, v, like(v, dv));
        }
    }
}
