//! Define-by-run tape. Every op appends a node holding its output value and
//! enough context to run its vector-Jacobian product; `backward` walks the
//! nodes in reverse. A node's inputs always precede it, so reverse index
//! order is a valid reverse topological order.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{
    dot, matmul_nt, matmul_raw, matmul_tn, sigmoid, Gradients, ModelParams, Tensor, NORM_FLOOR,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Arc<[usize]>),
    ScaleRows(Var, Var),
    RowSoftmax(Var),
    Cosine(Var, Var),
    SoftmaxCrossEntropy(Var, Arc<[usize]>),
    Mean(Var),
    Sum(Var),
    NeighborMean {
        h: Var,
        w: Var,
        edges: Arc<[(usize, usize)]>,
    },
    Pick(Var, Arc<[usize]>),
    ScatterCols(Var, Arc<[usize]>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    track: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(Error::Shape {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }
}

impl Tape {
    /// A tape that records parameter gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            track: true,
        }
    }

    /// A tape whose parameters are treated as constants (inference).
    pub fn no_grad() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a named parameter. Repeated binds of the same name return the
    /// same variable so gradients accumulate in one place.
    pub fn param(&mut self, params: &ModelParams, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(name.to_string()),
            requires_grad: self.track,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n));
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        require_matrix("transpose", t)?;
        let out = transpose(t);
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Elementwise `a + b`; shapes must be identical.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(shape_err(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor {
            shape: ta.shape().to_vec(),
            data,
        })
    }

    /// Adds the vector `b` (`[d]` or `[1,d]`) to every row of `x` (`[n,d]`).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        require_matrix("add_row", tx)?;
        if tb.len() != tx.cols() || tb.rows() != 1 {
            return Err(shape_err("add_row", tx, tb));
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::matrix(tx.rows(), d, data);
        Ok(self.push(out, Op::AddRow(x, b), &[x, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v * c).collect(),
        };
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(out, Op::Relu(a), &[a])
    }

    /// Elementwise logistic function; outputs lie strictly in (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        require_matrix("concat_cols", first)?;
        let rows = first.rows();
        for &p in &parts[1..] {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(shape_err("concat_cols", first, t));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        require_matrix("concat_rows", first)?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_rows", t)?;
            if t.cols() != cols {
                return Err(shape_err("concat_rows", first, t));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::matrix(rows, cols, data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        require_matrix("gather_rows", t)?;
        let d = t.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::Shape {
                    op: "gather_rows",
                    left: t.shape().to_vec(),
                    right: vec![i],
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), d, data);
        Ok(self.push(out, Op::GatherRows(x, idx.into()), &[x]))
    }

    /// Multiplies row `i` of `x` (`[n,d]`) by `s[i]` (`s` is `[n]` or `[n,1]`).
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        require_matrix("scale_rows", tx)?;
        if ts.len() != tx.rows() {
            return Err(shape_err("scale_rows", tx, ts));
        }
        let d = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(d.max(1)).enumerate() {
            let f = ts.data()[i];
            row.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::matrix(tx.rows(), d, data);
        Ok(self.push(out, Op::ScaleRows(x, s), &[x, s]))
    }

    /// Softmax over each row of a matrix.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        require_matrix("row_softmax", t)?;
        let d = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::matrix(t.rows(), d, data);
        Ok(self.push(out, Op::RowSoftmax(x), &[x]))
    }

    /// Pairwise cosine similarity between the rows of `a` (`[n,d]`) and the
    /// rows of `b` (`[m,d]`), giving `[n,m]`. Rows with zero norm give 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("cosine_similarity", ta)?;
        require_matrix("cosine_similarity", tb)?;
        if ta.cols() != tb.cols() {
            return Err(shape_err("cosine_similarity", ta, tb));
        }
        let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
        let na = row_norms(ta);
        let nb = row_norms(tb);
        let raw = matmul_nt(ta.data(), tb.data(), n, d, m);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                if na[i] >= NORM_FLOOR && nb[j] >= NORM_FLOOR {
                    data[i * m + j] = (raw[i * m + j] / (na[i] * nb[j])).clamp(-1.0, 1.0);
                }
            }
        }
        let out = Tensor::matrix(n, m, data);
        Ok(self.push(out, Op::Cosine(a, b), &[a, b]))
    }

    /// Mean over rows of `-log softmax(logits)[target]`; returns a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        require_matrix("softmax_cross_entropy", t)?;
        if targets.len() != t.rows() || t.rows() == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let c = t.cols();
        let mut total = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::Shape {
                    op: "softmax_cross_entropy",
                    left: t.shape().to_vec(),
                    right: vec![y],
                });
            }
            let row = t.row(i);
            total += log_sum_exp(row) - row[y];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy(logits, targets.into()),
            &[logits],
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.len().max(1) as f64;
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / n);
        self.push(out, Op::Mean(a), &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(out, Op::Sum(a), &[a])
    }

    /// Weighted neighbor mean over an undirected edge list:
    /// `out[u] = sum_{e=(u,v)} w_e h[v] / sum_{e=(u,v)} w_e`, with each edge
    /// counted from both endpoints. Nodes whose weight mass is below
    /// `1e-12` get a zero row.
    pub fn neighbor_mean(&mut self, h: Var, w: Var, edges: Arc<[(usize, usize)]>) -> Result<Var> {
        let (th, tw) = (self.value(h), self.value(w));
        require_matrix("neighbor_mean", th)?;
        if tw.len() != edges.len() {
            return Err(shape_err("neighbor_mean", th, tw));
        }
        let (n, d) = (th.rows(), th.cols());
        if let Some(&(u, v)) = edges.iter().find(|&&(u, v)| u >= n || v >= n) {
            return Err(Error::Shape {
                op: "neighbor_mean",
                left: th.shape().to_vec(),
                right: vec![u, v],
            });
        }
        let (sums, mass) = neighbor_sums(th, tw.data(), &edges);
        let mut data = sums;
        for u in 0..n {
            let row = &mut data[u * d..(u + 1) * d];
            if mass[u] < NORM_FLOOR {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= mass[u]);
            }
        }
        let out = Tensor::matrix(n, d, data);
        Ok(self.push(out, Op::NeighborMean { h, w, edges }, &[h, w]))
    }

    /// `out[r, s] = x[r, idx[r*S + s]]` for `x: [R,T]`, giving `[R,S]`.
    pub fn pick(&mut self, x: Var, idx: Arc<[usize]>, cols: usize) -> Result<Var> {
        let t = self.value(x);
        require_matrix("pick", t)?;
        let (r, tc) = (t.rows(), t.cols());
        if idx.len() != r * cols || idx.iter().any(|&i| i >= tc) {
            return Err(Error::Shape {
                op: "pick",
                left: t.shape().to_vec(),
                right: vec![r, cols],
            });
        }
        let data = (0..r * cols)
            .map(|p| t.data()[(p / cols) * tc + idx[p]])
            .collect();
        let out = Tensor::matrix(r, cols, data);
        Ok(self.push(out, Op::Pick(x, idx), &[x]))
    }

    /// Adjoint of [`Tape::pick`]: `out[r, t] = sum_s a[r,s] [idx[r*S+s] == t]`.
    pub fn scatter_cols(&mut self, a: Var, idx: Arc<[usize]>, cols: usize) -> Result<Var> {
        let t = self.value(a);
        require_matrix("scatter_cols", t)?;
        let (r, s) = (t.rows(), t.cols());
        if idx.len() != r * s || idx.iter().any(|&i| i >= cols) {
            return Err(Error::Shape {
                op: "scatter_cols",
                left: t.shape().to_vec(),
                right: vec![r, cols],
            });
        }
        let mut data = vec![0.0; r * cols];
        for (p, &v) in t.data().iter().enumerate() {
            data[(p / s) * cols + idx[p]] += v;
        }
        let out = Tensor::matrix(r, cols, data);
        Ok(self.push(out, Op::ScatterCols(a, idx), &[a]))
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape and returns a
    /// gradient for every parameter in `params`; parameters the loss does not
    /// depend on get zeros.
    pub fn backward(self, loss: Var, params: &ModelParams) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut seed = Tensor::zeros(lt.shape());
        seed.data[0] = 1.0;
        grads[loss.0] = Some(seed);
        let mut out = Gradients::zeros_like(params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor {
            shape: self.value(v).shape().to_vec(),
            data,
        }
    }

    fn propagate(
        &self,
        op: &Op,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params_out: &mut Gradients,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Param(name) => params_out.accumulate(name, g)?,
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.requires_grad(*a) {
                    let ga = matmul_nt(g.data(), tb.data(), m, n, k);
                    self.accum(grads, *a, Tensor::matrix(m, k, ga));
                }
                if self.requires_grad(*b) {
                    let gb = matmul_tn(ta.data(), g.data(), m, k, n);
                    self.accum(grads, *b, Tensor::matrix(k, n, gb));
                }
            }
            Op::Transpose(a) => self.accum(grads, *a, transpose(g)),
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                let neg = g.data().iter().map(|v| -v).collect();
                self.accum(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                self.accum(grads, *a, self.like(*a, ga));
                self.accum(grads, *b, self.like(*b, gb));
            }
            Op::AddRow(x, b) => {
                self.accum(grads, *x, g.clone());
                let d = g.cols();
                let mut gb = vec![0.0; d];
                for row in g.data().chunks(d.max(1)) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                self.accum(grads, *b, self.like(*b, gb));
            }
            Op::Scale(a, c) => {
                let ga = g.data().iter().map(|v| v * c).collect();
                self.accum(grads, *a, self.like(*a, ga));
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let ga = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accum(grads, *a, self.like(*a, ga));
            }
            Op::Sigmoid(a) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| gv * y * (1.0 - y))
                    .collect();
                self.accum(grads, *a, self.like(*a, ga));
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut gp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    self.accum(grads, p, Tensor::matrix(rows, c, gp));
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let gp = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    self.accum(grads, p, Tensor::matrix(r, cols, gp));
                    offset += r;
                }
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gx[i * d + c] += g.data()[k * d + c];
                    }
                }
                self.accum(grads, *x, self.like(*x, gx));
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let d = tx.cols();
                let mut gx = g.data().to_vec();
                let mut gs = vec![0.0; ts.len()];
                for i in 0..tx.rows() {
                    let f = ts.data()[i];
                    let grow = &g.data()[i * d..(i + 1) * d];
                    gs[i] = dot(grow, tx.row(i));
                    gx[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= f);
                }
                self.accum(grads, *x, self.like(*x, gx));
                self.accum(grads, *s, self.like(*s, gs));
            }
            Op::RowSoftmax(x) => {
                let d = out.cols();
                let mut gx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let inner = dot(gr, y);
                    for c in 0..d {
                        gx[r * d + c] = y[c] * (gr[c] - inner);
                    }
                }
                self.accum(grads, *x, self.like(*x, gx));
            }
            Op::Cosine(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, m, d) = (ta.rows(), tb.rows(), ta.cols());
                let na = row_norms(ta);
                let nb = row_norms(tb);
                let mut ga = vec![0.0; ta.len()];
                let mut gb = vec![0.0; tb.len()];
                for i in 0..n {
                    if na[i] < NORM_FLOOR {
                        continue;
                    }
                    for j in 0..m {
                        if nb[j] < NORM_FLOOR {
                            continue;
                        }
                        let gij = g.data()[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let c = out.data()[i * m + j];
                        let inv = 1.0 / (na[i] * nb[j]);
                        let (ai, bj) = (ta.row(i), tb.row(j));
                        for t in 0..d {
                            ga[i * d + t] += gij * (bj[t] * inv - c * ai[t] / (na[i] * na[i]));
                            gb[j * d + t] += gij * (ai[t] * inv - c * bj[t] / (nb[j] * nb[j]));
                        }
                    }
                }
                self.accum(grads, *a, self.like(*a, ga));
                self.accum(grads, *b, self.like(*b, gb));
            }
            Op::SoftmaxCrossEntropy(x, targets) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let scale = g.item() / targets.len() as f64;
                let mut gx = vec![0.0; tx.len()];
                for (r, &y) in targets.iter().enumerate() {
                    let mut p = tx.row(r).to_vec();
                    softmax_in_place(&mut p);
                    p[y] -= 1.0;
                    for k in 0..c {
                        gx[r * c + k] = p[k] * scale;
                    }
                }
                self.accum(grads, *x, self.like(*x, gx));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                let gv = g.item() / n;
                let ga = vec![gv; self.value(*a).len()];
                self.accum(grads, *a, self.like(*a, ga));
            }
            Op::Sum(a) => {
                let ga = vec![g.item(); self.value(*a).len()];
                self.accum(grads, *a, self.like(*a, ga));
            }
            Op::NeighborMean { h, w, edges } => {
                let (th, tw) = (self.value(*h), self.value(*w));
                let d = th.cols();
                let (_, mass) = neighbor_sums(th, tw.data(), edges);
                let mut gh = vec![0.0; th.len()];
                let mut gw = vec![0.0; tw.len()];
                for (e, &(u, v)) in edges.iter().enumerate() {
                    let we = tw.data()[e];
                    for (recv, send) in [(u, v), (v, u)] {
                        if mass[recv] < NORM_FLOOR {
                            continue;
                        }
                        let grow = &g.data()[recv * d..(recv + 1) * d];
                        let f = we / mass[recv];
                        for t in 0..d {
                            gh[send * d + t] += f * grow[t];
                        }
                        let mut acc = 0.0;
                        for t in 0..d {
                            acc += grow[t] * (th.data()[send * d + t] - out.data()[recv * d + t]);
                        }
                        gw[e] += acc / mass[recv];
                    }
                }
                self.accum(grads, *h, self.like(*h, gh));
                self.accum(grads, *w, self.like(*w, gw));
            }
            Op::Pick(x, idx) => {
                let tx = self.value(*x);
                let (tc, cols) = (tx.cols(), g.cols());
                let mut gx = vec![0.0; tx.len()];
                for (p, gv) in g.data().iter().enumerate() {
                    gx[(p / cols) * tc + idx[p]] += gv;
                }
                self.accum(grads, *x, self.like(*x, gx));
            }
            Op::ScatterCols(a, idx) => {
                let ta = self.value(*a);
                let (s, cols) = (ta.cols(), g.cols());
                let ga = (0..ta.len())
                    .map(|p| g.data()[(p / s) * cols + idx[p]])
                    .collect();
                self.accum(grads, *a, self.like(*a, ga));
            }
        }
        Ok(())
    }
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, data)
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    (0..t.rows())
        .map(|i| dot(t.row(i), t.row(i)).sqrt())
        .collect()
}

fn neighbor_sums(h: &Tensor, w: &[f64], edges: &[(usize, usize)]) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (h.rows(), h.cols());
    let mut sums = vec![0.0; n * d];
    let mut mass = vec![0.0; n];
    for (e, &(u, v)) in edges.iter().enumerate() {
        let we = w[e];
        for (recv, send) in [(u, v), (v, u)] {
            mass[recv] += we;
            for t in 0..d {
                sums[recv * d + t] += we * h.data()[send * d + t];
            }
        }
    }
    (sums, mass)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
