use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{matmul_raw, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Tanh(Var),
    Sigmoid(Var),
    SoftmaxMasked(Var),
    Gather(Var, Vec<Option<usize>>),
    Dropout(Var, Vec<f64>),
    L2Normalize(Var, Vec<f64>, f64),
    SumRows(Var),
    SumAll(Var),
    Nll(Var, Vec<f64>, Vec<usize>),
    MaxPoolGroups(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A define-by-run tape. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    train: bool,
    rng: ChaCha8Rng,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    /// `train` enables dropout; `seed` fixes the dropout masks.
    pub fn new(train: bool, seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: HashMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter once per graph; frozen parameters get no gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: p.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.cols() != y.rows() {
            return Err(shape_err(
                "matmul",
                format!("[{}, {}] x [{}, {}]", x.rows(), x.cols(), y.rows(), y.cols()),
            ));
        }
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        let out = Tensor::mat(m, n, matmul_raw(x.data(), y.data(), m, k, n));
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", out, Op::MatMul(a, b), ng)
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() == y.shape() {
            Ok(false)
        } else if y.rows() == 1 && y.cols() == x.cols() {
            Ok(true)
        } else {
            Err(shape_err(op, format!("{:?} and {:?}", x.shape(), y.shape())))
        }
    }

    /// Element-wise sum; `b` may be a `[1, n]` row broadcast over rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let n = y.len();
        let data = x.data().iter().enumerate().map(|(i, v)| v + y.data()[i % n]).collect();
        let out = Tensor::mat(x.rows(), x.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    /// Element-wise product; `b` may be a broadcast row.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let n = y.len();
        let data = x.data().iter().enumerate().map(|(i, v)| v * y.data()[i % n]).collect();
        let out = Tensor::mat(x.rows(), x.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push("mul", out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::mat(x.rows(), x.cols(), x.data().iter().map(|v| v * s).collect());
        let ng = self.needs(a);
        self.push("scale", out, Op::Scale(a, s), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let ng = self.needs(a);
        self.push("transpose", out, Op::Transpose(a), ng)
    }

    /// Row-major reshape to `[rows, cols]`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let x = self.value(a);
        if rows * cols != x.len() || rows == 0 || cols == 0 {
            return Err(shape_err("reshape", format!("{:?} to [{rows}, {cols}]", x.shape())));
        }
        let out = Tensor::mat(rows, cols, x.data().to_vec());
        let ng = self.needs(a);
        self.push("reshape", out, Op::Reshape(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(shape_err("concat_cols", format!("{shapes:?}")));
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", Tensor::mat(rows, cols, data), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            let shapes: Vec<_> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
            return Err(shape_err("concat_rows", format!("{shapes:?}")));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", Tensor::mat(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.cols() {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {:?}", x.shape())));
        }
        let mut data = Vec::with_capacity(x.rows() * (end - start));
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let out = Tensor::mat(x.rows(), end - start, data);
        let ng = self.needs(a);
        self.push("slice_cols", out, Op::SliceCols(a, start), ng)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if start >= end || end > x.rows() {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {:?}", x.shape())));
        }
        let c = x.cols();
        let out = Tensor::mat(end - start, c, x.data()[start * c..end * c].to_vec());
        let ng = self.needs(a);
        self.push("slice_rows", out, Op::SliceRows(a, start), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::mat(x.rows(), x.cols(), x.data().iter().map(|v| v.tanh()).collect());
        let ng = self.needs(a);
        self.push("tanh", out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::mat(x.rows(), x.cols(), x.data().iter().map(|&v| sigmoid(v)).collect());
        let ng = self.needs(a);
        self.push("sigmoid", out, Op::Sigmoid(a), ng)
    }

    /// Row-wise softmax where `mask[k] == false` entries get probability
    /// exactly 0 (and receive zero gradient).
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let x = self.value(a);
        if mask.len() != x.len() {
            return Err(shape_err("softmax_masked", format!("mask {} for {:?}", mask.len(), x.shape())));
        }
        let data = masked_softmax_rows(x.data(), mask, x.cols());
        let out = Tensor::mat(x.rows(), x.cols(), data);
        let ng = self.needs(a);
        self.push("softmax_masked", out, Op::SoftmaxMasked(a), ng)
    }

    /// Row gather; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = vec![0.0; index.len() * c];
        for (k, ix) in index.iter().enumerate() {
            if let Some(r) = *ix {
                if r >= x.rows() {
                    return Err(shape_err("gather_rows", format!("row {r} of {:?}", x.shape())));
                }
                data[k * c..(k + 1) * c].copy_from_slice(x.row_slice(r));
            }
        }
        let out = Tensor::mat(index.len(), c, data);
        let ng = self.needs(a);
        self.push("gather_rows", out, Op::Gather(a, index.to_vec()), ng)
    }

    /// Embedding lookup: row gather with every index present.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
        self.gather_rows(table, &index)
    }

    /// Inverted dropout; identity outside training or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout ratio {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let x = self.value(a);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::mat(x.rows(), x.cols(), data);
        let ng = self.needs(a);
        self.push("dropout", out, Op::Dropout(a, mask), ng)
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.len());
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let n = super::l2_norm(row).max(eps);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::mat(x.rows(), c, data);
        let ng = self.needs(a);
        self.push("l2_normalize", out, Op::L2Normalize(a, norms, eps), ng)
    }

    /// Column sums: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = vec![0.0; c];
        for r in 0..x.rows() {
            for (o, v) in data.iter_mut().zip(x.row_slice(r)) {
                *o += v;
            }
        }
        let ng = self.needs(a);
        self.push("sum_rows", Tensor::mat(1, c, data), Op::SumRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push("sum", Tensor::scalar(s), Op::SumAll(a), ng)
    }

    /// Summed negative log-likelihood of `targets` under a masked row-wise
    /// softmax of `logits`.
    pub fn nll(&mut self, logits: Var, mask: &[bool], targets: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let c = x.cols();
        if mask.len() != x.len() || targets.len() != x.rows() {
            return Err(shape_err(
                "nll",
                format!("logits {:?}, mask {}, targets {}", x.shape(), mask.len(), targets.len()),
            ));
        }
        let probs = masked_softmax_rows(x.data(), mask, c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c || !mask[r * c + t] {
                return Err(shape_err("nll", format!("target {t} of row {r} is masked or out of range")));
            }
            loss -= log_softmax_at(&x.data()[r * c..(r + 1) * c], &mask[r * c..(r + 1) * c], t);
        }
        let ng = self.needs(logits);
        self.push("nll", Tensor::scalar(loss), Op::Nll(logits, probs, targets.to_vec()), ng)
    }

    /// Column-wise max over each `[start, end)` row range.
    pub fn max_pool_groups(&mut self, a: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(groups.len() * c);
        let mut arg = Vec::with_capacity(groups.len() * c);
        for &(s, e) in groups {
            if s >= e || e > x.rows() {
                return Err(shape_err("max_pool_groups", format!("group {s}..{e} of {:?}", x.shape())));
            }
            for col in 0..c {
                let mut best = s;
                for r in s + 1..e {
                    if x.get(r, col) > x.get(best, col) {
                        best = r;
                    }
                }
                data.push(x.get(best, col));
                arg.push(best);
            }
        }
        let out = Tensor::mat(groups.len(), c, data);
        let ng = self.needs(a);
        self.push("max_pool_groups", out, Op::MaxPoolGroups(a, arg), ng)
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].take().map(|g| (id, g)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                if self.needs(*a) {
                    // g [m,n] · yᵀ [n,k]
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g.data()[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] = super::dot(grow, &y.data()[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(grads, *a, Tensor::mat(m, k, da));
                }
                if self.needs(*b) {
                    // xᵀ [k,m] · g [m,n]
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g.data()[r * n..(r + 1) * n];
                        for p in 0..k {
                            let xv = x.data()[r * k + p];
                            if xv == 0.0 {
                                continue;
                            }
                            for (o, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += xv * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::mat(k, n, db));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let db = self.reduce_broadcast(*b, g.clone());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let n = y.len();
                    let data = g.data().iter().enumerate().map(|(k, gv)| gv * y.data()[k % n]).collect();
                    self.accumulate(grads, *a, Tensor::mat(x.rows(), x.cols(), data));
                }
                if self.needs(*b) {
                    let data = g.data().iter().zip(x.data()).map(|(gv, xv)| gv * xv).collect();
                    let full = Tensor::mat(x.rows(), x.cols(), data);
                    let db = self.reduce_broadcast(*b, full);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, s) => {
                let data = g.data().iter().map(|v| v * s).collect();
                self.accumulate(grads, *a, Tensor::mat(g.rows(), g.cols(), data));
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::mat(x.rows(), x.cols(), g.data().to_vec()));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.row_slice(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, Tensor::mat(g.rows(), w, data));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.needs(p) {
                        let data = g.data()[offset * c..(offset + h) * c].to_vec();
                        self.accumulate(grads, p, Tensor::mat(h, c, data));
                    }
                    offset += h;
                }
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let w = g.cols();
                let mut data = vec![0.0; x.len()];
                for r in 0..x.rows() {
                    data[r * x.cols() + start..r * x.cols() + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *a, Tensor::mat(x.rows(), x.cols(), data));
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut data = vec![0.0; x.len()];
                data[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::mat(x.rows(), c, data));
            }
            Op::Tanh(a) => {
                let data = g.data().iter().zip(out.data()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::mat(g.rows(), g.cols(), data));
            }
            Op::Sigmoid(a) => {
                let data = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::mat(g.rows(), g.cols(), data));
            }
            Op::SoftmaxMasked(a) => {
                let c = out.cols();
                let mut data = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let inner = super::dot(y, gr);
                    for k in 0..c {
                        data[r * c + k] = y[k] * (gr[k] - inner);
                    }
                }
                self.accumulate(grads, *a, Tensor::mat(out.rows(), c, data));
            }
            Op::Gather(a, index) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut data = vec![0.0; x.len()];
                for (k, ix) in index.iter().enumerate() {
                    if let Some(r) = *ix {
                        for (o, gv) in data[r * c..(r + 1) * c].iter_mut().zip(g.row_slice(k)) {
                            *o += gv;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::mat(x.rows(), c, data));
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                self.accumulate(grads, *a, Tensor::mat(g.rows(), g.cols(), data));
            }
            Op::L2Normalize(a, norms, eps) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut data = vec![0.0; x.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let raw = super::l2_norm(x.row_slice(r));
                    if raw > *eps {
                        let inner = super::dot(y, gr);
                        for k in 0..c {
                            data[r * c + k] = (gr[k] - y[k] * inner) / n;
                        }
                    } else {
                        for k in 0..c {
                            data[r * c + k] = gr[k] / n;
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::mat(x.rows(), c, data));
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let mut data = Vec::with_capacity(x.len());
                for _ in 0..x.rows() {
                    data.extend_from_slice(g.data());
                }
                self.accumulate(grads, *a, Tensor::mat(x.rows(), x.cols(), data));
            }
            Op::SumAll(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::Nll(a, probs, targets) => {
                let x = self.value(*a);
                let c = x.cols();
                let s = g.item();
                let mut data: Vec<f64> = probs.iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    data[r * c + t] -= s;
                }
                self.accumulate(grads, *a, Tensor::mat(x.rows(), c, data));
            }
            Op::MaxPoolGroups(a, arg) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut data = vec![0.0; x.len()];
                for (k, &r) in arg.iter().enumerate() {
                    data[r * c + k % c] += g.data()[k];
                }
                self.accumulate(grads, *a, Tensor::mat(x.rows(), c, data));
            }
        }
    }

    fn reduce_broadcast(&self, b: Var, full: Tensor) -> Tensor {
        let y = self.value(b);
        if y.shape() == full.shape() {
            return full;
        }
        let c = y.cols();
        let mut data = vec![0.0; c];
        for r in 0..full.rows() {
            for (o, v) in data.iter_mut().zip(full.row_slice(r)) {
                *o += v;
            }
        }
        Tensor::mat(1, c, data)
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

pub(crate) fn masked_softmax_rows(x: &[f64], mask: &[bool], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return out;
    }
    for r in 0..x.len() / cols {
        let row = &x[r * cols..(r + 1) * cols];
        let m = &mask[r * cols..(r + 1) * cols];
        let max = row
            .iter()
            .zip(m)
            .filter(|(_, &keep)| keep)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut z = 0.0;
        for k in 0..cols {
            if m[k] {
                let e = (row[k] - max).exp();
                out[r * cols + k] = e;
                z += e;
            }
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= z;
        }
    }
    out
}

fn log_softmax_at(row: &[f64], mask: &[bool], t: usize) -> f64 {
    let max = row
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(v, _)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().zip(mask).filter(|(_, &keep)| keep).map(|(v, _)| (v - max).exp()).sum();
    row[t] - max - z.ln()
}

/// Gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Gradients of trainable parameters, sorted by parameter id.
    pub fn into_params(mut self) -> Vec<(ParamId, Tensor)> {
        self.params.sort_by_key(|(id, _)| *id);
        self.params
    }
}
