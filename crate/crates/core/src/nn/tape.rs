use std::sync::Arc;

use super::layers::EdgeIndex;
use super::store::{ParamId, ParameterStore};
use super::{NnError, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// User-defined differentiable operation.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradients with respect to each input, given the output gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Elu(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Arc<Vec<usize>>),
    Aggregate(Var, Var, Arc<EdgeIndex>),
    EdgePairSum(Var, Var, Arc<EdgeIndex>),
    SegmentSoftmax(Var, Arc<EdgeIndex>),
    RowSoftmax(Var),
    BatchNorm(Var, Var, Var, Box<BnCache>),
    Sum(Var),
    Custom(Vec<Var>, Arc<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn parameter_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|&(node, id)| self.grads[node].as_ref().map(|g| (id, g)))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::Shape(format!("{op}: {:?} vs {:?}", a.shape(), b.shape()))
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_raw(t.rows(), t.cols(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
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
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.v(a), self.v(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip(self.v(a), self.v(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip(self.v(a), self.v(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip(self.v(a), self.v(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `x + 1·bᵀ` for a `1 × c` row `b`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.v(x), self.v(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(shape_err("add_row", tx, tb));
        }
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % c]).collect();
        let out = Tensor::from_raw(tx.rows(), c, data);
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// Scales row `r` of `x` by `s[r]` for an `n × 1` column `s`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.v(x), self.v(s));
        if ts.cols() != 1 || ts.rows() != tx.rows() {
            return Err(shape_err("mul_col", tx, ts));
        }
        let c = tx.cols();
        let data = tx.data().iter().enumerate().map(|(i, v)| v * ts.data()[i / c]).collect();
        let out = Tensor::from_raw(tx.rows(), c, data);
        Ok(self.push(out, Op::MulCol(x, s)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = map(self.v(x), |v| v * k);
        self.push(out, Op::Scale(x, k))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        let out = map(self.v(x), |v| if v > 0.0 { v } else { v.exp_m1() });
        self.push(out, Op::Elu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = map(self.v(x), |v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = map(self.v(x), |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.v(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.v(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.v(**p).rows() != rows) {
            return Err(shape_err("concat_cols", self.v(parts[0]), self.v(*bad)));
        }
        let total: usize = parts.iter().map(|p| self.v(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.v(*p).row(r));
            }
        }
        let out = Tensor::from_raw(rows, total, data);
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.v(x);
        if start >= end || end > tx.cols() {
            return Err(NnError::Shape(format!("slice {start}..{end} of {} columns", tx.cols())));
        }
        let mut data = Vec::with_capacity(tx.rows() * (end - start));
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let out = Tensor::from_raw(tx.rows(), end - start, data);
        Ok(self.push(out, Op::Slice(x, start, end)))
    }

    /// Row `r` of the result is row `index[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let tx = self.v(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.rows()) {
            return Err(NnError::Shape(format!("gather index {bad} out of {} rows", tx.rows())));
        }
        let mut data = Vec::with_capacity(index.len() * tx.cols());
        for &i in index.iter() {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::from_raw(index.len(), tx.cols(), data);
        Ok(self.push(out, Op::Gather(x, index)))
    }

    /// `out[i] = Σ_{e ∈ seg(i)} w[e] · values[src(e)]`.
    pub fn aggregate(&mut self, weights: Var, values: Var, index: Arc<EdgeIndex>) -> Result<Var> {
        let (tw, tv) = (self.v(weights), self.v(values));
        if tw.cols() != 1 || tw.rows() != index.edge_count() || tv.rows() != index.source_count() {
            return Err(NnError::Shape(format!(
                "aggregate: weights {:?}, values {:?}, index {}x{} with {} edges",
                tw.shape(),
                tv.shape(),
                index.target_count(),
                index.source_count(),
                index.edge_count()
            )));
        }
        let c = tv.cols();
        let mut data = vec![0.0; index.target_count() * c];
        for i in 0..index.target_count() {
            let out = &mut data[i * c..(i + 1) * c];
            for e in index.segment(i) {
                let w = tw.data()[e];
                for (o, v) in out.iter_mut().zip(tv.row(index.source(e))) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::from_raw(index.target_count(), c, data);
        Ok(self.push(out, Op::Aggregate(weights, values, index)))
    }

    /// Per-edge `a[target(e)] + b[source(e)]` for column inputs.
    pub fn edge_pair_sum(&mut self, target_vals: Var, source_vals: Var, index: Arc<EdgeIndex>) -> Result<Var> {
        let (ta, tb) = (self.v(target_vals), self.v(source_vals));
        if ta.cols() != 1 || tb.cols() != 1 || ta.rows() != index.target_count() || tb.rows() != index.source_count() {
            return Err(shape_err("edge_pair_sum", ta, tb));
        }
        let mut data = vec![0.0; index.edge_count()];
        for i in 0..index.target_count() {
            for e in index.segment(i) {
                data[e] = ta.data()[i] + tb.data()[index.source(e)];
            }
        }
        let out = Tensor::column(data);
        Ok(self.push(out, Op::EdgePairSum(target_vals, source_vals, index)))
    }

    /// Softmax of a column of edge logits within each target's segment.
    pub fn segment_softmax(&mut self, logits: Var, index: Arc<EdgeIndex>) -> Result<Var> {
        let t = self.v(logits);
        if t.cols() != 1 || t.rows() != index.edge_count() {
            return Err(NnError::Shape(format!(
                "segment_softmax over {:?} with {} edges",
                t.shape(),
                index.edge_count()
            )));
        }
        let mut data = vec![0.0; t.rows()];
        for i in 0..index.target_count() {
            softmax_into(&t.data()[index.segment(i)], &mut data[index.segment(i)]);
        }
        let out = Tensor::column(data);
        Ok(self.push(out, Op::SegmentSoftmax(logits, index)))
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let t = self.v(x);
        let c = t.cols();
        let mut data = vec![0.0; t.len()];
        for r in 0..t.rows() {
            softmax_into(t.row(r), &mut data[r * c..(r + 1) * c]);
        }
        let out = Tensor::from_raw(t.rows(), c, data);
        self.push(out, Op::RowSoftmax(x))
    }

    /// Batch normalization over rows. With `running = Some((mean, var, momentum))`
    /// batch statistics are used and the updated running statistics are queued
    /// as buffer updates; with `fixed = Some(..)` the given statistics are used.
    pub(crate) fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>, eps: f64) -> Result<Var> {
        let tx = self.v(x);
        let (n, c) = (tx.rows(), tx.cols());
        let (tg, tb) = (self.v(gamma), self.v(beta));
        if tg.shape() != [1, c] || tb.shape() != [1, c] {
            return Err(shape_err("batch_norm", tx, tg));
        }
        let (mean, var, batch_stats) = match &stats {
            BnStats::Batch { .. } => {
                if n < 2 {
                    return Err(NnError::BatchTooSmall(n));
                }
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(tx.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
            BnStats::Fixed { mean, var } => (mean.data().to_vec(), var.data().to_vec(), false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for r in 0..n {
            for j in 0..c {
                let h = (tx.data()[r * c + j] - mean[j]) * inv_std[j];
                xhat[r * c + j] = h;
                out[r * c + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        if let BnStats::Batch { running_mean, running_var, momentum } = stats {
            let (rm, rv) = (running_mean.1, running_var.1);
            let unbias = n as f64 / (n as f64 - 1.0);
            let new_mean = (0..c).map(|j| (1.0 - momentum) * rm.data()[j] + momentum * mean[j]).collect();
            let new_var = (0..c).map(|j| (1.0 - momentum) * rv.data()[j] + momentum * var[j] * unbias).collect();
            self.buffer_updates.push((running_mean.0, Tensor::from_raw(1, c, new_mean)));
            self.buffer_updates.push((running_var.0, Tensor::from_raw(1, c, new_var)));
        }
        let cache = BnCache { xhat: Tensor::from_raw(n, c, xhat), inv_std, batch_stats };
        Ok(self.push(Tensor::from_raw(n, c, out), Op::BatchNorm(x, gamma, beta, Box::new(cache))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.v(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.v(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.v(*v)).collect();
        let out = op.forward(&vals)?;
        Ok(self.push(out, Op::Custom(inputs.to_vec(), op)))
    }

    /// Reverse sweep from a `1 × 1` loss. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(NnError::DoubleBackward);
        }
        let shape = self.v(loss).shape().to_vec();
        if shape != [1, 1] {
            return Err(NnError::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut params = Vec::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let contributions = self.local_grads(node, &g);
            for (v, t) in contributions {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            if let Op::Param(id) = node.op {
                params.push((idx, id));
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, params })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) => vec![(*a, g.matmul_t(val(*b))), (*b, val(*a).t_matmul(g))],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, map(g, |v| -v))],
            Op::Mul(a, b) => vec![(*a, zip(g, val(*b), |x, y| x * y)), (*b, zip(g, val(*a), |x, y| x * y))],
            Op::AddRow(x, b) => {
                let c = g.cols();
                let mut db = vec![0.0; c];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::from_raw(1, c, db))]
            }
            Op::MulCol(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let c = g.cols();
                let dx = g.data().iter().enumerate().map(|(i, v)| v * ts.data()[i / c]).collect();
                let ds = (0..g.rows()).map(|r| g.row(r).iter().zip(tx.row(r)).map(|(a, b)| a * b).sum()).collect();
                vec![(*x, Tensor::from_raw(g.rows(), c, dx)), (*s, Tensor::column(ds))]
            }
            Op::Scale(x, k) => vec![(*x, map(g, |v| v * k))],
            Op::Elu(x) => vec![(*x, zip(g, val(*x), |d, v| if v > 0.0 { d } else { d * v.exp() }))],
            Op::LeakyRelu(x, s) => vec![(*x, zip(g, val(*x), |d, v| if v > 0.0 { d } else { d * s }))],
            Op::Relu(x) => vec![(*x, zip(g, val(*x), |d, v| if v > 0.0 { d } else { 0.0 }))],
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Concat(parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut d = Vec::with_capacity(g.rows() * w);
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    out.push((*p, Tensor::from_raw(g.rows(), w, d)));
                    offset += w;
                }
                out
            }
            Op::Slice(x, start, end) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    d[r * c + start..r * c + end].copy_from_slice(g.row(r));
                }
                vec![(*x, Tensor::from_raw(tx.rows(), c, d))]
            }
            Op::Gather(x, index) => {
                let tx = val(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.len()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![(*x, Tensor::from_raw(tx.rows(), c, d))]
            }
            Op::Aggregate(w, values, index) => {
                let (tw, tv) = (val(*w), val(*values));
                let c = tv.cols();
                let mut dw = vec![0.0; index.edge_count()];
                let mut dv = vec![0.0; tv.len()];
                for i in 0..index.target_count() {
                    let gi = g.row(i);
                    for e in index.segment(i) {
                        let s = index.source(e);
                        dw[e] = gi.iter().zip(tv.row(s)).map(|(a, b)| a * b).sum();
                        let we = tw.data()[e];
                        for (o, gv) in dv[s * c..(s + 1) * c].iter_mut().zip(gi) {
                            *o += we * gv;
                        }
                    }
                }
                vec![(*w, Tensor::column(dw)), (*values, Tensor::from_raw(tv.rows(), c, dv))]
            }
            Op::EdgePairSum(a, b, index) => {
                let mut da = vec![0.0; index.target_count()];
                let mut db = vec![0.0; index.source_count()];
                for (i, slot) in da.iter_mut().enumerate() {
                    for e in index.segment(i) {
                        *slot += g.data()[e];
                        db[index.source(e)] += g.data()[e];
                    }
                }
                vec![(*a, Tensor::column(da)), (*b, Tensor::column(db))]
            }
            Op::SegmentSoftmax(x, index) => {
                let y = &node.value;
                let mut d = vec![0.0; y.len()];
                for i in 0..index.target_count() {
                    let seg = index.segment(i);
                    softmax_backward(&y.data()[seg.clone()], &g.data()[seg.clone()], &mut d[seg]);
                }
                vec![(*x, Tensor::column(d))]
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    softmax_backward(y.row(r), g.row(r), &mut d[r * c..(r + 1) * c]);
                }
                vec![(*x, Tensor::from_raw(y.rows(), c, d))]
            }
            Op::BatchNorm(x, gamma, beta, cache) => {
                let (n, c) = (g.rows(), g.cols());
                let tg = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        dgamma[j] += g.data()[r * c + j] * cache.xhat.data()[r * c + j];
                        dbeta[j] += g.data()[r * c + j];
                    }
                }
                let mut dx = vec![0.0; n * c];
                for j in 0..c {
                    let s = tg.data()[j] * cache.inv_std[j];
                    if cache.batch_stats {
                        let nf = n as f64;
                        for r in 0..n {
                            let k = r * c + j;
                            dx[k] = s / nf * (nf * g.data()[k] - dbeta[j] - cache.xhat.data()[k] * dgamma[j]);
                        }
                    } else {
                        for r in 0..n {
                            dx[r * c + j] = s * g.data()[r * c + j];
                        }
                    }
                }
                vec![
                    (*x, Tensor::from_raw(n, c, dx)),
                    (*gamma, Tensor::from_raw(1, c, dgamma)),
                    (*beta, Tensor::from_raw(1, c, dbeta)),
                ]
            }
            Op::Sum(x) => {
                let tx = val(*x);
                vec![(*x, Tensor::filled(tx.rows(), tx.cols(), g.data()[0]))]
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs.iter().copied().zip(op.backward(&vals, &node.value, g)).collect()
            }
        }
    }
}

pub(crate) enum BnStats<'a> {
    Batch { running_mean: (ParamId, &'a Tensor), running_var: (ParamId, &'a Tensor), momentum: f64 },
    Fixed { mean: &'a Tensor, var: &'a Tensor },
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yv), gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
    }
}
