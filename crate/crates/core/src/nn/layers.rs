use std::ops::Range;
use std::sync::Arc;

use rand::Rng;

use super::store::{ParamId, ParameterStore};
use super::tape::{BnStats, Tape, Var};
use super::{NnError, Result, Tensor};
use crate::geometry::Vec3;
use crate::graph::PhysicsGraph;

/// Edges grouped by target node in compressed-row form.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    offsets: Vec<usize>,
    sources: Vec<usize>,
    source_count: usize,
}

impl EdgeIndex {
    /// `lists[i]` holds the sources feeding target `i`.
    pub fn from_lists(lists: &[Vec<usize>], source_count: usize) -> Result<Self> {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut sources = Vec::new();
        for l in lists {
            if let Some(&bad) = l.iter().find(|&&s| s >= source_count) {
                return Err(NnError::Shape(format!("edge source {bad} out of {source_count} nodes")));
            }
            sources.extend_from_slice(l);
            offsets.push(sources.len());
        }
        Ok(Self { offsets, sources, source_count })
    }

    pub fn target_count(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn edge_count(&self) -> usize {
        self.sources.len()
    }

    pub fn segment(&self, target: usize) -> Range<usize> {
        self.offsets[target]..self.offsets[target + 1]
    }

    pub fn source(&self, edge: usize) -> usize {
        self.sources[edge]
    }

    /// Target of every edge, in edge order.
    pub fn targets(&self) -> Vec<usize> {
        (0..self.target_count()).flat_map(|i| self.segment(i).map(move |_| i)).collect()
    }
}

/// Graph structure in the form the layers consume.
///
/// Attention edges connect each node to its near neighbours (no self-loops;
/// an isolated node gets one). Propagation edges carry the symmetric
/// normalized adjacency `D^{-1/2}(A + I)D^{-1/2}` with self-loops.
#[derive(Clone, Debug)]
pub struct GraphTensors {
    pub attention: Arc<EdgeIndex>,
    pub attention_weight: Tensor,
    pub attention_unit: Tensor,
    /// `n_source − n_target` per attention edge.
    pub normal_delta: Tensor,
    pub propagation: Arc<EdgeIndex>,
    pub propagation_weight: Tensor,
    pub propagation_unit: Tensor,
}

fn normalized_adjacency(n: usize, lists: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let degree: Vec<f64> = lists.iter().map(|l| 1.0 + l.iter().map(|(_, w)| w).sum::<f64>()).collect();
    let mut out = Vec::new();
    for i in 0..n {
        out.push(1.0 / degree[i]);
        for &(j, w) in &lists[i] {
            out.push(w / (degree[i] * degree[j]).sqrt());
        }
    }
    out
}

impl GraphTensors {
    /// `edges` are undirected `(i, j, w)` triples with `i ≠ j`.
    pub fn new(n: usize, edges: &[(usize, usize, f64)], normals: &[Vec3]) -> Result<Self> {
        if normals.len() != n {
            return Err(NnError::Shape(format!("{} normals for {n} nodes", normals.len())));
        }
        let mut lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i >= n || j >= n || i == j {
                return Err(NnError::Shape(format!("invalid edge ({i}, {j}) for {n} nodes")));
            }
            lists[i].push((j, w));
            lists[j].push((i, w));
        }
        for l in &mut lists {
            l.sort_by_key(|e| e.0);
        }
        let att_lists: Vec<Vec<usize>> = lists
            .iter()
            .enumerate()
            .map(|(i, l)| if l.is_empty() { vec![i] } else { l.iter().map(|e| e.0).collect() })
            .collect();
        let att_w: Vec<f64> =
            lists.iter().flat_map(|l| if l.is_empty() { vec![1.0] } else { l.iter().map(|e| e.1).collect() }).collect();
        let attention = Arc::new(EdgeIndex::from_lists(&att_lists, n)?);
        let mut delta = Vec::with_capacity(attention.edge_count() * 3);
        for (e, t) in attention.targets().into_iter().enumerate() {
            let d = normals[attention.source(e)] - normals[t];
            delta.extend_from_slice(&[d.x, d.y, d.z]);
        }

        let prop_lists: Vec<Vec<usize>> =
            lists.iter().enumerate().map(|(i, l)| std::iter::once(i).chain(l.iter().map(|e| e.0)).collect()).collect();
        let unit_lists: Vec<Vec<(usize, f64)>> =
            lists.iter().map(|l| l.iter().map(|&(j, _)| (j, 1.0)).collect()).collect();
        let e = att_w.len();
        Ok(Self {
            attention,
            attention_unit: Tensor::filled(e, 1, 1.0),
            attention_weight: Tensor::column(att_w),
            normal_delta: Tensor::from_raw(e, 3, delta),
            propagation: Arc::new(EdgeIndex::from_lists(&prop_lists, n)?),
            propagation_weight: Tensor::column(normalized_adjacency(n, &lists)),
            propagation_unit: Tensor::column(normalized_adjacency(n, &unit_lists)),
        })
    }

    pub fn from_graph(graph: &PhysicsGraph) -> Result<Self> {
        let edges: Vec<(usize, usize, f64)> = graph.edges.iter().map(|e| (e.i, e.j, e.weight)).collect();
        Self::new(graph.len(), &edges, &graph.normals)
    }

    pub fn node_count(&self) -> usize {
        self.propagation.target_count()
    }

    /// Attention edge weights; all ones when `edge_constraint` is off.
    pub fn attention_weights(&self, edge_constraint: bool) -> &Tensor {
        if edge_constraint {
            &self.attention_weight
        } else {
            &self.attention_unit
        }
    }

    pub fn propagation_weights(&self, edge_constraint: bool) -> &Tensor {
        if edge_constraint {
            &self.propagation_weight
        } else {
            &self.propagation_unit
        }
    }
}

/// Affine map `xW + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_glorot(&format!("{name}.weight"), inputs, outputs, rng)?;
        let bias = if bias { Some(store.add(&format!("{name}.bias"), Tensor::zeros(1, outputs), true)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two stacked affine maps, optionally with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Ffn2 {
    pub first: Linear,
    pub second: Linear,
    pub relu: bool,
}

impl Ffn2 {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        relu: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.0"), inputs, hidden, true, rng)?,
            second: Linear::new(store, &format!("{name}.1"), hidden, outputs, true, rng)?,
            relu,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = self.first.forward(tape, store, x)?;
        if self.relu {
            h = tape.relu(h);
        }
        self.second.forward(tape, store, h)
    }
}

pub const GAT_NEGATIVE_SLOPE: f64 = 0.2;

/// Single-head graph attention with edge weights multiplying the logits.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub weight: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
}

impl GatLayer {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_glorot(&format!("{name}.weight"), inputs, outputs, rng)?,
            att_src: store.add_glorot(&format!("{name}.att_src"), outputs, 1, rng)?,
            att_dst: store.add_glorot(&format!("{name}.att_dst"), outputs, 1, rng)?,
        })
    }

    /// Returns the new features and the per-edge attention column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        graph: &GraphTensors,
        edge_constraint: bool,
    ) -> Result<(Var, Var)> {
        let w = tape.param(store, self.weight);
        let wh = tape.matmul(h, w)?;
        let a_src = tape.param(store, self.att_src);
        let a_dst = tape.param(store, self.att_dst);
        let s_src = tape.matmul(wh, a_src)?;
        let s_dst = tape.matmul(wh, a_dst)?;
        let e = tape.edge_pair_sum(s_dst, s_src, graph.attention.clone())?;
        let e = tape.leaky_relu(e, GAT_NEGATIVE_SLOPE);
        let weights = tape.constant(graph.attention_weights(edge_constraint).clone());
        let e = tape.mul(e, weights)?;
        let alpha = tape.segment_softmax(e, graph.attention.clone())?;
        let out = tape.aggregate(alpha, wh, graph.attention.clone())?;
        Ok((out, alpha))
    }
}

/// Graph convolution `Â H W`.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
}

impl GcnLayer {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self { weight: store.add_glorot(&format!("{name}.weight"), inputs, outputs, rng)? })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        h: Var,
        graph: &GraphTensors,
        edge_constraint: bool,
    ) -> Result<Var> {
        let a = tape.constant(graph.propagation_weights(edge_constraint).clone());
        let ah = tape.aggregate(a, h, graph.propagation.clone())?;
        let w = tape.param(store, self.weight);
        tape.matmul(ah, w)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParameterStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{name}.gamma"), Tensor::filled(1, channels, 1.0), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(1, channels), true)?,
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(1, channels), false)?,
            running_var: store.add(&format!("{name}.running_var"), Tensor::filled(1, channels, 1.0), false)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Training mode normalizes with batch statistics and queues running
    /// statistic updates on the tape; otherwise the running values are used.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, training: bool) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let (rm, rv) = (&store.get(self.running_mean).value, &store.get(self.running_var).value);
        let stats = if training {
            BnStats::Batch {
                running_mean: (self.running_mean, rm),
                running_var: (self.running_var, rv),
                momentum: self.momentum,
            }
        } else {
            BnStats::Fixed { mean: rm, var: rv }
        };
        tape.batch_norm(x, gamma, beta, stats, self.eps)
    }
}

/// Multi-head scaled dot-product attention with an output projection.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: Linear,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(NnError::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: store.add_glorot(&format!("{name}.query"), width, width, rng)?,
            key: store.add_glorot(&format!("{name}.key"), width, width, rng)?,
            value: store.add_glorot(&format!("{name}.value"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.output"), width, width, true, rng)?,
            heads,
            width,
        })
    }

    /// Attention of `q` rows over `kv` rows. Also returns each head's
    /// row-stochastic weight matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, q: Var, kv: Var) -> Result<(Var, Vec<Var>)> {
        for v in [q, kv] {
            if tape.value(v).cols() != self.width {
                return Err(NnError::Shape(format!(
                    "attention input width {} != {}",
                    tape.value(v).cols(),
                    self.width
                )));
            }
        }
        let wq = tape.param(store, self.query);
        let wk = tape.param(store, self.key);
        let wv = tape.param(store, self.value);
        let qp = tape.matmul(q, wq)?;
        let kp = tape.matmul(kv, wk)?;
        let vp = tape.matmul(kv, wv)?;
        let dk = self.width / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dk, (h + 1) * dk);
            let qh = tape.slice_cols(qp, s, e)?;
            let kh = tape.slice_cols(kp, s, e)?;
            let vh = tape.slice_cols(vp, s, e)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
            let a = tape.row_softmax(scores);
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.output.forward(tape, store, cat)?, weights))
    }
}

/// Fixed interpolation weights from coarse points to fine points for every kernel point.
#[derive(Clone, Debug)]
pub struct KernelPointGeometry {
    pub kernels: Vec<(Arc<EdgeIndex>, Tensor)>,
    /// Fine points that had no coarse point in range of any kernel.
    pub fallbacks: Vec<usize>,
}

/// Kernel offsets: the centre, then `±radius` along each axis.
pub fn kernel_offsets(count: usize, radius: f64) -> Result<Vec<Vec3>> {
    let all = [
        Vec3::zeros(),
        Vec3::new(radius, 0.0, 0.0),
        Vec3::new(-radius, 0.0, 0.0),
        Vec3::new(0.0, radius, 0.0),
        Vec3::new(0.0, -radius, 0.0),
        Vec3::new(0.0, 0.0, radius),
        Vec3::new(0.0, 0.0, -radius),
    ];
    match count {
        1 | 7 => Ok(all[..count].to_vec()),
        _ => Err(NnError::Config(format!("kernel point count must be 1 or 7, got {count}"))),
    }
}

impl KernelPointGeometry {
    /// Influence of coarse point `c` on kernel point `x + o_k` is
    /// `max(0, 1 − |c − x − o_k| / σ)` with `σ = radius`.
    pub fn new(coarse: &[Vec3], fine: &[Vec3], kernel_count: usize, radius: f64) -> Result<Self> {
        if coarse.is_empty() {
            return Err(NnError::Shape("no coarse points".into()));
        }
        if !(radius > 0.0) {
            return Err(NnError::Config(format!("kernel radius must be positive, got {radius}")));
        }
        let offsets = kernel_offsets(kernel_count, radius)?;
        let sigma = radius;
        let mut lists = vec![vec![Vec::new(); fine.len()]; offsets.len()];
        let mut weights = vec![vec![Vec::new(); fine.len()]; offsets.len()];
        let mut fallbacks = Vec::new();
        for (i, x) in fine.iter().enumerate() {
            let mut found = false;
            for (k, o) in offsets.iter().enumerate() {
                let kp = x + o;
                for (c, p) in coarse.iter().enumerate() {
                    let w = 1.0 - (p - kp).norm() / sigma;
                    if w > 0.0 {
                        lists[k][i].push(c);
                        weights[k][i].push(w);
                        found = true;
                    }
                }
            }
            if !found {
                let nearest = (0..coarse.len())
                    .min_by(|&a, &b| (coarse[a] - x).norm_squared().total_cmp(&(coarse[b] - x).norm_squared()))
                    .expect("coarse set is non-empty");
                log::debug!("fine point {i} has no coarse point within the kernel radius, using nearest {nearest}");
                lists[0][i].push(nearest);
                weights[0][i].push(1.0);
                fallbacks.push(i);
            }
        }
        let kernels = lists
            .iter()
            .zip(weights)
            .map(|(l, w)| {
                let idx = EdgeIndex::from_lists(l, coarse.len())?;
                Ok((Arc::new(idx), Tensor::column(w.into_iter().flatten().collect())))
            })
            .collect::<Result<_>>()?;
        Ok(Self { kernels, fallbacks })
    }

    pub fn kernel_count(&self) -> usize {
        self.kernels.len()
    }
}

/// Kernel-point transfer of coarse features onto fine points: `Σ_k W_k f_k`.
#[derive(Clone, Debug)]
pub struct KpConv {
    pub weights: Vec<ParamId>,
}

impl KpConv {
    pub fn new<R: Rng>(
        store: &mut ParameterStore,
        name: &str,
        kernel_count: usize,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = (0..kernel_count)
            .map(|k| store.add_glorot(&format!("{name}.kernel{k}"), inputs, outputs, rng))
            .collect::<Result<_>>()?;
        Ok(Self { weights })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        coarse: Var,
        geometry: &KernelPointGeometry,
    ) -> Result<Var> {
        if geometry.kernel_count() != self.weights.len() {
            return Err(NnError::Shape(format!(
                "geometry has {} kernels, layer has {}",
                geometry.kernel_count(),
                self.weights.len()
            )));
        }
        let mut acc: Option<Var> = None;
        for ((index, w), &param) in geometry.kernels.iter().zip(&self.weights) {
            let wv = tape.constant(w.clone());
            let f = tape.aggregate(wv, coarse, index.clone())?;
            let p = tape.param(store, param);
            let term = tape.matmul(f, p)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one kernel"))
    }
}
