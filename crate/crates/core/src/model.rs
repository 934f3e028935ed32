//! The U-shaped surface-current predictor.
//!
//! Down path: at every hierarchy level a point-attention block and a local
//! propagation block turn node inputs into near features; level `l + 1`
//! inputs are the mean of the level-`l` near features over each parent's
//! children. Up path: starting from the coarsest level, near features attend
//! over themselves plus the kernel-point expansion of the coarser far
//! features; skip connections add the near features back. A linear head
//! maps finest-level features to six real channels per face, which are then
//! projected onto the face tangent planes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::em::{IncidentWave, SurfaceCurrentField, FREE_SPACE_IMPEDANCE};
use crate::geometry::{to_point_cloud, PointCloud, TriangleMesh, Vec3};
use crate::graph::{GraphError, PhysicsGraph};
use crate::hierarchy::{build_octree, HierarchyError, LevelHierarchy};
use crate::nn::{
    BatchNorm, CustomOp, EdgeIndex, Ffn2, GatLayer, GcnLayer, GraphTensors, KernelPointGeometry, KpConv, Linear,
    MultiHeadAttention, NnError, ParameterStore, Tape, Tensor, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("geometry does not match the model: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Where keys and values of the translation attention come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvSource {
    /// Near features plus the expanded far features.
    Sum,
    /// Expanded far features only.
    Expanded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub levels: usize,
    pub width: usize,
    pub heads: usize,
    pub kernel_count: usize,
    pub density_hidden: usize,
    pub normal_hidden: usize,
    /// ReLU between the two layers of the density and normal networks.
    pub ffn_relu: bool,
    pub skip_connections: bool,
    pub edge_constraint: bool,
    pub kv_source: KvSource,
    pub include_coordinates: bool,
    /// Normalize with each sample's own node statistics at inference too,
    /// instead of the running averages.
    pub sample_statistics: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            width: 64,
            heads: 4,
            kernel_count: 7,
            density_hidden: 16,
            normal_hidden: 16,
            ffn_relu: false,
            skip_connections: true,
            edge_constraint: true,
            kv_source: KvSource::Sum,
            include_coordinates: false,
            sample_statistics: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(ModelError::Config("levels must be at least 1".into()));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        if self.kernel_count != 1 && self.kernel_count != 7 {
            return Err(ModelError::Config(format!("kernel_count must be 1 or 7, got {}", self.kernel_count)));
        }
        if self.density_hidden == 0 || self.normal_hidden == 0 {
            return Err(ModelError::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn input_features(&self) -> usize {
        BASE_FEATURES + if self.include_coordinates { 3 } else { 0 }
    }
}

/// Re E, Im E, n̂, density, curvature, propagation direction, polarization.
pub const BASE_FEATURES: usize = 17;

/// Everything about a mesh the model needs that does not depend on the wave.
#[derive(Clone, Debug)]
pub struct GeometryContext {
    pub mesh: TriangleMesh,
    pub cloud: PointCloud,
    pub hierarchy: LevelHierarchy,
    pub graphs: Vec<PhysicsGraph>,
    tensors: Vec<GraphTensors>,
    density: Vec<Tensor>,
    pools: Vec<(Arc<EdgeIndex>, Tensor)>,
    expansions: Vec<KernelPointGeometry>,
    normals: Arc<Vec<Vec3>>,
}

impl GeometryContext {
    pub fn new(mesh: &TriangleMesh, wavelength: f64, config: &ModelConfig) -> Result<Self> {
        let cloud = to_point_cloud(mesh);
        let hierarchy = build_octree(&cloud, wavelength, config.levels)?;
        Self::with_hierarchy(mesh, hierarchy, config)
    }

    pub fn with_hierarchy(mesh: &TriangleMesh, hierarchy: LevelHierarchy, config: &ModelConfig) -> Result<Self> {
        let cloud = to_point_cloud(mesh);
        if hierarchy.depth() > config.levels {
            return Err(ModelError::Inconsistent(format!(
                "hierarchy has {} levels, model has {}",
                hierarchy.depth(),
                config.levels
            )));
        }
        if hierarchy.levels[0].len() != mesh.face_count() {
            return Err(ModelError::Inconsistent(format!(
                "hierarchy has {} base points, mesh has {} faces",
                hierarchy.levels[0].len(),
                mesh.face_count()
            )));
        }
        let graphs = (0..hierarchy.depth())
            .map(|l| PhysicsGraph::build(&cloud, &hierarchy, l))
            .collect::<Result<Vec<_>, _>>()?;
        let tensors = graphs.iter().map(GraphTensors::from_graph).collect::<Result<Vec<_>, _>>()?;
        let density = graphs.iter().map(|g| Tensor::column(g.density_norm.clone())).collect();
        let mut pools = Vec::new();
        let mut expansions = Vec::new();
        for l in 0..hierarchy.depth() - 1 {
            let fine = &hierarchy.levels[l];
            let coarse_count = hierarchy.levels[l + 1].len();
            let children = fine.children(coarse_count);
            let weights = children.iter().flat_map(|c| vec![1.0 / c.len() as f64; c.len()]).collect();
            pools.push((Arc::new(EdgeIndex::from_lists(&children, fine.len())?), Tensor::column(weights)));
            let radius = hierarchy.levels[l + 1].cube_edge / 2.0;
            expansions.push(KernelPointGeometry::new(
                &graphs[l + 1].positions,
                &graphs[l].positions,
                config.kernel_count,
                radius,
            )?);
        }
        let normals = Arc::new(mesh.normals().to_vec());
        Ok(Self { mesh: mesh.clone(), cloud, hierarchy, graphs, tensors, density, pools, expansions, normals })
    }

    /// The same geometry with every edge weight replaced by 1.
    pub fn with_unit_edge_weights(&self) -> Result<Self> {
        let mut out = self.clone();
        for g in &mut out.graphs {
            g.edges.iter_mut().for_each(|e| e.weight = 1.0);
        }
        out.tensors = out.graphs.iter().map(GraphTensors::from_graph).collect::<Result<Vec<_>, _>>()?;
        Ok(out)
    }

    pub fn depth(&self) -> usize {
        self.hierarchy.depth()
    }

    pub fn point_count(&self) -> usize {
        self.cloud.len()
    }

    /// Per-face input features for one incident wave.
    pub fn features(&self, wave: &IncidentWave, include_coordinates: bool) -> Tensor {
        let g = &self.graphs[0];
        let (k, pol) = (wave.propagation(), wave.polarization());
        let cols = BASE_FEATURES + if include_coordinates { 3 } else { 0 };
        let mut data = Vec::with_capacity(self.point_count() * cols);
        for i in 0..self.point_count() {
            let p = self.cloud.points[i];
            let e = wave.electric_field(&p);
            data.extend(e.iter().map(|c| c.re));
            data.extend(e.iter().map(|c| c.im));
            data.extend(self.cloud.normals[i].iter());
            data.push(g.density_norm[i]);
            data.push(g.curvature[i]);
            data.extend(k.iter());
            data.extend(pol.iter());
            if include_coordinates {
                data.extend(p.iter());
            }
        }
        Tensor::matrix(self.point_count(), cols, data).expect("features are finite")
    }
}

/// Removes the normal component of the real and imaginary current parts.
struct TangentialProjection {
    normals: Arc<Vec<Vec3>>,
}

impl TangentialProjection {
    fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        for (row, n) in out.data_mut().chunks_exact_mut(6).zip(self.normals.iter()) {
            for part in 0..2 {
                let v = Vec3::new(row[part], row[2 + part], row[4 + part]);
                let t = v - n * n.dot(&v);
                row[part] = t.x;
                row[2 + part] = t.y;
                row[4 + part] = t.z;
            }
        }
        out
    }
}

impl CustomOp for TangentialProjection {
    fn name(&self) -> &str {
        "tangential_projection"
    }

    fn forward(&self, inputs: &[&Tensor]) -> crate::nn::Result<Tensor> {
        let x = inputs[0];
        if x.cols() != 6 || x.rows() != self.normals.len() {
            return Err(NnError::Shape(format!("projection of {:?} onto {} faces", x.shape(), self.normals.len())));
        }
        Ok(self.apply(x))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        vec![self.apply(grad)]
    }
}

#[derive(Clone, Debug)]
struct LevelBlocks {
    density: Ffn2,
    normal: Ffn2,
    fuse: Linear,
    gat: GatLayer,
    bn1: BatchNorm,
    gcn1: GcnLayer,
    bn2: BatchNorm,
    gcn2: GcnLayer,
    out: Linear,
    attention: MultiHeadAttention,
    ffn: Ffn2,
}

/// Model parameters plus the layer wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    blocks: Vec<LevelBlocks>,
    expand: Vec<KpConv>,
    head: Linear,
}

/// Intermediate tensors of one forward pass.
pub struct ForwardTrace {
    pub output: Var,
    pub near: Vec<Var>,
    pub far: Vec<Var>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParameterStore::new();
        let w = config.width;
        let mut blocks = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let cin = if l == 0 { config.input_features() } else { w };
            let s = &mut store;
            let r = &mut rng;
            blocks.push(LevelBlocks {
                density: Ffn2::new(s, &format!("level{l}.density"), 1, config.density_hidden, 1, config.ffn_relu, r)?,
                normal: Ffn2::new(s, &format!("level{l}.normal"), 3, config.normal_hidden, 1, config.ffn_relu, r)?,
                fuse: Linear::new(s, &format!("level{l}.fuse"), 3 * cin, w, true, r)?,
                gat: GatLayer::new(s, &format!("level{l}.gat"), w, w, r)?,
                bn1: BatchNorm::new(s, &format!("level{l}.bn1"), w)?,
                gcn1: GcnLayer::new(s, &format!("level{l}.gcn1"), w, w, r)?,
                bn2: BatchNorm::new(s, &format!("level{l}.bn2"), w)?,
                gcn2: GcnLayer::new(s, &format!("level{l}.gcn2"), w, w, r)?,
                out: Linear::new(s, &format!("level{l}.linear"), w, w, true, r)?,
                attention: MultiHeadAttention::new(s, &format!("level{l}.translate"), w, config.heads, r)?,
                ffn: Ffn2::new(s, &format!("level{l}.translate_ffn"), w, w, w, true, r)?,
            });
        }
        let expand = (0..config.levels - 1)
            .map(|l| KpConv::new(&mut store, &format!("level{l}.expand"), config.kernel_count, w, w, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head = Linear::new(&mut store, "head", w, 6, true, &mut rng)?;
        Ok(Self { config, store, blocks, expand, head })
    }

    fn point_attention(&self, tape: &mut Tape, ctx: &GeometryContext, l: usize, x: Var) -> Result<Var> {
        let b = &self.blocks[l];
        let s = &self.store;
        let dn = tape.constant(ctx.density[l].clone());
        let scale = b.density.forward(tape, s, dn)?;
        let scaled = tape.mul_col(x, scale)?;
        let graph = &ctx.tensors[l];
        let dn = tape.constant(graph.normal_delta.clone());
        let logits = b.normal.forward(tape, s, dn)?;
        let alpha = tape.segment_softmax(logits, graph.attention.clone())?;
        let attended = tape.aggregate(alpha, x, graph.attention.clone())?;
        let cat = tape.concat_cols(&[x, scaled, attended])?;
        Ok(b.fuse.forward(tape, s, cat)?)
    }

    fn local_propagation(
        &self,
        tape: &mut Tape,
        ctx: &GeometryContext,
        l: usize,
        h: Var,
        training: bool,
    ) -> Result<Var> {
        let b = &self.blocks[l];
        let s = &self.store;
        let graph = &ctx.tensors[l];
        let edge = self.config.edge_constraint;
        let batch = (training || self.config.sample_statistics) && graph.node_count() >= 2;
        let (h, _) = b.gat.forward(tape, s, h, graph, edge)?;
        let h = b.bn1.forward(tape, s, h, batch)?;
        let h = tape.elu(h);
        let h = b.gcn1.forward(tape, s, h, graph, edge)?;
        let h = b.bn2.forward(tape, s, h, batch)?;
        let h = tape.elu(h);
        let h = b.gcn2.forward(tape, s, h, graph, edge)?;
        Ok(b.out.forward(tape, s, h)?)
    }

    fn translate(&self, tape: &mut Tape, l: usize, near: Var, expanded: Option<Var>) -> Result<Var> {
        let b = &self.blocks[l];
        let kv = match (expanded, self.config.kv_source) {
            (None, _) => near,
            (Some(e), KvSource::Sum) => tape.add(near, e)?,
            (Some(e), KvSource::Expanded) => e,
        };
        let (a, _) = b.attention.forward(tape, &self.store, near, kv)?;
        let f = b.ffn.forward(tape, &self.store, a)?;
        Ok(tape.add(a, f)?)
    }

    /// Records the forward pass; `input` holds the per-face features.
    pub fn forward(&self, tape: &mut Tape, ctx: &GeometryContext, input: Var, training: bool) -> Result<ForwardTrace> {
        self.forward_inner(tape, ctx, input, training, false)
    }

    pub(crate) fn forward_inner(
        &self,
        tape: &mut Tape,
        ctx: &GeometryContext,
        input: Var,
        training: bool,
        zero_skip: bool,
    ) -> Result<ForwardTrace> {
        let depth = ctx.depth();
        if depth > self.config.levels {
            return Err(ModelError::Inconsistent(format!(
                "geometry has {depth} levels, model has {}",
                self.config.levels
            )));
        }
        let x = tape.value(input);
        if x.rows() != ctx.point_count() || x.cols() != self.config.input_features() {
            return Err(ModelError::Inconsistent(format!(
                "input {:?}, expected [{}, {}]",
                x.shape(),
                ctx.point_count(),
                self.config.input_features()
            )));
        }
        let mut near = Vec::with_capacity(depth);
        let mut x = input;
        for l in 0..depth {
            let h = self.point_attention(tape, ctx, l, x)?;
            let h = self.local_propagation(tape, ctx, l, h, training)?;
            near.push(h);
            if l + 1 < depth {
                let (idx, w) = &ctx.pools[l];
                let wv = tape.constant(w.clone());
                x = tape.aggregate(wv, h, idx.clone())?;
            }
        }
        let mut far = vec![near[0]; depth];
        let mut expanded: Option<Var> = None;
        for l in (0..depth).rev() {
            let t = self.translate(tape, l, near[l], expanded)?;
            let up = if self.config.skip_connections {
                let skip = if zero_skip {
                    let n = tape.value(near[l]);
                    tape.constant(Tensor::zeros(n.rows(), n.cols()))
                } else {
                    near[l]
                };
                tape.add(t, skip)?
            } else {
                t
            };
            far[l] = up;
            if l > 0 {
                expanded = Some(self.expand[l - 1].forward(tape, &self.store, up, &ctx.expansions[l - 1])?);
            }
        }
        let raw = self.head.forward(tape, &self.store, far[0])?;
        let raw = tape.scale(raw, 1.0 / FREE_SPACE_IMPEDANCE);
        let projection = Arc::new(TangentialProjection { normals: ctx.normals.clone() });
        let output = tape.custom(projection, &[raw])?;
        Ok(ForwardTrace { output, near, far })
    }

    /// Inference: predicted tangential currents for one wave.
    pub fn predict(&self, ctx: &GeometryContext, wave: &IncidentWave) -> Result<SurfaceCurrentField> {
        let mut tape = Tape::new();
        let input = tape.constant(ctx.features(wave, self.config.include_coordinates));
        let trace = self.forward(&mut tape, ctx, input, false)?;
        Ok(channels_to_field(tape.value(trace.output)))
    }

    pub fn save<W: std::io::Write>(&self, out: W) -> Result<()> {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        Ok(self.store.save(&config, out)?)
    }

    /// Rebuilds the model from its recorded config and loads the parameters.
    pub fn load<R: std::io::Read>(input: R) -> Result<Self> {
        let (store, config) = ParameterStore::load(input)?;
        let config: ModelConfig =
            serde_json::from_str(&config).map_err(|e| NnError::Checkpoint(format!("config record: {e}")))?;
        let mut model = Model::new(config)?;
        model.store.copy_values_from(&store)?;
        Ok(model)
    }
}

pub fn channels_to_field(t: &Tensor) -> SurfaceCurrentField {
    let rows: Vec<[f64; 6]> = t.data().chunks_exact(6).map(|c| c.try_into().expect("six channels")).collect();
    SurfaceCurrentField::from_channels(&rows)
}

pub fn field_to_channels(field: &SurfaceCurrentField) -> Tensor {
    let data: Vec<f64> = field.to_channels().into_iter().flatten().collect();
    Tensor::matrix(field.len(), 6, data).expect("currents are finite")
}

#[cfg(test)]
mod tests;
