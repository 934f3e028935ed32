//! Triangle meshes of PEC targets.
//!
//! A [`TriangleMesh`] owns its vertices and faces plus a per-face cache of
//! centroid, outward unit normal and area. Everything downstream (collocation
//! points, point clouds, graph attributes) reads from that cache, so faces are
//! validated once at construction and never mutated afterwards.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Faces with area at or below this are rejected as degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face} is degenerate (area {area:.3e} m^2)")]
    Degenerate { face: usize, area: f64 },
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange { face: usize, index: usize, count: usize },
    #[error("face {face} has {arity} vertices; only triangles are accepted")]
    NonTriangle { face: usize, arity: usize },
    #[error("edge ({a}, {b}) is shared by {count} faces")]
    NonManifoldEdge { a: usize, b: usize, count: usize },
    #[error("invalid shape parameters: {0}")]
    InvalidParameter(String),
    #[error("unsupported mesh format for {0}")]
    UnknownFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    centroids: Vec<Vec3>,
    normals: Vec<Vec3>,
    areas: Vec<f64>,
}

impl TriangleMesh {
    /// Validates indices and face areas and fills the per-face cache.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let count = vertices.len();
        let mut centroids = Vec::with_capacity(faces.len());
        let mut normals = Vec::with_capacity(faces.len());
        let mut areas = Vec::with_capacity(faces.len());
        for (face, tri) in faces.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= count) {
                return Err(GeometryError::IndexOutOfRange { face, index, count });
            }
            let [a, b, c] = tri.map(|i| vertices[i]);
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            if !(area > DEGENERATE_AREA) {
                return Err(GeometryError::Degenerate { face, area });
            }
            centroids.push((a + b + c) / 3.0);
            normals.push(cross / (2.0 * area));
            areas.push(area);
        }
        Ok(Self { vertices, faces, centroids, normals, areas })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn centroids(&self) -> &[Vec3] {
        &self.centroids
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        self.faces[face].map(|i| self.vertices[i])
    }

    pub fn total_area(&self) -> f64 {
        self.areas.iter().sum()
    }

    /// Undirected edges, each listed once as `(lo, hi)` vertex indices.
    pub fn unique_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> =
            self.faces.iter().flat_map(|f| (0..3).map(move |k| ordered(f[k], f[(k + 1) % 3]))).collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.unique_edges();
        let total: f64 = edges.iter().map(|&(a, b)| (self.vertices[a] - self.vertices[b]).norm()).sum();
        total / edges.len() as f64
    }

    /// Longest edge of each face.
    pub fn max_face_edges(&self) -> Vec<f64> {
        (0..self.face_count())
            .map(|f| {
                let [a, b, c] = self.face_vertices(f);
                (a - b).norm().max((b - c).norm()).max((c - a).norm())
            })
            .collect()
    }

    /// V - E + F over the vertices actually referenced by faces.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for &v in f {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.unique_edges().len() as i64 + self.faces.len() as i64
    }

    /// True when every edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        edge_face_map(&self.faces).values().all(|f| f.len() == 2)
    }

    /// Sum of area-weighted normals; vanishes for closed surfaces.
    pub fn area_weighted_normal_sum(&self) -> Vec3 {
        self.normals.iter().zip(&self.areas).fold(Vec3::zeros(), |acc, (n, a)| acc + n * *a)
    }

    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.vertices)
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        let vertices = self.vertices.iter().map(|v| v + offset).collect();
        Self::new(vertices, self.faces.clone()).expect("translation preserves validity")
    }

    pub fn rotated(&self, rotation: &Matrix3<f64>) -> Self {
        let vertices = self.vertices.iter().map(|v| rotation * v).collect();
        Self::new(vertices, self.faces.clone()).expect("rotation preserves validity")
    }

    /// Concatenates meshes without welding; components stay disjoint.
    pub fn merge(parts: &[TriangleMesh]) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for part in parts {
            let base = vertices.len();
            vertices.extend_from_slice(&part.vertices);
            faces.extend(part.faces.iter().map(|f| f.map(|i| i + base)));
        }
        Self::new(vertices, faces)
    }

    /// Applies a face permutation: face `i` of the result is face `order[i]`.
    pub fn permuted_faces(&self, order: &[usize]) -> Result<Self> {
        let faces = order.iter().map(|&i| self.faces[i]).collect();
        Self::new(self.vertices.clone(), faces)
    }
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn edge_face_map(faces: &[[usize; 3]]) -> BTreeMap<(usize, usize), Vec<usize>> {
    let mut map: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            map.entry(ordered(f[k], f[(k + 1) % 3])).or_default().push(fi);
        }
    }
    map
}

pub fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Face centroids with their normals and areas, one point per face.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub areas: Vec<f64>,
    pub features: Option<Vec<Vec<f64>>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sub-cloud in the order given by `indices`.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: indices.iter().map(|&i| self.normals[i]).collect(),
            areas: indices.iter().map(|&i| self.areas[i]).collect(),
            features: self.features.as_ref().map(|f| indices.iter().map(|&i| f[i].clone()).collect()),
        }
    }
}

pub fn to_point_cloud(mesh: &TriangleMesh) -> PointCloud {
    PointCloud {
        points: mesh.centroids.clone(),
        normals: mesh.normals.clone(),
        areas: mesh.areas.clone(),
        features: None,
    }
}

/// Interior edge shared by two faces.
#[derive(Clone, Debug, PartialEq)]
pub struct InteriorEdge {
    pub face_a: usize,
    pub face_b: usize,
    pub vertices: [usize; 2],
    pub length: f64,
}

/// Interior edges in ascending vertex-pair order; boundary edges are skipped.
pub fn rwg_edges(mesh: &TriangleMesh) -> Result<Vec<InteriorEdge>> {
    let mut out = Vec::new();
    for ((a, b), faces) in edge_face_map(&mesh.faces) {
        match faces.len() {
            1 => {}
            2 => out.push(InteriorEdge {
                face_a: faces[0],
                face_b: faces[1],
                vertices: [a, b],
                length: (mesh.vertices[a] - mesh.vertices[b]).norm(),
            }),
            count => return Err(GeometryError::NonManifoldEdge { a, b, count }),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshFormat {
    Off,
    Obj,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
            Some(ext) if ext == "off" => Ok(MeshFormat::Off),
            Some(ext) if ext == "obj" => Ok(MeshFormat::Obj),
            _ => Err(GeometryError::UnknownFormat(path.display().to_string())),
        }
    }
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh> {
    let file = std::fs::File::open(path)?;
    read_mesh(BufReader::new(file), format)
}

pub fn read_mesh<R: Read>(reader: R, format: MeshFormat) -> Result<TriangleMesh> {
    let lines: Vec<String> = BufReader::new(reader).lines().collect::<std::io::Result<_>>()?;
    let (vertices, faces) = match format {
        MeshFormat::Off => parse_off(&lines)?,
        MeshFormat::Obj => parse_obj(&lines)?,
    };
    TriangleMesh::new(vertices, faces)
}

fn parse_err(line: usize, message: impl Into<String>) -> GeometryError {
    GeometryError::Parse { line: line + 1, message: message.into() }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| parse_err(line, format!("expected a number, found `{tok}`")))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| parse_err(line, format!("expected an index, found `{tok}`")))
}

type RawMesh = (Vec<Vec3>, Vec<[usize; 3]>);

fn parse_off(lines: &[String]) -> Result<RawMesh> {
    // Tokens with comments stripped, tagged with their line number.
    let mut tokens = lines.iter().enumerate().flat_map(|(ln, l)| {
        let body = l.split('#').next().unwrap_or("");
        body.split_whitespace().map(move |t| (ln, t))
    });
    let (ln, head) = tokens.next().ok_or_else(|| parse_err(0, "empty file"))?;
    if head != "OFF" {
        return Err(parse_err(ln, format!("expected `OFF` header, found `{head}`")));
    }
    let mut next = |what: &str| {
        tokens
            .next()
            .ok_or_else(|| parse_err(lines.len().saturating_sub(1), format!("unexpected end of file, expected {what}")))
    };
    let (ln, t) = next("vertex count")?;
    let nv = parse_usize(t, ln)?;
    let (ln, t) = next("face count")?;
    let nf = parse_usize(t, ln)?;
    let (ln, t) = next("edge count")?;
    parse_usize(t, ln)?;

    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut p = [0.0; 3];
        for c in &mut p {
            let (ln, t) = next("vertex coordinate")?;
            *c = parse_f64(t, ln)?;
        }
        vertices.push(Vec3::from(p));
    }
    let mut faces = Vec::with_capacity(nf);
    for face in 0..nf {
        let (ln, t) = next("face arity")?;
        let arity = parse_usize(t, ln)?;
        if arity != 3 {
            return Err(GeometryError::NonTriangle { face, arity });
        }
        let mut f = [0usize; 3];
        for v in &mut f {
            let (ln, t) = next("face index")?;
            *v = parse_usize(t, ln)?;
        }
        faces.push(f);
    }
    Ok((vertices, faces))
}

fn parse_obj(lines: &[String]) -> Result<RawMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in lines.iter().enumerate() {
        let body = line.split('#').next().unwrap_or("");
        let mut toks = body.split_whitespace();
        match toks.next() {
            Some("v") => {
                let coords: Vec<f64> = toks.map(|t| parse_f64(t, ln)).collect::<Result<_>>()?;
                if coords.len() < 3 {
                    return Err(parse_err(ln, "vertex needs three coordinates"));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let refs: Vec<&str> = toks.collect();
                if refs.len() != 3 {
                    return Err(GeometryError::NonTriangle { face: faces.len(), arity: refs.len() });
                }
                let mut f = [0usize; 3];
                for (slot, r) in f.iter_mut().zip(&refs) {
                    let idx_tok = r.split('/').next().unwrap_or("");
                    let idx: i64 = idx_tok.parse().map_err(|_| parse_err(ln, format!("bad face reference `{r}`")))?;
                    let resolved = if idx > 0 {
                        idx - 1
                    } else if idx < 0 {
                        vertices.len() as i64 + idx
                    } else {
                        return Err(parse_err(ln, "face index 0 is invalid in OBJ"));
                    };
                    if resolved < 0 {
                        return Err(parse_err(ln, format!("face reference `{r}` out of range")));
                    }
                    *slot = resolved as usize;
                }
                faces.push(f);
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

/// Writes ASCII OFF. `comment` lines are emitted after the header.
pub fn write_off<W: Write>(mesh: &TriangleMesh, comment: Option<&str>, mut out: W) -> std::io::Result<()> {
    let mut s = String::from("OFF\n");
    if let Some(c) = comment {
        for line in c.lines() {
            let _ = writeln!(s, "# {line}");
        }
    }
    let _ = writeln!(s, "{} {} 0", mesh.vertices.len(), mesh.faces.len());
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out.write_all(s.as_bytes())
}

// ---------------------------------------------------------------------------
// Shape generators

/// Canonical targets. Base centers (or centroids for sphere, cube and plate)
/// sit at the origin; axes of revolution point along +z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapeSpec {
    Sphere {
        radius: f64,
    },
    Cube {
        side: f64,
    },
    Cone {
        radius: f64,
        height: f64,
    },
    Frustum {
        bottom_radius: f64,
        top_radius: f64,
        height: f64,
    },
    Cylinder {
        radius: f64,
        height: f64,
    },
    /// Open rectangular plate in the z = 0 plane with normal +z.
    Plate {
        width: f64,
        depth: f64,
    },
    Assembly {
        parts: Vec<PlacedShape>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacedShape {
    pub shape: ShapeSpec,
    #[serde(default)]
    pub offset: [f64; 3],
}

impl ShapeSpec {
    /// Cone on top of a cube, with a cylinder standing beside them.
    pub fn cone_cube_cylinder(scale: f64) -> ShapeSpec {
        ShapeSpec::Assembly {
            parts: vec![
                PlacedShape { shape: ShapeSpec::Cube { side: scale }, offset: [0.0, 0.0, 0.0] },
                PlacedShape {
                    shape: ShapeSpec::Cone { radius: 0.5 * scale, height: 0.8 * scale },
                    offset: [0.0, 0.0, 0.5 * scale + 0.1 * scale],
                },
                PlacedShape {
                    shape: ShapeSpec::Cylinder { radius: 0.3 * scale, height: scale },
                    offset: [1.2 * scale, 0.0, -0.5 * scale],
                },
            ],
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(GeometryError::InvalidParameter(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            ShapeSpec::Sphere { radius } => positive("radius", *radius),
            ShapeSpec::Cube { side } => positive("side", *side),
            ShapeSpec::Cone { radius, height } | ShapeSpec::Cylinder { radius, height } => {
                positive("radius", *radius)?;
                positive("height", *height)
            }
            ShapeSpec::Frustum { bottom_radius, top_radius, height } => {
                positive("bottom_radius", *bottom_radius)?;
                positive("top_radius", *top_radius)?;
                positive("height", *height)
            }
            ShapeSpec::Plate { width, depth } => {
                positive("width", *width)?;
                positive("depth", *depth)
            }
            ShapeSpec::Assembly { parts } => {
                if parts.is_empty() {
                    return Err(GeometryError::InvalidParameter("assembly has no parts".into()));
                }
                parts.iter().try_for_each(|p| p.shape.validate())
            }
        }
    }
}

/// Relative tolerance on the achieved mean edge length.
pub const EDGE_LENGTH_TOLERANCE: f64 = 0.25;

/// Meshes `spec` so that the mean edge length lands within
/// [`EDGE_LENGTH_TOLERANCE`] of `target_edge`.
pub fn generate_shape(spec: &ShapeSpec, target_edge: f64) -> Result<TriangleMesh> {
    if !(target_edge.is_finite() && target_edge > 0.0) {
        return Err(GeometryError::InvalidParameter(format!("target edge length must be positive, got {target_edge}")));
    }
    spec.validate()?;
    let mesh = match spec {
        ShapeSpec::Assembly { parts } => {
            let meshes = parts
                .iter()
                .map(|p| Ok(generate_shape(&p.shape, target_edge)?.translated(&Vec3::from(p.offset))))
                .collect::<Result<Vec<_>>>()?;
            TriangleMesh::merge(&meshes)?
        }
        _ => best_resolution(spec, target_edge)?,
    };
    let mean = mesh.mean_edge_length();
    if (mean - target_edge).abs() > EDGE_LENGTH_TOLERANCE * target_edge {
        return Err(GeometryError::InvalidParameter(format!(
            "cannot reach edge length {target_edge:.4e} m for {spec:?} (best mean {mean:.4e} m)"
        )));
    }
    Ok(mesh)
}

/// Tries a ladder of grid spacings and keeps the mesh whose mean edge is
/// closest to the target.
fn best_resolution(spec: &ShapeSpec, target: f64) -> Result<TriangleMesh> {
    let mut best: Option<(f64, TriangleMesh)> = None;
    let mut last_count = usize::MAX;
    for step in 0..=24 {
        let spacing = target * (0.5 + 0.05 * step as f64);
        let mesh = build_primitive(spec, spacing)?;
        let count = mesh.face_count();
        if count == last_count {
            continue;
        }
        last_count = count;
        let err = (mesh.mean_edge_length() - target).abs();
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, mesh));
        }
    }
    Ok(best.expect("at least one candidate").1)
}

fn segments(length: f64, spacing: f64) -> usize {
    ((length / spacing).round() as usize).max(1)
}

fn ring_segments(radius: f64, spacing: f64) -> usize {
    ((2.0 * std::f64::consts::PI * radius / spacing).round() as usize).max(3)
}

fn build_primitive(spec: &ShapeSpec, spacing: f64) -> Result<TriangleMesh> {
    match *spec {
        ShapeSpec::Sphere { radius } => sphere(radius, spacing),
        ShapeSpec::Cube { side } => cube(side, spacing),
        ShapeSpec::Cone { radius, height } => frustum(radius, 0.0, height, spacing),
        ShapeSpec::Frustum { bottom_radius, top_radius, height } => frustum(bottom_radius, top_radius, height, spacing),
        ShapeSpec::Cylinder { radius, height } => frustum(radius, radius, height, spacing),
        ShapeSpec::Plate { width, depth } => plate(width, depth, spacing),
        ShapeSpec::Assembly { .. } => unreachable!("assemblies are meshed part by part"),
    }
}

struct MeshBuilder {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    lookup: HashMap<[i64; 3], usize>,
    quantum: f64,
}

impl MeshBuilder {
    fn new(scale: f64) -> Self {
        Self { vertices: Vec::new(), faces: Vec::new(), lookup: HashMap::new(), quantum: scale * 1e-9 }
    }

    /// Returns the index of `p`, welding positions that agree to ~1e-9 of the scale.
    fn vertex(&mut self, p: Vec3) -> usize {
        let key = [p.x, p.y, p.z].map(|c| (c / self.quantum).round() as i64);
        if let Some(&i) = self.lookup.get(&key) {
            return i;
        }
        self.vertices.push(p);
        self.lookup.insert(key, self.vertices.len() - 1);
        self.vertices.len() - 1
    }

    fn triangle(&mut self, a: usize, b: usize, c: usize) {
        if a != b && b != c && a != c {
            self.faces.push([a, b, c]);
        }
    }

    /// Stitches two closed rings whose vertices are uniformly spaced in angle
    /// starting from angle zero. A ring of one vertex produces a fan.
    fn zip_rings(&mut self, a: &[usize], b: &[usize]) {
        let (na, nb) = (a.len(), b.len());
        let (mut i, mut j) = (0, 0);
        while i < na || j < nb {
            let next_a = (i + 1) as f64 / na as f64;
            let next_b = (j + 1) as f64 / nb as f64;
            if j < nb && (i >= na || next_b < next_a) {
                self.triangle(a[i % na], b[(j + 1) % nb], b[j % nb]);
                j += 1;
            } else {
                self.triangle(a[i % na], a[(i + 1) % na], b[j % nb]);
                i += 1;
            }
        }
    }

    fn ring(&mut self, radius: f64, z: f64, count: usize) -> Vec<usize> {
        if count == 1 || radius == 0.0 {
            return vec![self.vertex(Vec3::new(0.0, 0.0, z))];
        }
        (0..count)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                self.vertex(Vec3::new(radius * t.cos(), radius * t.sin(), z))
            })
            .collect()
    }

    /// Orients every face so its normal points away from `center`.
    fn finish_convex(mut self, center: Vec3) -> Result<TriangleMesh> {
        for f in &mut self.faces {
            let [a, b, c] = f.map(|i| self.vertices[i]);
            let n = (b - a).cross(&(c - a));
            if n.dot(&((a + b + c) / 3.0 - center)) < 0.0 {
                f.swap(1, 2);
            }
        }
        TriangleMesh::new(self.vertices, self.faces)
    }
}

fn sphere(radius: f64, spacing: f64) -> Result<TriangleMesh> {
    // Geodesic subdivision of an icosahedron with `n` segments per edge.
    let icosa_edge = 1.0515 * radius;
    let n = segments(icosa_edge, spacing);
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let base = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .map(Vec3::from);
    const ICOSA: [[usize; 3]; 20] = [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    let mut mb = MeshBuilder::new(radius);
    for tri in ICOSA {
        let [a, b, c] = tri.map(|i| base[i]);
        let mut grid = |i: usize, j: usize| {
            let p = a + (b - a) * (i as f64 / n as f64) + (c - a) * (j as f64 / n as f64);
            mb.vertex(p.normalize() * radius)
        };
        let mut tris = Vec::new();
        for i in 0..n {
            for j in 0..(n - i) {
                tris.push([grid(i, j), grid(i + 1, j), grid(i, j + 1)]);
                if i + j + 1 < n {
                    tris.push([grid(i + 1, j), grid(i + 1, j + 1), grid(i, j + 1)]);
                }
            }
        }
        for [p, q, r] in tris {
            mb.triangle(p, q, r);
        }
    }
    mb.finish_convex(Vec3::zeros())
}

fn cube(side: f64, spacing: f64) -> Result<TriangleMesh> {
    // Mean edge of a quad-split grid is about 1.14 times the grid step.
    let n = segments(1.138 * side, spacing);
    let h = side / 2.0;
    let mut mb = MeshBuilder::new(side);
    let axes = [Vec3::x(), Vec3::y(), Vec3::z()];
    for (k, normal) in axes.iter().enumerate() {
        let u = axes[(k + 1) % 3];
        let v = axes[(k + 2) % 3];
        for sign in [-1.0, 1.0] {
            let origin = normal * (sign * h) - u * h - v * h;
            let idx = |mb: &mut MeshBuilder, i: usize, j: usize| {
                mb.vertex(origin + u * (side * i as f64 / n as f64) + v * (side * j as f64 / n as f64))
            };
            for i in 0..n {
                for j in 0..n {
                    let a = idx(&mut mb, i, j);
                    let b = idx(&mut mb, i + 1, j);
                    let c = idx(&mut mb, i + 1, j + 1);
                    let d = idx(&mut mb, i, j + 1);
                    mb.triangle(a, b, c);
                    mb.triangle(a, c, d);
                }
            }
        }
    }
    mb.finish_convex(Vec3::zeros())
}

/// Closed frustum with the base on z = 0; a zero top radius gives a cone.
fn frustum(bottom: f64, top: f64, height: f64, spacing: f64) -> Result<TriangleMesh> {
    let mut mb = MeshBuilder::new(bottom.max(top).max(height));
    let slant = ((bottom - top).powi(2) + height * height).sqrt();
    let ns = segments(slant, spacing);
    let mut rings: Vec<Vec<usize>> = Vec::with_capacity(ns + 1);
    for k in 0..=ns {
        let t = k as f64 / ns as f64;
        let r = bottom + (top - bottom) * t;
        let count = if r <= 0.0 { 1 } else { ring_segments(r, spacing) };
        rings.push(mb.ring(r, height * t, count));
    }
    for w in rings.windows(2) {
        mb.zip_rings(&w[0], &w[1]);
    }
    let bottom_ring = rings[0].clone();
    disc(&mut mb, bottom, 0.0, bottom_ring, spacing);
    if top > 0.0 {
        let top_ring = rings[ns].clone();
        disc(&mut mb, top, height, top_ring, spacing);
    }
    let center = Vec3::new(0.0, 0.0, height / 3.0);
    mb.finish_convex(center)
}

/// Fills a planar disc bounded by `outer` (already in the builder).
fn disc(mb: &mut MeshBuilder, radius: f64, z: f64, outer: Vec<usize>, spacing: f64) {
    let nr = segments(radius, spacing);
    let mut prev = outer;
    for k in 1..=nr {
        let r = radius * (1.0 - k as f64 / nr as f64);
        let count = if k == nr { 1 } else { ring_segments(r, spacing) };
        let ring = mb.ring(r, z, count);
        mb.zip_rings(&prev, &ring);
        prev = ring;
    }
}

fn plate(width: f64, depth: f64, spacing: f64) -> Result<TriangleMesh> {
    let nx = segments(1.138 * width, spacing);
    let ny = segments(1.138 * depth, spacing);
    let mut mb = MeshBuilder::new(width.max(depth));
    let at = |mb: &mut MeshBuilder, i: usize, j: usize| {
        mb.vertex(Vec3::new(
            -width / 2.0 + width * i as f64 / nx as f64,
            -depth / 2.0 + depth * j as f64 / ny as f64,
            0.0,
        ))
    };
    for j in 0..ny {
        for i in 0..nx {
            let a = at(&mut mb, i, j);
            let b = at(&mut mb, i + 1, j);
            let c = at(&mut mb, i + 1, j + 1);
            let d = at(&mut mb, i, j + 1);
            // Counter-clockwise seen from +z.
            mb.triangle(a, b, c);
            mb.triangle(a, c, d);
        }
    }
    TriangleMesh::new(mb.vertices, mb.faces)
}
