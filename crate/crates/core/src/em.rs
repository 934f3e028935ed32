//! Frequency-domain EFIE reference solver for PEC surfaces.
//!
//! Unknowns are three Cartesian current components per face (pulse basis),
//! tested by point matching at face centroids. Time convention is `e^{jωt}`.
//! Rows enforce the tangential EFIE; the diagonal block also carries a normal
//! row so that the solved current has no normal component.
//!
//! Interactions between well separated faces use one-point centroid
//! quadrature. Neighbouring and self interactions integrate the constant
//! current over the source triangle exactly in the dyadic sense: the scalar
//! kernel over the area plus a boundary line integral for the `∇∇` part.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, Read, Write};
use std::num::NonZeroUsize;
use std::sync::{Arc, LazyLock};
use std::time::Instant;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{TriangleMesh, Vec3};

pub type C64 = Complex64;
pub type CVec3 = Vector3<C64>;
pub type CMat3 = Matrix3<C64>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const FREE_SPACE_IMPEDANCE: f64 = 376.730_313_668;
pub const RCS_FLOOR_DBSM: f64 = -200.0;
/// Source faces closer than this multiple of the larger face edge are
/// integrated over their area instead of treated as point sources.
pub const NEAR_FIELD_FACTOR: f64 = 2.0;
/// Relative residual above which a solve is reported as failed.
pub const MAX_RELATIVE_RESIDUAL: f64 = 1e-8;
const SINGULAR_PIVOT_RATIO: f64 = 1e-13;
const J: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Error)]
pub enum EmError {
    #[error("invalid incident wave: {0}")]
    InvalidWave(String),
    #[error("observation and source points coincide")]
    Coincident,
    #[error("impedance matrix is singular (pivot ratio {pivot_ratio:.3e})")]
    Singular { pivot_ratio: f64 },
    #[error("solve did not converge (relative residual {residual:.3e})")]
    NonConvergence { residual: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("Mie series needs 0.1 < ka < 50, got ka = {0:.4}")]
    MieRange(f64),
    #[error("Mie series not converged: {0:.3e} dB change with five extra terms")]
    MieNonConvergence(f64),
    #[error("invalid angle sweep: {0}")]
    InvalidSweep(String),
    #[error("malformed CSV at line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Incident plane wave

/// Unit vectors `(r̂, θ̂, φ̂)` at polar angle `theta` and azimuth `phi` (radians).
pub fn spherical_basis(theta: f64, phi: f64) -> (Vec3, Vec3, Vec3) {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (Vec3::new(st * cp, st * sp, ct), Vec3::new(ct * cp, ct * sp, -st), Vec3::new(-sp, cp, 0.0))
}

/// Plane wave arriving from direction `(θ, φ)`, polarized along `θ̂`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WaveParams", into = "WaveParams")]
pub struct IncidentWave {
    frequency: f64,
    amplitude: f64,
    theta_deg: f64,
    phi_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveParams {
    pub frequency_hz: f64,
    pub amplitude: f64,
    pub theta_deg: f64,
    pub phi_deg: f64,
}

impl TryFrom<WaveParams> for IncidentWave {
    type Error = EmError;
    fn try_from(p: WaveParams) -> Result<Self> {
        IncidentWave::new(p.frequency_hz, p.amplitude, p.theta_deg, p.phi_deg)
    }
}

impl From<IncidentWave> for WaveParams {
    fn from(w: IncidentWave) -> Self {
        WaveParams { frequency_hz: w.frequency, amplitude: w.amplitude, theta_deg: w.theta_deg, phi_deg: w.phi_deg }
    }
}

impl IncidentWave {
    /// Amplitude may be zero (a silent wave); negative values are rejected.
    pub fn new(frequency: f64, amplitude: f64, theta_deg: f64, phi_deg: f64) -> Result<Self> {
        if !(frequency.is_finite() && frequency > 0.0) {
            return Err(EmError::InvalidWave(format!("frequency must be positive, got {frequency}")));
        }
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(EmError::InvalidWave(format!("amplitude must be non-negative, got {amplitude}")));
        }
        if !(0.0..=180.0).contains(&theta_deg) {
            return Err(EmError::InvalidWave(format!("theta must lie in [0, 180] degrees, got {theta_deg}")));
        }
        if !(0.0..360.0).contains(&phi_deg) {
            return Err(EmError::InvalidWave(format!("phi must lie in [0, 360) degrees, got {phi_deg}")));
        }
        Ok(Self { frequency, amplitude, theta_deg, phi_deg })
    }

    pub fn with_angles(&self, theta_deg: f64, phi_deg: f64) -> Result<Self> {
        Self::new(self.frequency, self.amplitude, theta_deg, phi_deg)
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn theta_deg(&self) -> f64 {
        self.theta_deg
    }

    pub fn phi_deg(&self) -> f64 {
        self.phi_deg
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI * self.frequency / SPEED_OF_LIGHT
    }

    fn basis(&self) -> (Vec3, Vec3, Vec3) {
        spherical_basis(self.theta_deg.to_radians(), self.phi_deg.to_radians())
    }

    /// Propagation direction `k̂ = -r̂(θ, φ)`.
    pub fn propagation(&self) -> Vec3 {
        -self.basis().0
    }

    pub fn polarization(&self) -> Vec3 {
        self.basis().1
    }

    pub fn electric_field(&self, p: &Vec3) -> CVec3 {
        let phase = C64::from_polar(self.amplitude, -self.wavenumber() * self.propagation().dot(p));
        self.polarization().map(|c| phase * c)
    }

    pub fn magnetic_field(&self, p: &Vec3) -> CVec3 {
        let h = self.propagation().cross(&self.polarization()) / FREE_SPACE_IMPEDANCE;
        let phase = C64::from_polar(self.amplitude, -self.wavenumber() * self.propagation().dot(p));
        h.map(|c| phase * c)
    }
}

// ---------------------------------------------------------------------------
// Kernels

/// Scalar free-space Green's function `e^{-jkR} / (4πR)`.
pub fn green_scalar(p: &Vec3, q: &Vec3, k: f64) -> Result<C64> {
    let r = (p - q).norm();
    if r <= coincidence_tolerance(p, q) {
        return Err(EmError::Coincident);
    }
    Ok(C64::from_polar(1.0 / (4.0 * PI * r), -k * r))
}

fn coincidence_tolerance(p: &Vec3, q: &Vec3) -> f64 {
    1e-14 * p.norm().max(q.norm()).max(1.0)
}

/// Dyadic Green's function `(I + ∇∇/k²) g` between observation `p` and source `q`.
pub fn green_dyadic(p: &Vec3, q: &Vec3, k: f64) -> Result<CMat3> {
    let d = p - q;
    let r = d.norm();
    if r <= coincidence_tolerance(p, q) {
        return Err(EmError::Coincident);
    }
    Ok(dyadic_unchecked(&d, r, k))
}

fn dyadic_unchecked(d: &Vec3, r: f64, k: f64) -> CMat3 {
    let g = C64::from_polar(1.0 / (4.0 * PI * r), -k * r);
    let kr = k * r;
    let inv = 1.0 / kr;
    let a = g * C64::new(1.0 - inv * inv, -inv);
    let b = g * C64::new(1.0 - 3.0 * inv * inv, -3.0 * inv);
    let u = d / r;
    let mut m = CMat3::zeros();
    for i in 0..3 {
        for jj in 0..3 {
            let diag = if i == jj { a } else { C64::new(0.0, 0.0) };
            m[(i, jj)] = diag - b * (u[i] * u[jj]);
        }
    }
    m
}

/// `jkη₀`, the factor between the dyadic integral and the scattered field.
pub fn efie_prefactor(k: f64) -> C64 {
    C64::new(0.0, k * FREE_SPACE_IMPEDANCE)
}

// ---------------------------------------------------------------------------
// Quadrature helpers

/// `n`-point Gauss-Legendre rule mapped to [0, 1].
fn gauss_legendre_unit(n: usize) -> Vec<(f64, f64)> {
    GaussLegendre::new(NonZeroUsize::new(n).expect("positive order"))
        .as_node_weight_pairs()
        .iter()
        .map(|&(x, w)| (0.5 * (1.0 + x), 0.5 * w))
        .collect()
}

static GL4_UNIT: LazyLock<Vec<(f64, f64)>> = LazyLock::new(|| gauss_legendre_unit(4));
static GL16_UNIT: LazyLock<Vec<(f64, f64)>> = LazyLock::new(|| gauss_legendre_unit(16));

const AREA_SUBDIVISION: usize = 4;

struct FaceQuadrature {
    centroid: Vec3,
    normal: Vec3,
    area: f64,
    max_edge: f64,
    vertices: [Vec3; 3],
    /// Sub-triangle centroids; each carries `area / count`.
    area_points: Vec<Vec3>,
    /// Boundary points with `(weight, outward in-plane normal)`.
    edge_points: Vec<(Vec3, f64, Vec3)>,
}

impl FaceQuadrature {
    fn new(mesh: &TriangleMesh, f: usize) -> Self {
        let vertices = mesh.face_vertices(f);
        let centroid = mesh.centroids()[f];
        let normal = mesh.normals()[f];
        let n = AREA_SUBDIVISION;
        let [a, b, c] = vertices;
        let grid = |i: usize, j: usize| a + (b - a) * (i as f64 / n as f64) + (c - a) * (j as f64 / n as f64);
        let mut area_points = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..(n - i) {
                area_points.push((grid(i, j) + grid(i + 1, j) + grid(i, j + 1)) / 3.0);
                if i + j + 1 < n {
                    area_points.push((grid(i + 1, j) + grid(i + 1, j + 1) + grid(i, j + 1)) / 3.0);
                }
            }
        }
        let mut edge_points = Vec::with_capacity(12);
        let mut max_edge: f64 = 0.0;
        for e in 0..3 {
            let p0 = vertices[e];
            let p1 = vertices[(e + 1) % 3];
            let t = p1 - p0;
            let len = t.norm();
            max_edge = max_edge.max(len);
            let mut nu = t.cross(&normal).normalize();
            if nu.dot(&((p0 + p1) / 2.0 - centroid)) < 0.0 {
                nu = -nu;
            }
            for &(x, w) in GL4_UNIT.iter() {
                edge_points.push((p0 + t * x, w * len, nu));
            }
        }
        Self { centroid, normal, area: mesh.areas()[f], max_edge, vertices, area_points, edge_points }
    }

    /// `∫_T g(p, r') dA'` for `p` off the triangle's centroid.
    fn scalar_integral(&self, p: &Vec3, k: f64) -> C64 {
        let w = self.area / self.area_points.len() as f64;
        self.area_points
            .iter()
            .map(|q| {
                let r = (p - q).norm();
                C64::from_polar(w / (4.0 * PI * r), -k * r)
            })
            .sum()
    }

    /// `∫_T g(c, r') dA'` at the triangle's own centroid, in polar form.
    fn self_scalar_integral(&self, k: f64) -> C64 {
        let mut sum = C64::new(0.0, 0.0);
        for e in 0..3 {
            let a = self.vertices[e];
            let edge = self.vertices[(e + 1) % 3] - a;
            for &(t, w) in GL16_UNIT.iter() {
                let q = a + edge * t - self.centroid;
                let rho2 = q.norm_squared();
                let dphi = q.cross(&edge).norm() / rho2;
                let rho = rho2.sqrt();
                let radial = (C64::new(1.0, 0.0) - C64::from_polar(1.0, -k * rho)) / (4.0 * PI * J * k);
                sum += radial * (w * dphi);
            }
        }
        sum
    }

    /// `(1/k²) ∮ (1 + jkR) e^{-jkR} / (4πR²) R̂ ν^T dl'` with `R̂` from source to `p`.
    fn line_term(&self, p: &Vec3, k: f64) -> CMat3 {
        let mut m = CMat3::zeros();
        for (q, w, nu) in &self.edge_points {
            let d = p - q;
            let r = d.norm();
            let u = d / r;
            let s = C64::new(1.0, k * r) * C64::from_polar(w / (4.0 * PI * r * r * k * k), -k * r);
            for i in 0..3 {
                for jj in 0..3 {
                    m[(i, jj)] += s * (u[i] * nu[jj]);
                }
            }
        }
        m
    }
}

fn tangential_projector(n: &Vec3) -> Matrix3<f64> {
    Matrix3::identity() - n * n.transpose()
}

fn real_times(a: &Matrix3<f64>, b: &CMat3) -> CMat3 {
    let ac = a.map(|x| C64::new(x, 0.0));
    ac * b
}

/// One 3×3 block of the impedance matrix: row face `m`, column face `k`.
fn impedance_block(faces: &[FaceQuadrature], m: usize, src: usize, k: f64) -> CMat3 {
    let obs = &faces[m];
    let s = &faces[src];
    let p = obs.centroid;
    let proj = tangential_projector(&obs.normal);
    let pref = efie_prefactor(k);
    if m == src {
        let scalar = s.self_scalar_integral(k);
        let inner = CMat3::from_diagonal_element(scalar) + s.line_term(&p, k);
        let tangential = real_times(&proj, &inner);
        let normal_coeff = (tangential * real_times(&proj, &CMat3::identity())).trace() / 2.0;
        let nn = (obs.normal * obs.normal.transpose()).map(|x| C64::new(x, 0.0));
        return (tangential + nn * normal_coeff) * pref;
    }
    let d = p - s.centroid;
    let r = d.norm();
    // Structured meshes put many pairs exactly on the threshold; the slack
    // keeps their classification independent of rounding in the positions.
    let inner = if r < NEAR_FIELD_FACTOR * obs.max_edge.max(s.max_edge) * (1.0 + 1e-9) {
        CMat3::from_diagonal_element(s.scalar_integral(&p, k)) + s.line_term(&p, k)
    } else {
        dyadic_unchecked(&d, r, k) * C64::new(s.area, 0.0)
    };
    real_times(&proj, &inner) * pref
}

/// Dense `3N × 3N` impedance matrix; unknown `3f + c` is component `c` on face `f`.
pub fn assemble_impedance(mesh: &TriangleMesh, k: f64) -> DMatrix<C64> {
    let n = mesh.face_count();
    let dim = 3 * n;
    let faces: Vec<FaceQuadrature> = (0..n).map(|f| FaceQuadrature::new(mesh, f)).collect();
    let mut z = DMatrix::<C64>::zeros(dim, dim);
    // Column-major storage: three consecutive columns per source face.
    z.as_mut_slice().par_chunks_mut(3 * dim).enumerate().for_each(|(src, cols)| {
        for m in 0..n {
            let block = impedance_block(&faces, m, src, k);
            for c in 0..3 {
                for r in 0..3 {
                    cols[c * dim + 3 * m + r] = block[(r, c)];
                }
            }
        }
    });
    z
}

/// Tangential incident field at each centroid, in unknown order.
pub fn excitation(mesh: &TriangleMesh, wave: &IncidentWave) -> DVector<C64> {
    let mut v = DVector::zeros(3 * mesh.face_count());
    for (f, (p, n)) in mesh.centroids().iter().zip(mesh.normals()).enumerate() {
        let e = wave.electric_field(p);
        let en = e.dot(&n.map(|x| C64::new(x, 0.0)));
        for c in 0..3 {
            v[3 * f + c] = e[c] - en * n[c];
        }
    }
    v
}

/// Impedance matrix plus the excitation of one incident wave.
#[derive(Clone, Debug)]
pub struct ImpedanceSystem {
    pub impedance: Arc<DMatrix<C64>>,
    pub excitation: DVector<C64>,
    pub wavenumber: f64,
}

pub fn assemble_system(mesh: &TriangleMesh, wave: &IncidentWave) -> ImpedanceSystem {
    let limit = wave.wavelength() / 5.0;
    let mean = mesh.mean_edge_length();
    if mean > limit {
        log::warn!("mean edge {mean:.4e} m exceeds lambda/5 = {limit:.4e} m; expect reduced accuracy");
    }
    ImpedanceSystem {
        impedance: Arc::new(assemble_impedance(mesh, wave.wavenumber())),
        excitation: excitation(mesh, wave),
        wavenumber: wave.wavenumber(),
    }
}

// ---------------------------------------------------------------------------
// Dense solve

/// LU factors of an impedance matrix, reusable across right-hand sides.
pub struct FactorizedSystem {
    impedance: Arc<DMatrix<C64>>,
    lu: nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl FactorizedSystem {
    pub fn new(impedance: Arc<DMatrix<C64>>) -> Result<Self> {
        if !impedance.is_square() {
            return Err(EmError::Dimension { expected: impedance.nrows(), actual: impedance.ncols() });
        }
        let lu = impedance.as_ref().clone().lu();
        let diag = lu.u().diagonal().map(|d| d.norm());
        let max = diag.max();
        let min = diag.min();
        let pivot_ratio = if max > 0.0 { min / max } else { 0.0 };
        if !(pivot_ratio > SINGULAR_PIVOT_RATIO) {
            return Err(EmError::Singular { pivot_ratio });
        }
        Ok(Self { impedance, lu })
    }

    pub fn impedance(&self) -> &Arc<DMatrix<C64>> {
        &self.impedance
    }

    /// Solves `Z I = V` with up to three steps of iterative refinement.
    /// Returns the solution and its relative residual.
    pub fn solve(&self, v: &DVector<C64>) -> Result<(DVector<C64>, f64)> {
        let dim = self.impedance.nrows();
        if v.len() != dim {
            return Err(EmError::Dimension { expected: dim, actual: v.len() });
        }
        let vnorm = v.norm();
        if vnorm == 0.0 {
            return Ok((DVector::zeros(dim), 0.0));
        }
        let mut x = self.lu.solve(v).ok_or(EmError::Singular { pivot_ratio: 0.0 })?;
        let mut residual = v - self.impedance.as_ref() * &x;
        let mut rel = residual.norm() / vnorm;
        for _ in 0..3 {
            if rel <= 1e-13 {
                break;
            }
            let dx = self.lu.solve(&residual).ok_or(EmError::Singular { pivot_ratio: 0.0 })?;
            x += dx;
            residual = v - self.impedance.as_ref() * &x;
            rel = residual.norm() / vnorm;
        }
        if !(rel <= MAX_RELATIVE_RESIDUAL) {
            return Err(EmError::NonConvergence { residual: rel });
        }
        Ok((x, rel))
    }
}

/// Currents plus the relative residual they achieved.
#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub currents: SurfaceCurrentField,
    pub relative_residual: f64,
}

pub fn solve_currents(system: &ImpedanceSystem) -> Result<OracleSolution> {
    let fact = FactorizedSystem::new(system.impedance.clone())?;
    let (x, relative_residual) = fact.solve(&system.excitation)?;
    Ok(OracleSolution { currents: SurfaceCurrentField::from_dvector(&x), relative_residual })
}

/// Assemble, factor and solve in one go; also reports wall time in seconds.
pub fn solve_scattering(mesh: &TriangleMesh, wave: &IncidentWave) -> Result<(OracleSolution, f64)> {
    let start = Instant::now();
    let system = assemble_system(mesh, wave);
    let sol = solve_currents(&system)?;
    Ok((sol, start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// Currents

/// Complex current density (A/m) per face.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceCurrentField {
    currents: Vec<CVec3>,
}

impl SurfaceCurrentField {
    pub fn new(currents: Vec<CVec3>) -> Self {
        Self { currents }
    }

    pub fn zeros(n: usize) -> Self {
        Self { currents: vec![CVec3::zeros(); n] }
    }

    pub fn len(&self) -> usize {
        self.currents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.currents.is_empty()
    }

    pub fn currents(&self) -> &[CVec3] {
        &self.currents
    }

    pub fn from_dvector(x: &DVector<C64>) -> Self {
        Self { currents: x.as_slice().chunks_exact(3).map(|c| CVec3::new(c[0], c[1], c[2])).collect() }
    }

    pub fn to_dvector(&self) -> DVector<C64> {
        DVector::from_iterator(3 * self.len(), self.currents.iter().flat_map(|c| c.iter().copied()))
    }

    /// Channel order: Re Jx, Im Jx, Re Jy, Im Jy, Re Jz, Im Jz.
    pub fn to_channels(&self) -> Vec<[f64; 6]> {
        self.currents.iter().map(|c| [c.x.re, c.x.im, c.y.re, c.y.im, c.z.re, c.z.im]).collect()
    }

    pub fn from_channels(rows: &[[f64; 6]]) -> Self {
        Self {
            currents: rows
                .iter()
                .map(|r| CVec3::new(C64::new(r[0], r[1]), C64::new(r[2], r[3]), C64::new(r[4], r[5])))
                .collect(),
        }
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.currents.iter().map(|c| c.norm()).collect()
    }

    /// Removes the component along each face normal.
    pub fn project_tangential(&self, mesh: &TriangleMesh) -> Self {
        Self {
            currents: self
                .currents
                .iter()
                .zip(mesh.normals())
                .map(|(j, n)| {
                    let nc = n.map(|x| C64::new(x, 0.0));
                    j - nc * j.dot(&nc)
                })
                .collect(),
        }
    }

    /// Largest `|n̂·J| / max|J|` over all faces.
    pub fn max_normal_fraction(&self, mesh: &TriangleMesh) -> f64 {
        let scale = self.currents.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        self.currents
            .iter()
            .zip(mesh.normals())
            .map(|(j, n)| j.dot(&n.map(|x| C64::new(x, 0.0))).norm() / scale)
            .fold(0.0, f64::max)
    }
}

/// Physical-optics currents `2 n̂ × H_inc` on lit faces, zero in shadow.
pub fn physical_optics(mesh: &TriangleMesh, wave: &IncidentWave) -> SurfaceCurrentField {
    let khat = wave.propagation();
    SurfaceCurrentField::new(
        mesh.centroids()
            .iter()
            .zip(mesh.normals())
            .map(|(p, n)| {
                if n.dot(&khat) < 0.0 {
                    let h = wave.magnetic_field(p);
                    n.map(|x| C64::new(2.0 * x, 0.0)).cross(&h)
                } else {
                    CVec3::zeros()
                }
            })
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Far field and RCS

/// Ordered list of observation directions `(θ, φ)` in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleSweep {
    points: Vec<[f64; 2]>,
}

impl AngleSweep {
    /// Cut at fixed `phi`, from `start` to `stop` inclusive.
    pub fn theta_cut(phi_deg: f64, start: f64, stop: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) || !(stop >= start) {
            return Err(EmError::InvalidSweep(format!(
                "need step > 0 and stop >= start (start {start}, stop {stop}, step {step})"
            )));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Self::from_points((0..count).map(|i| [start + step * i as f64, phi_deg]).collect())
    }

    /// Points must be ordered by `(φ, θ)` and lie in the valid ranges.
    pub fn from_points(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.is_empty() {
            return Err(EmError::InvalidSweep("no observation angles".into()));
        }
        for p in &points {
            if !(0.0..=180.0 + 1e-9).contains(&p[0]) || !(0.0..360.0).contains(&p[1]) {
                return Err(EmError::InvalidSweep(format!("angle ({}, {}) out of range", p[0], p[1])));
            }
        }
        let ordered = points.windows(2).all(|w| (w[0][1], w[0][0]) < (w[1][1], w[1][0]));
        if !ordered {
            return Err(EmError::InvalidSweep("angles must be strictly increasing in (phi, theta)".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn directions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().map(|p| spherical_basis(p[0].to_radians(), p[1].to_radians()).0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcsProfile {
    pub angles: Vec<[f64; 2]>,
    pub sigma_dbsm: Vec<f64>,
}

/// Far-field amplitude `F(r̂)` with `E_s ≈ F e^{-jkr}/r`.
pub fn radiated_field(currents: &SurfaceCurrentField, mesh: &TriangleMesh, wave: &IncidentWave, rhat: &Vec3) -> CVec3 {
    let k = wave.wavenumber();
    let mut sum = CVec3::zeros();
    for ((j, p), a) in currents.currents().iter().zip(mesh.centroids()).zip(mesh.areas()) {
        sum += j * C64::from_polar(*a, k * rhat.dot(p));
    }
    let rc = rhat.map(|x| C64::new(x, 0.0));
    let transverse = sum - rc * rc.dot(&sum);
    transverse * (-J * k * FREE_SPACE_IMPEDANCE / (4.0 * PI))
}

/// Time-averaged power radiated by `currents`, `∮ ‖F‖² dΩ / (2η₀)`, with
/// Gauss-Legendre nodes in `cos θ` and `2·order` uniform azimuths.
pub fn radiated_power(currents: &SurfaceCurrentField, mesh: &TriangleMesh, wave: &IncidentWave, order: usize) -> f64 {
    let order = NonZeroUsize::new(order.max(1)).expect("positive");
    let n_phi = 2 * order.get();
    let rule = GaussLegendre::new(order);
    let ring = |mu: f64| {
        let s = (1.0 - mu * mu).max(0.0).sqrt();
        (0..n_phi)
            .map(|i| {
                let phi = 2.0 * PI * i as f64 / n_phi as f64;
                let r = Vec3::new(s * phi.cos(), s * phi.sin(), mu);
                radiated_field(currents, mesh, wave, &r).norm_squared()
            })
            .sum::<f64>()
            * (2.0 * PI / n_phi as f64)
    };
    rule.integrate(-1.0, 1.0, ring) / (2.0 * FREE_SPACE_IMPEDANCE)
}

pub fn to_dbsm(sigma: f64) -> f64 {
    if sigma > 0.0 {
        (10.0 * sigma.log10()).max(RCS_FLOOR_DBSM)
    } else {
        RCS_FLOOR_DBSM
    }
}

pub fn bistatic_rcs(
    currents: &SurfaceCurrentField,
    mesh: &TriangleMesh,
    wave: &IncidentWave,
    sweep: &AngleSweep,
) -> Result<RcsProfile> {
    if currents.len() != mesh.face_count() {
        return Err(EmError::Dimension { expected: mesh.face_count(), actual: currents.len() });
    }
    let e2 = wave.amplitude().powi(2);
    let sigma_dbsm = sweep
        .directions()
        .map(|r| {
            if e2 == 0.0 {
                return RCS_FLOOR_DBSM;
            }
            let f = radiated_field(currents, mesh, wave, &r);
            to_dbsm(4.0 * PI * f.norm_squared() / e2)
        })
        .collect();
    Ok(RcsProfile { angles: sweep.points().to_vec(), sigma_dbsm })
}

// ---------------------------------------------------------------------------
// Mie series for a PEC sphere

struct MieCoefficients {
    a: Vec<C64>,
    b: Vec<C64>,
}

fn mie_coefficients(x: f64, n_max: usize) -> MieCoefficients {
    // Riccati-Bessel psi_n by downward recurrence, normalized on whichever of
    // psi_0 and psi_1 is better conditioned.
    let start = n_max + 20 + x as usize;
    let mut psi = vec![0.0; start + 2];
    psi[start] = 1e-300_f64.sqrt();
    for n in (1..=start).rev() {
        psi[n - 1] = (2 * n + 1) as f64 / x * psi[n] - psi[n + 1];
    }
    let psi0 = x.sin();
    let psi1 = x.sin() / x - x.cos();
    let scale = if psi0.abs() > psi1.abs() { psi0 / psi[0] } else { psi1 / psi[1] };
    psi.iter_mut().for_each(|v| *v *= scale);
    // Riccati-Neumann by upward recurrence.
    let mut y = vec![0.0; n_max + 1];
    y[0] = -x.cos();
    if n_max >= 1 {
        y[1] = -x.cos() / x - x.sin();
    }
    for n in 1..n_max {
        y[n + 1] = (2 * n + 1) as f64 / x * y[n] - y[n - 1];
    }
    let mut a = vec![C64::new(0.0, 0.0); n_max + 1];
    let mut b = vec![C64::new(0.0, 0.0); n_max + 1];
    for n in 1..=n_max {
        let nf = n as f64;
        let xi = C64::new(psi[n], y[n]);
        let xi_prev = C64::new(psi[n - 1], y[n - 1]);
        let dpsi = psi[n - 1] - nf * psi[n] / x;
        let dxi = xi_prev - xi * (nf / x);
        a[n] = dpsi / dxi;
        b[n] = psi[n] / xi;
    }
    MieCoefficients { a, b }
}

/// Scattering amplitudes `(S1, S2)` at `cos γ` of the scattering angle.
fn mie_amplitudes(coeffs: &MieCoefficients, mu: f64) -> (C64, C64) {
    let n_max = coeffs.a.len() - 1;
    let (mut s1, mut s2) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
    let (mut pi_prev, mut pi_n) = (0.0, 1.0);
    for n in 1..=n_max {
        let nf = n as f64;
        let tau = nf * mu * pi_n - (nf + 1.0) * pi_prev;
        let f = (2.0 * nf + 1.0) / (nf * (nf + 1.0));
        s1 += (coeffs.a[n] * pi_n + coeffs.b[n] * tau) * f;
        s2 += (coeffs.a[n] * tau + coeffs.b[n] * pi_n) * f;
        let pi_next = ((2.0 * nf + 1.0) / nf) * mu * pi_n - ((nf + 1.0) / nf) * pi_prev;
        pi_prev = pi_n;
        pi_n = pi_next;
    }
    (s1, s2)
}

fn mie_sigma(coeffs: &MieCoefficients, wave: &IncidentWave, rhat: &Vec3) -> f64 {
    let khat = wave.propagation();
    let pol = wave.polarization();
    let mu = khat.dot(rhat).clamp(-1.0, 1.0);
    let (s1, s2) = mie_amplitudes(coeffs, mu);
    let perp = khat.cross(rhat);
    let (p_par, p_perp) = if perp.norm() < 1e-12 {
        (1.0, 0.0)
    } else {
        let e_perp = perp.normalize();
        let e_par = e_perp.cross(&khat);
        (pol.dot(&e_par), pol.dot(&e_perp))
    };
    let k = wave.wavenumber();
    4.0 * PI / (k * k) * ((s2 * p_par).norm_sqr() + (s1 * p_perp).norm_sqr())
}

/// Series truncation order for size parameter `ka`.
pub fn mie_order(ka: f64) -> usize {
    (ka + 4.0 * ka.cbrt() + 2.0).ceil() as usize
}

/// Bistatic RCS of a PEC sphere of `radius` centred at the origin.
pub fn mie_reference(radius: f64, wave: &IncidentWave, sweep: &AngleSweep) -> Result<RcsProfile> {
    let ka = wave.wavenumber() * radius;
    if !(ka > 0.1 && ka < 50.0) {
        return Err(EmError::MieRange(ka));
    }
    let n_max = mie_order(ka);
    let base = mie_coefficients(ka, n_max);
    let longer = mie_coefficients(ka, n_max + 5);
    let mut worst: f64 = 0.0;
    let mut sigma_dbsm = Vec::with_capacity(sweep.points().len());
    for r in sweep.directions() {
        let s = to_dbsm(mie_sigma(&base, wave, &r));
        let s_long = to_dbsm(mie_sigma(&longer, wave, &r));
        worst = worst.max((s - s_long).abs());
        sigma_dbsm.push(s);
    }
    if worst >= 0.01 {
        return Err(EmError::MieNonConvergence(worst));
    }
    Ok(RcsProfile { angles: sweep.points().to_vec(), sigma_dbsm })
}

/// Total scattering cross-section from the optical theorem, in m².
pub fn mie_extinction(radius: f64, wave: &IncidentWave) -> f64 {
    let k = wave.wavenumber();
    let coeffs = mie_coefficients(k * radius, mie_order(k * radius));
    let (s1, _) = mie_amplitudes(&coeffs, 1.0);
    4.0 * PI / (k * k) * s1.re
}

// ---------------------------------------------------------------------------
// CSV

const CURRENT_HEADER: &str = "face_index,re_jx,im_jx,re_jy,im_jy,re_jz,im_jz";
const RCS_HEADER: &str = "theta_deg,phi_deg,sigma_dbsm";

fn write_comment<W: Write>(out: &mut W, comment: Option<&str>) -> std::io::Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    Ok(())
}

pub fn write_currents_csv<W: Write>(
    field: &SurfaceCurrentField,
    comment: Option<&str>,
    mut out: W,
) -> std::io::Result<()> {
    write_comment(&mut out, comment)?;
    writeln!(out, "{CURRENT_HEADER}")?;
    for (i, row) in field.to_channels().iter().enumerate() {
        write!(out, "{i}")?;
        for v in row {
            write!(out, ",{v:.16e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn data_lines<R: Read>(reader: R, header: &str) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for (ln, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !seen_header {
            if trimmed != header {
                return Err(EmError::Csv { line: ln + 1, message: format!("expected header `{header}`") });
            }
            seen_header = true;
            continue;
        }
        let vals = trimmed
            .split(',')
            .map(|t| {
                t.trim().parse::<f64>().map_err(|_| EmError::Csv { line: ln + 1, message: format!("bad number `{t}`") })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((ln + 1, vals));
    }
    Ok(rows)
}

pub fn read_currents_csv<R: Read>(reader: R) -> Result<SurfaceCurrentField> {
    let rows = data_lines(reader, CURRENT_HEADER)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, (line, vals)) in rows.into_iter().enumerate() {
        if vals.len() != 7 || vals[0] != i as f64 {
            return Err(EmError::Csv { line, message: format!("expected face {i} with six channels") });
        }
        out.push([vals[1], vals[2], vals[3], vals[4], vals[5], vals[6]]);
    }
    Ok(SurfaceCurrentField::from_channels(&out))
}

pub fn write_rcs_csv<W: Write>(profile: &RcsProfile, comment: Option<&str>, mut out: W) -> std::io::Result<()> {
    write_comment(&mut out, comment)?;
    writeln!(out, "{RCS_HEADER}")?;
    for (a, s) in profile.angles.iter().zip(&profile.sigma_dbsm) {
        writeln!(out, "{},{},{s:.10e}", a[0], a[1])?;
    }
    Ok(())
}

pub fn read_rcs_csv<R: Read>(reader: R) -> Result<RcsProfile> {
    let rows = data_lines(reader, RCS_HEADER)?;
    let mut angles = Vec::with_capacity(rows.len());
    let mut sigma_dbsm = Vec::with_capacity(rows.len());
    for (line, vals) in rows {
        if vals.len() != 3 {
            return Err(EmError::Csv { line, message: "expected three columns".into() });
        }
        angles.push([vals[0], vals[1]]);
        sigma_dbsm.push(vals[2]);
    }
    Ok(RcsProfile { angles, sigma_dbsm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_shape, ShapeSpec};

    fn wave(theta: f64, phi: f64) -> IncidentWave {
        IncidentWave::new(1e9, 1.0, theta, phi).unwrap()
    }

    #[test]
    fn wave_validation() {
        assert!(IncidentWave::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(IncidentWave::new(1e9, -1.0, 0.0, 0.0).is_err());
        assert!(IncidentWave::new(1e9, 1.0, 181.0, 0.0).is_err());
        assert!(IncidentWave::new(1e9, 1.0, 0.0, 360.0).is_err());
        let w = wave(37.0, 211.0);
        assert!((w.propagation().norm() - 1.0).abs() < 1e-15);
        assert!(w.propagation().dot(&w.polarization()).abs() < 1e-15);
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(serde_json::from_str::<IncidentWave>(&json).unwrap(), w);
        assert!(serde_json::from_str::<IncidentWave>(
            r#"{"frequency_hz":1e9,"amplitude":-2,"theta_deg":0,"phi_deg":0}"#
        )
        .is_err());
    }

    #[test]
    fn green_scalar_example() {
        let k = 2.0 * PI;
        let g = green_scalar(&Vec3::zeros(), &Vec3::new(1.0, 0.0, 0.0), k).unwrap();
        assert!((g.norm() - 1.0 / (4.0 * PI)).abs() < 1e-15);
        let phase = g.arg();
        assert!(phase.abs() < 1e-12 || (phase.abs() - 2.0 * PI).abs() < 1e-12);
        assert!(matches!(green_scalar(&Vec3::x(), &Vec3::x(), k), Err(EmError::Coincident)));
        assert!(matches!(green_dyadic(&Vec3::x(), &Vec3::x(), k), Err(EmError::Coincident)));
    }

    /// Central-difference Hessian of the scalar kernel; independent of the
    /// closed form used by the solver.
    fn fd_dyadic(p: &Vec3, q: &Vec3, k: f64) -> CMat3 {
        let h = 1e-4 * (p - q).norm();
        let g = |x: &Vec3| green_scalar(x, q, k).unwrap();
        let mut m = CMat3::zeros();
        for i in 0..3 {
            for jj in 0..3 {
                let ei = Vec3::ith(i, h);
                let ej = Vec3::ith(jj, h);
                let d2 =
                    (g(&(p + ei + ej)) - g(&(p + ei - ej)) - g(&(p - ei + ej)) + g(&(p - ei - ej))) / (4.0 * h * h);
                m[(i, jj)] = d2 / (k * k) + if i == jj { g(p) } else { C64::new(0.0, 0.0) };
            }
        }
        m
    }

    #[test]
    fn dyadic_matches_finite_differences() {
        let k = 2.0 * PI / 0.3;
        let q = Vec3::new(0.01, -0.02, 0.03);
        for p in [Vec3::new(0.2, 0.1, -0.05), Vec3::new(0.02, -0.01, 0.05), Vec3::new(-1.0, 0.4, 2.0)] {
            let exact = green_dyadic(&p, &q, k).unwrap();
            let fd = fd_dyadic(&p, &q, k);
            let err = (exact - fd).norm() / exact.norm();
            assert!(err < 1e-5, "relative error {err}");
            assert!((exact - exact.transpose()).norm() < 1e-15 * exact.norm());
        }
    }

    #[test]
    fn self_scalar_integral_matches_subdivision() {
        // Brute-force check: a fine midpoint rule that excludes the singular
        // sub-triangle plus its analytic static contribution.
        let mesh = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::new(0.03, 0.0, 0.0), Vec3::new(0.01, 0.025, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let fq = FaceQuadrature::new(&mesh, 0);
        let k = 2.0 * PI / 0.3;
        let polar = fq.self_scalar_integral(k);
        let n = 600;
        let [a, b, c] = fq.vertices;
        let w = mesh.areas()[0] / (n * n) as f64;
        let mut sum = C64::new(0.0, 0.0);
        let mut count = 0;
        for i in 0..n {
            for j in 0..(n - i) {
                let mut tris = vec![(i, j, false)];
                if i + j + 1 < n {
                    tris.push((i, j, true));
                }
                for (i, j, up) in tris {
                    let g = |i: usize, j: usize| a + (b - a) * (i as f64 / n as f64) + (c - a) * (j as f64 / n as f64);
                    let cen = if up {
                        (g(i + 1, j) + g(i + 1, j + 1) + g(i, j + 1)) / 3.0
                    } else {
                        (g(i, j) + g(i + 1, j) + g(i, j + 1)) / 3.0
                    };
                    let r = (cen - fq.centroid).norm();
                    count += 1;
                    if r > 1e-12 {
                        sum += C64::from_polar(w / (4.0 * PI * r), -k * r);
                    }
                }
            }
        }
        assert_eq!(count, n * n);
        // Midpoint rule converges like 1/n for the 1/R singularity.
        assert!((polar - sum).norm() / polar.norm() < 5e-3, "{polar} vs {sum}");
    }

    #[test]
    fn far_blocks_are_reciprocal() {
        let mesh = generate_shape(&ShapeSpec::Sphere { radius: 0.1 }, 0.04).unwrap();
        let k = wave(0.0, 0.0).wavenumber();
        let z = assemble_impedance(&mesh, k);
        let faces: Vec<FaceQuadrature> = (0..mesh.face_count()).map(|f| FaceQuadrature::new(&mesh, f)).collect();
        let mut checked = 0;
        for m in 0..mesh.face_count() {
            for s in 0..mesh.face_count() {
                let d = (faces[m].centroid - faces[s].centroid).norm();
                if m == s || d < NEAR_FIELD_FACTOR * faces[m].max_edge.max(faces[s].max_edge) * (1.0 + 1e-9) {
                    continue;
                }
                // Tangential reaction <t_m, Z_ms t_s> / A_s is symmetric.
                let tm = faces[m].normal.cross(&Vec3::x()).normalize();
                let ts = faces[s].normal.cross(&Vec3::y()).normalize();
                let r = |a: usize, b: usize, ta: &Vec3, tb: &Vec3| {
                    let mut acc = C64::new(0.0, 0.0);
                    for i in 0..3 {
                        for jj in 0..3 {
                            acc += z[(3 * a + i, 3 * b + jj)] * ta[i] * tb[jj];
                        }
                    }
                    acc / mesh.areas()[b]
                };
                let lhs = r(m, s, &tm, &ts);
                let rhs = r(s, m, &ts, &tm);
                assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1e-30));
                checked += 1;
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn excitation_zero_amplitude_and_tangential() {
        let mesh = generate_shape(&ShapeSpec::Cube { side: 0.2 }, 0.05).unwrap();
        let silent = IncidentWave::new(1e9, 0.0, 30.0, 40.0).unwrap();
        assert!(excitation(&mesh, &silent).iter().all(|v| v.norm() == 0.0));
        let v = excitation(&mesh, &wave(30.0, 40.0));
        for (f, n) in mesh.normals().iter().enumerate() {
            let dot: C64 = (0..3).map(|c| v[3 * f + c] * n[c]).sum();
            assert!(dot.norm() < 1e-14);
        }
    }

    #[test]
    fn solver_currents_are_tangential_and_zero_rhs_gives_zero() {
        let mesh = generate_shape(&ShapeSpec::Cube { side: 0.15 }, 0.04).unwrap();
        let w = wave(60.0, 30.0);
        let system = assemble_system(&mesh, &w);
        let sol = solve_currents(&system).unwrap();
        assert!(sol.relative_residual < 1e-8);
        assert!(sol.currents.max_normal_fraction(&mesh) < 1e-8);
        let fact = FactorizedSystem::new(system.impedance.clone()).unwrap();
        let (x, r) = fact.solve(&DVector::zeros(3 * mesh.face_count())).unwrap();
        assert_eq!(r, 0.0);
        assert!(x.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn singular_and_mismatched_systems_rejected() {
        let z = Arc::new(DMatrix::<C64>::zeros(6, 6));
        assert!(matches!(FactorizedSystem::new(z), Err(EmError::Singular { .. })));
        let id = Arc::new(DMatrix::<C64>::identity(6, 6));
        let fact = FactorizedSystem::new(id).unwrap();
        assert!(matches!(fact.solve(&DVector::zeros(3)), Err(EmError::Dimension { .. })));
    }

    #[test]
    fn physical_optics_shadow_is_zero() {
        let mesh = generate_shape(&ShapeSpec::Sphere { radius: 0.1 }, 0.03).unwrap();
        let w = wave(0.0, 0.0);
        let po = physical_optics(&mesh, &w);
        for (j, n) in po.currents().iter().zip(mesh.normals()) {
            if n.dot(&w.propagation()) >= 0.0 {
                assert_eq!(j.norm(), 0.0);
            } else {
                assert!(j.norm() > 0.0);
            }
        }
    }

    #[test]
    fn rcs_floor_for_zero_currents() {
        let mesh = generate_shape(&ShapeSpec::Cube { side: 0.2 }, 0.05).unwrap();
        let sweep = AngleSweep::theta_cut(0.0, 0.0, 180.0, 10.0).unwrap();
        let p = bistatic_rcs(&SurfaceCurrentField::zeros(mesh.face_count()), &mesh, &wave(0.0, 0.0), &sweep).unwrap();
        assert!(p.sigma_dbsm.iter().all(|&s| s == RCS_FLOOR_DBSM));
        assert_eq!(p.angles.len(), 19);
    }

    #[test]
    fn sweep_validation() {
        assert!(AngleSweep::theta_cut(0.0, 10.0, 0.0, 1.0).is_err());
        assert!(AngleSweep::from_points(vec![[10.0, 0.0], [5.0, 0.0]]).is_err());
        assert!(AngleSweep::from_points(vec![[190.0, 0.0]]).is_err());
        assert_eq!(AngleSweep::theta_cut(0.0, 0.0, 180.0, 2.0).unwrap().points().len(), 91);
    }

    #[test]
    fn mie_rayleigh_limit() {
        // Small PEC sphere backscatter tends to 9π a² (ka)^4.
        let w = wave(0.0, 0.0);
        let ka = 0.15;
        let a = ka / w.wavenumber();
        let sweep = AngleSweep::from_points(vec![[0.0, 0.0]]).unwrap();
        let p = mie_reference(a, &w, &sweep).unwrap();
        let rayleigh = 10.0 * (9.0 * PI * a * a * ka.powi(4)).log10();
        assert!((p.sigma_dbsm[0] - rayleigh).abs() < 0.2, "{} vs {}", p.sigma_dbsm[0], rayleigh);
    }

    #[test]
    fn mie_optical_limit() {
        // Large sphere backscatter oscillates around the geometric value πa².
        let w = wave(0.0, 0.0);
        let a = 40.0 / w.wavenumber();
        let sweep = AngleSweep::from_points(vec![[0.0, 0.0]]).unwrap();
        let p = mie_reference(a, &w, &sweep).unwrap();
        let optical = 10.0 * (PI * a * a).log10();
        assert!((p.sigma_dbsm[0] - optical).abs() < 1.0);
    }

    #[test]
    fn mie_optical_theorem() {
        // Integrated bistatic RCS equals the extinction cross-section.
        let w = wave(0.0, 0.0);
        let a = 2.5 / w.wavenumber();
        let coeffs = mie_coefficients(2.5, mie_order(2.5) + 5);
        let n_theta = 200;
        let n_phi = 64;
        let mut total = 0.0;
        for it in 0..n_theta {
            let th = PI * (it as f64 + 0.5) / n_theta as f64;
            for ip in 0..n_phi {
                let ph = 2.0 * PI * ip as f64 / n_phi as f64;
                let r = spherical_basis(th, ph).0;
                total += mie_sigma(&coeffs, &w, &r) * th.sin() * (PI / n_theta as f64) * (2.0 * PI / n_phi as f64);
            }
        }
        let scat = total / (4.0 * PI);
        let ext = mie_extinction(a, &w);
        assert!((scat - ext).abs() / ext < 1e-3, "{scat} vs {ext}");
    }

    #[test]
    fn mie_range_enforced() {
        let w = wave(0.0, 0.0);
        let sweep = AngleSweep::from_points(vec![[0.0, 0.0]]).unwrap();
        assert!(matches!(mie_reference(1e-4, &w, &sweep), Err(EmError::MieRange(_))));
        assert!(matches!(mie_reference(10.0, &w, &sweep), Err(EmError::MieRange(_))));
    }

    #[test]
    fn csv_round_trips() {
        let field = SurfaceCurrentField::from_channels(&[[1.0, -2.5e-3, 0.1, 0.2, 1e-300, -7.0], [0.0; 6]]);
        let mut buf = Vec::new();
        write_currents_csv(&field, Some("config_hash=ab12"), &mut buf).unwrap();
        assert_eq!(read_currents_csv(buf.as_slice()).unwrap(), field);
        let prof = RcsProfile { angles: vec![[0.0, 0.0], [2.0, 0.0]], sigma_dbsm: vec![-12.5, -200.0] };
        let mut buf = Vec::new();
        write_rcs_csv(&prof, None, &mut buf).unwrap();
        assert_eq!(read_rcs_csv(buf.as_slice()).unwrap(), prof);
        assert!(read_currents_csv("nope\n".as_bytes()).is_err());
    }
}
