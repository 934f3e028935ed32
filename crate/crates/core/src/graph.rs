//! Weighted point graphs with density and curvature attributes.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{PointCloud, Vec3};
use crate::hierarchy::{HierarchyError, LevelHierarchy};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} has an empty neighbourhood")]
    EmptyNeighborhood(usize),
    #[error("bandwidth must be positive, got {0}")]
    InvalidBandwidth(f64),
    #[error("density at node {0} is not positive")]
    ZeroDensity(usize),
    #[error("input lengths disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

/// Gaussian KDE over each point's neighbourhood plus the point itself.
pub fn kde_density(points: &[Vec3], neighborhoods: &[Vec<usize>], h: f64) -> Result<Vec<f64>> {
    if !(h.is_finite() && h > 0.0) {
        return Err(GraphError::InvalidBandwidth(h));
    }
    if points.len() != neighborhoods.len() {
        return Err(GraphError::Mismatch(format!("{} points, {} neighbourhoods", points.len(), neighborhoods.len())));
    }
    let norm = 1.0 / (h.powi(3) * (2.0 * PI).powf(1.5));
    Ok(points
        .iter()
        .zip(neighborhoods)
        .map(|(p, nb)| {
            let sum: f64 = 1.0 + nb.iter().map(|&j| (-0.5 * ((p - points[j]).norm() / h).powi(2)).exp()).sum::<f64>();
            norm * sum / (nb.len() + 1) as f64
        })
        .collect())
}

pub fn normalized_inverse_density(density: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = density.iter().position(|&f| !(f > 0.0)) {
        return Err(GraphError::ZeroDensity(i));
    }
    let inv: Vec<f64> = density.iter().map(|f| 1.0 / f).collect();
    let max = inv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(inv.iter().map(|d| d / max).collect())
}

/// Mean angle between each normal and its neighbours' normals.
pub fn curvature_proxy(normals: &[Vec3], neighborhoods: &[Vec<usize>]) -> Result<Vec<f64>> {
    normals
        .iter()
        .zip(neighborhoods)
        .enumerate()
        .map(|(i, (n, nb))| {
            if nb.is_empty() {
                return Err(GraphError::EmptyNeighborhood(i));
            }
            let total: f64 = nb.iter().map(|&j| n.dot(&normals[j]).clamp(-1.0, 1.0).acos()).sum();
            Ok(total / nb.len() as f64)
        })
        .collect()
}

pub fn mean_nearest_neighbor_distance(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (p - q).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    total / points.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    pub similarity: f64,
    pub weight: f64,
}

/// Edge weights `S / (1 + αδ)` over the undirected near pairs, stored with `i < j`.
pub fn edge_weights(points: &[Vec3], neighborhoods: &[Vec<usize>], curvature: &[f64]) -> Result<Vec<GraphEdge>> {
    if points.len() != neighborhoods.len() || points.len() != curvature.len() {
        return Err(GraphError::Mismatch("points, neighbourhoods and curvature".into()));
    }
    let pairs: Vec<(usize, usize)> = neighborhoods
        .iter()
        .enumerate()
        .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let m = pairs.len() as f64;
    let dist: Vec<f64> = pairs.iter().map(|&(i, j)| (points[i] - points[j]).norm()).collect();
    let mean_delta = dist.iter().sum::<f64>() / m;
    let alpha = if mean_delta > 0.0 { 1.0 / mean_delta } else { 0.0 };
    let mean_dk = pairs.iter().map(|&(i, j)| (curvature[i] - curvature[j]).abs()).sum::<f64>() / m;
    let sigma = if mean_dk > 0.0 { mean_dk } else { 1.0 };
    Ok(pairs
        .iter()
        .zip(&dist)
        .map(|(&(i, j), &delta)| {
            let similarity = (-(curvature[i] - curvature[j]).abs() / sigma).exp();
            GraphEdge { i, j, distance: delta, similarity, weight: similarity / (1.0 + alpha * delta) }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsGraph {
    pub positions: Vec<Vec3>,
    pub normals: Vec<Vec3>,
    pub density_norm: Vec<f64>,
    pub curvature: Vec<f64>,
    pub edges: Vec<GraphEdge>,
    pub bandwidth: f64,
}

impl PhysicsGraph {
    /// Graph over one hierarchy level. Nodes without neighbours get κ = 0.
    pub fn build(cloud: &PointCloud, hierarchy: &LevelHierarchy, level: usize) -> Result<Self> {
        let lvl = hierarchy.level(level)?;
        let positions: Vec<Vec3> = lvl.point_indices.iter().map(|&i| cloud.points[i]).collect();
        let normals: Vec<Vec3> = lvl.point_indices.iter().map(|&i| cloud.normals[i]).collect();
        Self::from_parts(positions, normals, &lvl.near, None)
    }

    pub fn from_parts(
        positions: Vec<Vec3>,
        normals: Vec<Vec3>,
        near: &[Vec<usize>],
        bandwidth: Option<f64>,
    ) -> Result<Self> {
        let h = match bandwidth {
            Some(h) => h,
            None => {
                let mean = mean_nearest_neighbor_distance(&positions);
                if mean > 0.0 {
                    mean
                } else {
                    1.0
                }
            }
        };
        let density = kde_density(&positions, near, h)?;
        let density_norm = normalized_inverse_density(&density)?;
        let curvature: Vec<f64> = near
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                if nb.is_empty() {
                    0.0
                } else {
                    nb.iter().map(|&j| normals[i].dot(&normals[j]).clamp(-1.0, 1.0).acos()).sum::<f64>()
                        / nb.len() as f64
                }
            })
            .collect();
        let edges = edge_weights(&positions, near, &curvature)?;
        Ok(Self { positions, normals, density_norm, curvature, edges, bandwidth: h })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn write_edges_csv<W: Write>(&self, comment: Option<&str>, mut out: W) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "i,j,delta_m,S,w")?;
        for e in &self.edges {
            writeln!(out, "{},{},{:.16e},{:.16e},{:.16e}", e.i, e.j, e.distance, e.similarity, e.weight)?;
        }
        Ok(())
    }

    pub fn write_nodes_csv<W: Write>(&self, comment: Option<&str>, mut out: W) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "index,x,y,z,nx,ny,nz,density_norm,curvature")?;
        for i in 0..self.len() {
            let (p, n) = (self.positions[i], self.normals[i]);
            writeln!(
                out,
                "{i},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                p.x, p.y, p.z, n.x, n.y, n.z, self.density_norm[i], self.curvature[i]
            )?;
        }
        Ok(())
    }
}
