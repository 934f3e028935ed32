//! Multi-level spatial decomposition of a point cloud.
//!
//! Level 0 holds every point, bucketed into cubes of edge λ/2 anchored at the
//! cloud's bounding-box minimum. Level `l + 1` keeps one representative per
//! occupied level-`l` cube, and its own cubes have twice the edge. The
//! representative of a cube is the farthest-point-sampling pick inside it
//! closest to the cube centre; cubes FPS missed fall back to the member
//! closest to the centre.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bounding_box, PointCloud, Vec3};

pub const DEFAULT_MAX_LEVELS: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum HierarchyError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("wavelength must be positive, got {0}")]
    InvalidWavelength(f64),
    #[error("at least one level is required")]
    NoLevels,
    #[error("sample count {requested} exceeds {available} points")]
    TooManySamples { requested: usize, available: usize },
    #[error("seed index {seed} out of range for {count} points")]
    InvalidSeed { seed: usize, count: usize },
    #[error("level {level} does not exist (hierarchy has {count})")]
    NoSuchLevel { level: usize, count: usize },
    #[error("malformed hierarchy: {0}")]
    Malformed(String),
}

pub type Result<T, E = HierarchyError> = std::result::Result<T, E>;

/// Greedy farthest-point sampling starting at `seed`. Ties go to the lowest index.
pub fn farthest_point_sampling(points: &[Vec3], m: usize, seed: usize) -> Result<Vec<usize>> {
    if m > points.len() {
        return Err(HierarchyError::TooManySamples { requested: m, available: points.len() });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    if seed >= points.len() {
        return Err(HierarchyError::InvalidSeed { seed, count: points.len() });
    }
    let mut picked = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut current = seed;
    loop {
        picked.push(current);
        min_dist[current] = -1.0;
        if picked.len() == m {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            if min_dist[i] < 0.0 {
                continue;
            }
            let d = (p - c).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best_d {
                best_d = min_dist[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

pub type CubeCoord = [i64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierarchyLevel {
    /// Indices into the base point cloud.
    pub point_indices: Vec<usize>,
    pub cube_edge: f64,
    /// Occupied cubes in ascending coordinate order.
    pub cubes: Vec<CubeCoord>,
    /// Cube id (position in `cubes`) per point of this level.
    pub leaf_assignment: Vec<usize>,
    /// Index of each point's parent within the next level; empty at the top.
    pub parent: Vec<usize>,
    /// Local indices of points in the same or an adjacent cube, ascending.
    pub near: Vec<Vec<usize>>,
}

impl HierarchyLevel {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    /// Children of each parent, built by inverting `parent`.
    pub fn children(&self, parent_count: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); parent_count];
        for (child, &p) in self.parent.iter().enumerate() {
            out[p].push(child);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelHierarchy {
    pub wavelength: f64,
    pub anchor: [f64; 3],
    pub levels: Vec<HierarchyLevel>,
}

fn cube_of(p: &Vec3, anchor: &Vec3, edge: f64) -> CubeCoord {
    let d = p - anchor;
    [d.x, d.y, d.z].map(|c| (c / edge).floor() as i64)
}

fn cube_center(c: &CubeCoord, anchor: &Vec3, edge: f64) -> Vec3 {
    anchor + Vec3::new(c[0] as f64 + 0.5, c[1] as f64 + 0.5, c[2] as f64 + 0.5) * edge
}

/// Cube edge at `level`: `(λ/2)·2^level`, exact in floating point.
pub fn cube_edge(wavelength: f64, level: usize) -> f64 {
    wavelength / 2.0 * (1u64 << level) as f64
}

fn near_lists(coords: &[CubeCoord]) -> Vec<Vec<usize>> {
    let mut members: HashMap<CubeCoord, Vec<usize>> = HashMap::new();
    for (i, c) in coords.iter().enumerate() {
        members.entry(*c).or_default().push(i);
    }
    coords
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(m) = members.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            out.extend(m.iter().copied().filter(|&j| j != i));
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Builds at most `max_levels` levels; stops early once a level would not
/// shrink or only one point remains.
pub fn build_octree(cloud: &PointCloud, wavelength: f64, max_levels: usize) -> Result<LevelHierarchy> {
    if cloud.is_empty() {
        return Err(HierarchyError::EmptyCloud);
    }
    if !(wavelength.is_finite() && wavelength > 0.0) {
        return Err(HierarchyError::InvalidWavelength(wavelength));
    }
    if max_levels == 0 {
        return Err(HierarchyError::NoLevels);
    }
    let anchor = bounding_box(&cloud.points).0;
    let mut levels: Vec<HierarchyLevel> = Vec::new();
    let mut indices: Vec<usize> = (0..cloud.len()).collect();
    for l in 0..max_levels {
        let edge = cube_edge(wavelength, l);
        let coords: Vec<CubeCoord> = indices.iter().map(|&i| cube_of(&cloud.points[i], &anchor, edge)).collect();
        let mut by_cube: BTreeMap<CubeCoord, Vec<usize>> = BTreeMap::new();
        for (local, c) in coords.iter().enumerate() {
            by_cube.entry(*c).or_default().push(local);
        }
        let cubes: Vec<CubeCoord> = by_cube.keys().copied().collect();
        let cube_id: HashMap<CubeCoord, usize> = cubes.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let leaf_assignment = coords.iter().map(|c| cube_id[c]).collect();
        levels.push(HierarchyLevel {
            point_indices: indices.clone(),
            cube_edge: edge,
            cubes: cubes.clone(),
            leaf_assignment,
            parent: Vec::new(),
            near: near_lists(&coords),
        });

        if l + 1 == max_levels || indices.len() == 1 || cubes.len() == indices.len() {
            break;
        }
        // One representative per occupied cube.
        let positions: Vec<Vec3> = indices.iter().map(|&i| cloud.points[i]).collect();
        let fps: HashSet<usize> = farthest_point_sampling(&positions, cubes.len(), 0)?.into_iter().collect();
        let mut reps = Vec::with_capacity(cubes.len());
        for (c, members) in &by_cube {
            let center = cube_center(c, &anchor, edge);
            let sampled: Vec<usize> = members.iter().copied().filter(|m| fps.contains(m)).collect();
            let pool = if sampled.is_empty() { members } else { &sampled };
            let rep = pool
                .iter()
                .copied()
                .min_by(|&a, &b| {
                    let da = (positions[a] - center).norm_squared();
                    let db = (positions[b] - center).norm_squared();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("occupied cube has members");
            reps.push(rep);
        }
        let level = levels.last_mut().expect("just pushed");
        level.parent = level.leaf_assignment.clone();
        indices = reps.iter().map(|&r| indices[r]).collect();
    }
    Ok(LevelHierarchy { wavelength, anchor: anchor.into(), levels })
}

impl LevelHierarchy {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, level: usize) -> Result<&HierarchyLevel> {
        self.levels.get(level).ok_or(HierarchyError::NoSuchLevel { level, count: self.levels.len() })
    }

    /// Positions of a level's points, in level order.
    pub fn positions(&self, cloud: &PointCloud, level: usize) -> Result<Vec<Vec3>> {
        Ok(self.level(level)?.point_indices.iter().map(|&i| cloud.points[i]).collect())
    }

    /// Relabels the hierarchy for a base cloud reordered so that new point `i`
    /// is old point `order[i]`. Level 0 follows the new order; coarser levels
    /// keep their order with base indices remapped.
    pub fn permuted_base(&self, order: &[usize]) -> Result<Self> {
        let n = self.levels[0].len();
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(HierarchyError::Malformed("order is not a permutation".into()));
            }
            inverse[old] = new;
        }
        if order.len() != n {
            return Err(HierarchyError::Malformed("order is not a permutation".into()));
        }
        let mut levels = self.levels.clone();
        let l0 = &self.levels[0];
        let first = &mut levels[0];
        first.leaf_assignment = order.iter().map(|&o| l0.leaf_assignment[o]).collect();
        if !l0.parent.is_empty() {
            first.parent = order.iter().map(|&o| l0.parent[o]).collect();
        }
        first.near = order
            .iter()
            .map(|&o| {
                let mut nb: Vec<usize> = l0.near[o].iter().map(|&j| inverse[j]).collect();
                nb.sort_unstable();
                nb
            })
            .collect();
        first.point_indices = order.iter().map(|&o| inverse[l0.point_indices[o]]).collect();
        for level in levels.iter_mut().skip(1) {
            level.point_indices = level.point_indices.iter().map(|&i| inverse[i]).collect();
        }
        Ok(Self { wavelength: self.wavelength, anchor: self.anchor, levels })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("hierarchy serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| HierarchyError::Malformed(e.to_string()))
    }
}

/// Near-field neighbour lists of one level, as local indices.
pub fn near_neighbors(hierarchy: &LevelHierarchy, level: usize) -> Result<&[Vec<usize>]> {
    Ok(&hierarchy.level(level)?.near)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_shape, to_point_cloud, ShapeSpec};
    use proptest::prelude::*;

    fn cloud_of(points: Vec<Vec3>) -> PointCloud {
        let n = points.len();
        PointCloud { points, normals: vec![Vec3::z(); n], areas: vec![1.0; n], features: None }
    }

    /// Exhaustive search over all subsets reproduces the greedy rule: at each
    /// step take the lowest-index point whose distance to the picked set is
    /// maximal.
    fn brute_fps(points: &[Vec3], m: usize, seed: usize) -> Vec<usize> {
        let mut picked = vec![seed];
        while picked.len() < m {
            let mut best = None;
            let mut best_d = -1.0;
            for i in 0..points.len() {
                if picked.contains(&i) {
                    continue;
                }
                let d = picked.iter().map(|&p| (points[i] - points[p]).norm()).fold(f64::INFINITY, f64::min);
                if d > best_d {
                    best_d = d;
                    best = Some(i);
                }
            }
            picked.push(best.unwrap());
        }
        picked
    }

    #[test]
    fn fps_line_example() {
        let pts: Vec<Vec3> = [0.0, 1.0, 2.0, 3.0].iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect();
        assert_eq!(farthest_point_sampling(&pts, 2, 0).unwrap(), vec![0, 3]);
        assert_eq!(farthest_point_sampling(&pts, 4, 0).unwrap().len(), 4);
        assert!(matches!(
            farthest_point_sampling(&pts, 5, 0),
            Err(HierarchyError::TooManySamples { requested: 5, available: 4 })
        ));
    }

    #[test]
    fn fps_coincident_points_are_valid() {
        let pts = vec![Vec3::zeros(); 5];
        let s = farthest_point_sampling(&pts, 5, 2).unwrap();
        let mut sorted = s.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(s[0], 2);
    }

    #[test]
    fn leaf_edge_is_half_wavelength() {
        let mesh = generate_shape(&ShapeSpec::Cube { side: 0.3 }, 0.03).unwrap();
        let h = build_octree(&to_point_cloud(&mesh), 0.3, 3).unwrap();
        assert_eq!(h.levels[0].cube_edge, 0.15);
        for l in 1..h.depth() {
            assert_eq!(h.levels[l].cube_edge, 2.0 * h.levels[l - 1].cube_edge);
        }
    }

    #[test]
    fn single_point_and_errors() {
        let h = build_octree(&cloud_of(vec![Vec3::new(1.0, 2.0, 3.0)]), 0.3, 3).unwrap();
        assert_eq!(h.depth(), 1);
        assert!(h.levels[0].near[0].is_empty());
        assert_eq!(build_octree(&cloud_of(vec![]), 0.3, 3), Err(HierarchyError::EmptyCloud));
        assert!(build_octree(&cloud_of(vec![Vec3::zeros()]), 0.0, 3).is_err());
        assert!(build_octree(&cloud_of(vec![Vec3::zeros()]), 0.3, 0).is_err());
    }

    #[test]
    fn serialization_round_trip() {
        let mesh = generate_shape(&ShapeSpec::Cone { radius: 0.15, height: 0.3 }, 0.04).unwrap();
        let h = build_octree(&to_point_cloud(&mesh), 0.3, 3).unwrap();
        assert_eq!(LevelHierarchy::from_json(&h.to_json()).unwrap(), h);
    }

    fn point_strategy() -> impl Strategy<Value = Vec<Vec3>> {
        prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..60)
            .prop_map(|v| v.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect())
    }

    proptest! {
        #[test]
        fn fps_matches_brute_force(pts in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64), 1..=8), seed_frac in 0.0..1.0f64) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let seed = ((pts.len() as f64 * seed_frac) as usize).min(pts.len() - 1);
            for m in 1..=pts.len() {
                prop_assert_eq!(farthest_point_sampling(&pts, m, seed).unwrap(), brute_fps(&pts, m, seed));
            }
        }

        #[test]
        fn hierarchy_invariants(pts in point_strategy(), wavelength in 0.2..3.0f64) {
            let cloud = cloud_of(pts);
            let h = build_octree(&cloud, wavelength, 4).unwrap();
            prop_assert_eq!(h.levels[0].point_indices.len(), cloud.len());
            let anchor = Vec3::from(h.anchor);
            for (l, level) in h.levels.iter().enumerate() {
                prop_assert_eq!(level.cube_edge, wavelength / 2.0 * (1u64 << l) as f64);
                // Every point sits inside its assigned cube.
                for (local, &base) in level.point_indices.iter().enumerate() {
                    let c = level.cubes[level.leaf_assignment[local]];
                    let lo = anchor + Vec3::new(c[0] as f64, c[1] as f64, c[2] as f64) * level.cube_edge;
                    let rel = cloud.points[base] - lo;
                    prop_assert!(rel.iter().all(|&v| v >= -1e-12 && v < level.cube_edge * (1.0 + 1e-12)));
                }
                // Near lists against O(n²) brute force on cube adjacency.
                for i in 0..level.len() {
                    let ci = level.cubes[level.leaf_assignment[i]];
                    let brute: Vec<usize> = (0..level.len())
                        .filter(|&j| j != i)
                        .filter(|&j| {
                            let cj = level.cubes[level.leaf_assignment[j]];
                            (0..3).all(|a| (ci[a] - cj[a]).abs() <= 1)
                        })
                        .collect();
                    prop_assert_eq!(&level.near[i], &brute);
                    for &j in &level.near[i] {
                        prop_assert!(level.near[j].contains(&i));
                    }
                }
                if let Some(next) = h.levels.get(l + 1) {
                    prop_assert!(next.len() < level.len());
                    prop_assert_eq!(level.parent.len(), level.len());
                    // Surjective parent map.
                    let mut hit = vec![false; next.len()];
                    for &p in &level.parent {
                        hit[p] = true;
                    }
                    prop_assert!(hit.iter().all(|&x| x));
                    // Coarse points are a subset of the finer level.
                    for idx in &next.point_indices {
                        prop_assert!(level.point_indices.contains(idx));
                    }
                } else {
                    prop_assert!(level.parent.is_empty());
                }
            }
        }

        #[test]
        fn hierarchy_is_deterministic(pts in point_strategy()) {
            let cloud = cloud_of(pts);
            prop_assert_eq!(build_octree(&cloud, 0.5, 3).unwrap(), build_octree(&cloud, 0.5, 3).unwrap());
        }
    }
}
