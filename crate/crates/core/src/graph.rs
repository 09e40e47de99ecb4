//! Directed skeleton graphs, poses and the adjacency-derived matrices.
//!
//! Edges point away from the body's gravity point. Direction matters only for
//! validation (the bone graph must be acyclic) and for the sign of bone
//! vectors; every matrix built here is symmetric.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Length substituted for a bone whose endpoints coincide.
pub const ZERO_BONE_EPSILON: f64 = 1e-6;

/// Graphs larger than this are rejected.
pub const MAX_JOINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    joint_count: usize,
    edges: Vec<(usize, usize)>,
    dims: usize,
}

impl SkeletonGraph {
    /// Validates indices, self-loops, duplicates and directed acyclicity.
    pub fn new(edges: Vec<(usize, usize)>, joint_count: usize, dims: usize) -> Result<Self> {
        if joint_count == 0 || joint_count > MAX_JOINTS {
            return Err(Error::InvalidGraph(format!(
                "joint count {joint_count} outside 1..={MAX_JOINTS}"
            )));
        }
        if dims != 2 && dims != 3 {
            return Err(Error::InvalidGraph(format!("dims must be 2 or 3, got {dims}")));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(s, t) in &edges {
            for index in [s, t] {
                if index >= joint_count {
                    return Err(Error::IndexOutOfRange { index, joint_count });
                }
            }
            if s == t {
                return Err(Error::SelfLoop(s));
            }
            if !seen.insert((s, t)) {
                return Err(Error::DuplicateEdge(s, t));
            }
        }
        let graph = SkeletonGraph {
            joint_count,
            edges,
            dims,
        };
        if let Some(joint) = graph.find_directed_cycle() {
            return Err(Error::DirectedCycle(joint));
        }
        Ok(graph)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    /// Undirected neighbour lists, sorted.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.joint_count];
        for &(s, t) in &self.edges {
            adj[s].push(t);
            adj[t].push(s);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.neighbours();
        let mut seen = vec![false; self.joint_count];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    count += 1;
                    stack.push(w);
                }
            }
        }
        count == self.joint_count
    }

    /// True when the undirected edge set has no cycle.
    pub fn is_forest(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.joint_count).collect();
        fn root(parent: &mut [usize], mut v: usize) -> usize {
            while parent[v] != v {
                parent[v] = parent[parent[v]];
                v = parent[v];
            }
            v
        }
        for &(s, t) in &self.edges {
            let (a, b) = (root(&mut parent, s), root(&mut parent, t));
            if a == b {
                return false;
            }
            parent[a] = b;
        }
        true
    }

    fn find_directed_cycle(&self) -> Option<usize> {
        // Kahn: whatever survives peeling lies on or behind a cycle.
        let mut indegree = vec![0usize; self.joint_count];
        let mut out = vec![Vec::new(); self.joint_count];
        for &(s, t) in &self.edges {
            indegree[t] += 1;
            out[s].push(t);
        }
        let mut queue: Vec<usize> = (0..self.joint_count).filter(|&v| indegree[v] == 0).collect();
        let mut removed = 0;
        while let Some(v) = queue.pop() {
            removed += 1;
            for &w in &out[v] {
                indegree[w] -= 1;
                if indegree[w] == 0 {
                    queue.push(w);
                }
            }
        }
        (removed < self.joint_count).then(|| (0..self.joint_count).find(|&v| indegree[v] > 0))?
    }
}

/// Shorthand for [`SkeletonGraph::new`].
pub fn build_graph(edges: &[(usize, usize)], joint_count: usize, dims: usize) -> Result<SkeletonGraph> {
    SkeletonGraph::new(edges.to_vec(), joint_count, dims)
}

/// Joint coordinates of one frame, `joint_count × dims` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePose {
    coords: Vec<f64>,
    dims: usize,
    confidence: Option<Vec<f64>>,
}

impl FramePose {
    pub fn new(coords: Vec<f64>, dims: usize, confidence: Option<Vec<f64>>) -> Result<Self> {
        if dims == 0 || !coords.len().is_multiple_of(dims) {
            return Err(Error::DimensionMismatch(format!(
                "{} coordinates are not a multiple of {dims}",
                coords.len()
            )));
        }
        if let Some(joint) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteCoordinate { joint: joint / dims });
        }
        if let Some(c) = &confidence {
            if c.len() != coords.len() / dims {
                return Err(Error::DimensionMismatch("confidence length".into()));
            }
            if let Some(j) = c.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::SchemaViolation(format!(
                    "confidence of joint {j} outside [0, 1]"
                )));
            }
        }
        Ok(FramePose {
            coords,
            dims,
            confidence,
        })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dims = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dims) {
            return Err(Error::DimensionMismatch("ragged joint coordinates".into()));
        }
        FramePose::new(points.concat(), dims, None)
    }

    pub fn joint_count(&self) -> usize {
        self.coords.len() / self.dims
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn joint(&self, j: usize) -> &[f64] {
        &self.coords[j * self.dims..(j + 1) * self.dims]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn confidence(&self) -> Option<&[f64]> {
        self.confidence.as_deref()
    }

    pub fn map_joints(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> FramePose {
        let coords = (0..self.joint_count()).flat_map(|j| f(self.joint(j))).collect();
        FramePose {
            coords,
            dims: self.dims,
            confidence: self.confidence.clone(),
        }
    }
}

/// Euclidean distance between the endpoints of `edge`.
pub fn bone_length(pose: &FramePose, edge: (usize, usize)) -> Result<f64> {
    let n = pose.joint_count();
    for index in [edge.0, edge.1] {
        if index >= n {
            return Err(Error::IndexOutOfRange {
                index,
                joint_count: n,
            });
        }
    }
    let (a, b) = (pose.joint(edge.0), pose.joint(edge.1));
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoordinate { joint: edge.0 });
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCoordinate { joint: edge.1 });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt())
}

/// Bone lengths of `pose` in graph edge order.
pub fn bone_lengths(graph: &SkeletonGraph, pose: &FramePose) -> Result<Vec<f64>> {
    check_pose(graph, pose)?;
    graph.edges().iter().map(|&e| bone_length(pose, e)).collect()
}

pub(crate) fn check_pose(graph: &SkeletonGraph, pose: &FramePose) -> Result<()> {
    if pose.joint_count() != graph.joint_count() || pose.dims() != graph.dims() {
        return Err(Error::DimensionMismatch(format!(
            "pose is {}x{}, graph expects {}x{}",
            pose.joint_count(),
            pose.dims(),
            graph.joint_count(),
            graph.dims()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// 0/1 entries.
    Unit,
    /// Bone length on each edge; collapsed bones get [`ZERO_BONE_EPSILON`].
    BoneLength,
    /// Bone length on each edge; collapsed bones are an error.
    BoneLengthStrict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAdjacency {
    matrix: Matrix,
    symmetric: bool,
}

impl WeightedAdjacency {
    /// Wraps a matrix after checking entries are finite and nonnegative.
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::DimensionMismatch("adjacency must be square".into()));
        }
        let n = matrix.rows();
        for i in 0..n {
            for j in 0..n {
                let v = matrix[(i, j)];
                if !v.is_finite() {
                    return Err(Error::DimensionMismatch(format!("non-finite weight at ({i}, {j})")));
                }
                if v < 0.0 {
                    return Err(Error::NegativeWeight(i, j));
                }
            }
        }
        let symmetric = matrix.asymmetry() == 0.0;
        Ok(WeightedAdjacency { matrix, symmetric })
    }

    /// Symmetric adjacency carrying `weights[k]` on edge `k` of `graph`.
    pub fn from_edge_weights(graph: &SkeletonGraph, weights: &[f64]) -> Result<Self> {
        if weights.len() != graph.edges().len() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} edges",
                weights.len(),
                graph.edges().len()
            )));
        }
        let n = graph.joint_count();
        let mut m = Matrix::zeros(n, n);
        for (&(s, t), &w) in graph.edges().iter().zip(weights) {
            if w < 0.0 {
                return Err(Error::NegativeWeight(s, t));
            }
            m[(s, t)] = w;
            m[(t, s)] = w;
        }
        WeightedAdjacency::new(m)
    }

    pub fn unit(graph: &SkeletonGraph) -> Self {
        WeightedAdjacency::from_edge_weights(graph, &vec![1.0; graph.edges().len()])
            .expect("unit weights are valid")
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row sums.
    pub fn degrees(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.matrix.row(i).iter().sum()).collect()
    }

    /// Neighbour lists with weights for every nonzero off-diagonal entry.
    pub fn neighbour_lists(&self) -> Vec<Vec<(usize, f64)>> {
        let n = self.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| j != i && self.matrix[(i, j)] > 0.0)
                    .map(|j| (j, self.matrix[(i, j)]))
                    .collect()
            })
            .collect()
    }
}

/// Replaces collapsed bone lengths by [`ZERO_BONE_EPSILON`], warning once per bone.
pub(crate) fn guard_zero_lengths(graph: &SkeletonGraph, lengths: &mut [f64], strict: bool) -> Result<()> {
    for (len, &(s, t)) in lengths.iter_mut().zip(graph.edges()) {
        if *len == 0.0 {
            if strict {
                return Err(Error::ZeroLengthBone(s, t));
            }
            log::warn!("bone ({s}, {t}) has zero length, using {ZERO_BONE_EPSILON}");
            *len = ZERO_BONE_EPSILON;
        }
    }
    Ok(())
}

pub fn weighted_adjacency(graph: &SkeletonGraph, pose: &FramePose, mode: WeightMode) -> Result<WeightedAdjacency> {
    check_pose(graph, pose)?;
    match mode {
        WeightMode::Unit => Ok(WeightedAdjacency::unit(graph)),
        WeightMode::BoneLength | WeightMode::BoneLengthStrict => {
            let mut lengths = bone_lengths(graph, pose)?;
            guard_zero_lengths(graph, &mut lengths, mode == WeightMode::BoneLengthStrict)?;
            WeightedAdjacency::from_edge_weights(graph, &lengths)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationKind {
    AdjacencyNormalized,
    CentralityAugmented,
}

/// A symmetric `N × N` operator applied on the joint axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationMatrix {
    matrix: Matrix,
    kind: PropagationKind,
}

impl PropagationMatrix {
    pub fn new(matrix: Matrix, kind: PropagationKind) -> Result<Self> {
        if !matrix.is_square() || !matrix.is_finite() {
            return Err(Error::DimensionMismatch("propagation must be square and finite".into()));
        }
        if matrix.asymmetry() > 1e-12 {
            return Err(Error::DimensionMismatch("propagation must be symmetric".into()));
        }
        Ok(PropagationMatrix { matrix, kind })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn kind(&self) -> PropagationKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the row sums of `A + I`.
pub fn normalized_propagation(adj: &WeightedAdjacency) -> PropagationMatrix {
    let n = adj.len();
    let a = adj.matrix();
    let inv_sqrt: Vec<f64> = adj.degrees().iter().map(|d| 1.0 / (d + 1.0).sqrt()).collect();
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let hat = a[(i, j)] + if i == j { 1.0 } else { 0.0 };
            // Same product order for (i, j) and (j, i) keeps the result exactly symmetric.
            let v = inv_sqrt[i] * hat * inv_sqrt[j];
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    PropagationMatrix {
        matrix: m,
        kind: PropagationKind::AdjacencyNormalized,
    }
}

/// Contents of a skeleton template file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonTemplate {
    pub joint_count: usize,
    pub dims: usize,
    pub edges: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl SkeletonTemplate {
    pub fn graph(&self) -> Result<SkeletonGraph> {
        if let Some(names) = &self.names {
            if names.len() != self.joint_count {
                return Err(Error::SchemaViolation(format!(
                    "{} names for {} joints",
                    names.len(),
                    self.joint_count
                )));
            }
        }
        SkeletonGraph::new(self.edges.clone(), self.joint_count, self.dims)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SkeletonTemplate::from_json(&text)
    }

    /// Built-in templates: `ntu25` and `openpose18`.
    pub fn builtin(id: &str) -> Option<Self> {
        let text = match id {
            "ntu25" => include_str!("../templates/ntu25.json"),
            "openpose18" => include_str!("../templates/openpose18.json"),
            _ => return None,
        };
        Some(SkeletonTemplate::from_json(text).expect("built-in template parses"))
    }

    /// Looks up a built-in id, then `<dir>/<id>.json`.
    pub fn resolve(id: &str, dir: Option<&Path>) -> Result<Self> {
        if let Some(t) = SkeletonTemplate::builtin(id) {
            return Ok(t);
        }
        if let Some(dir) = dir {
            let path = dir.join(format!("{id}.json"));
            if path.exists() {
                return SkeletonTemplate::load(&path);
            }
        }
        Err(Error::UnknownTemplate(id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p3() -> SkeletonGraph {
        build_graph(&[(0, 1), (1, 2)], 3, 3).unwrap()
    }

    #[test]
    fn build_graph_examples() {
        assert_eq!(p3().edges().len(), 2);
        assert!(matches!(build_graph(&[(0, 1), (1, 0)], 2, 3), Err(Error::DirectedCycle(_))));
        assert!(matches!(build_graph(&[(0, 3)], 3, 3), Err(Error::IndexOutOfRange { index: 3, .. })));
        assert!(matches!(build_graph(&[(1, 1)], 3, 3), Err(Error::SelfLoop(1))));
        assert!(matches!(build_graph(&[(0, 1), (0, 1)], 3, 3), Err(Error::DuplicateEdge(0, 1))));
        assert!(matches!(build_graph(&[(0, 1), (1, 2), (2, 0)], 3, 3), Err(Error::DirectedCycle(_))));
        assert!(build_graph(&[], 0, 3).is_err());
    }

    #[test]
    fn undirected_cycle_is_not_directed_cycle() {
        let g = build_graph(&[(0, 1), (0, 2), (1, 3), (2, 3)], 4, 3).unwrap();
        assert!(!g.is_forest());
        assert!(g.is_connected());
    }

    #[test]
    fn builtin_templates_are_trees() {
        for (id, n) in [("ntu25", 25), ("openpose18", 18)] {
            let g = SkeletonTemplate::builtin(id).unwrap().graph().unwrap();
            assert_eq!(g.joint_count(), n);
            assert_eq!(g.edges().len(), n - 1);
            assert!(g.is_forest() && g.is_connected());
        }
    }

    #[test]
    fn bone_length_examples() {
        let pose = FramePose::from_points(&[vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 2.0]]).unwrap();
        assert_eq!(bone_length(&pose, (0, 1)).unwrap(), 3.0);
        let same = FramePose::from_points(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(bone_length(&same, (0, 1)).unwrap(), 0.0);
        assert!(FramePose::from_points(&[vec![f64::NAN, 0.0]]).is_err());
    }

    #[test]
    fn weighted_adjacency_examples() {
        let g = p3();
        let pose = FramePose::from_points(&[vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 0.0], vec![3.0, 0.0, 0.0]]).unwrap();
        let unit = weighted_adjacency(&g, &pose, WeightMode::Unit).unwrap();
        assert_eq!(unit.matrix().to_rows(), vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]]);
        let bl = weighted_adjacency(&g, &pose, WeightMode::BoneLength).unwrap();
        assert_eq!(bl.matrix().to_rows(), vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 2.0], vec![0.0, 2.0, 0.0]]);

        let single = build_graph(&[], 1, 3).unwrap();
        let origin = FramePose::from_points(&[vec![0.0, 0.0, 0.0]]).unwrap();
        let m = weighted_adjacency(&single, &origin, WeightMode::Unit).unwrap();
        assert_eq!(m.matrix().to_rows(), vec![vec![0.0]]);
    }

    #[test]
    fn zero_length_bone_policies() {
        let g = build_graph(&[(0, 1)], 2, 2).unwrap();
        let pose = FramePose::from_points(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(
            weighted_adjacency(&g, &pose, WeightMode::BoneLengthStrict),
            Err(Error::ZeroLengthBone(0, 1))
        ));
        let m = weighted_adjacency(&g, &pose, WeightMode::BoneLength).unwrap();
        assert_eq!(m.matrix()[(0, 1)], ZERO_BONE_EPSILON);
    }

    #[test]
    fn normalized_propagation_examples() {
        let single = build_graph(&[], 1, 3).unwrap();
        let p = normalized_propagation(&WeightedAdjacency::unit(&single));
        assert_eq!(p.matrix().to_rows(), vec![vec![1.0]]);

        let k2 = build_graph(&[(0, 1)], 2, 3).unwrap();
        let p = normalized_propagation(&WeightedAdjacency::unit(&k2));
        for v in p.matrix().as_slice() {
            assert!((v - 0.5).abs() < 1e-15);
        }
    }
}
