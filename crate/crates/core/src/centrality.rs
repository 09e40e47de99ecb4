//! Joint, bone and subgraph centrality matrices.
//!
//! * `J` holds closeness centrality. The per-joint closeness
//!   `(N - 1) / Σ_j d(i, j)` is computed on bone-length-weighted shortest
//!   paths and spread into a symmetric matrix as the outer product of the
//!   closeness vector with itself.
//! * `B` holds edge betweenness: for every bone, the number of shortest paths
//!   between other joint pairs that route through it (Brandes accumulation).
//!   Weighting each path by `d_lq(e) / d_lq` changes nothing, since every
//!   shortest path through `e` has length exactly `d_lq`.
//! * `W` counts, for each joint pair, the connected 3-joint induced subgraphs
//!   (2-paths and triangles) containing both joints.
//!
//! Each matrix is divided by its largest entry before it is summed with the
//! normalized adjacency `Ã`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{
    bone_lengths, check_pose, guard_zero_lengths, normalized_propagation, FramePose, PropagationKind,
    PropagationMatrix, SkeletonGraph, WeightedAdjacency,
};
use crate::linalg::Matrix;

/// Relative tolerance under which two path lengths count as equal.
pub const TIE_TOLERANCE: f64 = 1e-9;

fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPathTable {
    /// Path lengths; `f64::INFINITY` marks unreachable pairs.
    pub dist: Matrix,
    /// Number of distinct shortest paths; 0 for unreachable pairs.
    pub sigma: Matrix,
}

impl ShortestPathTable {
    pub fn len(&self) -> usize {
        self.dist.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Queued {
    dist: f64,
    node: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then node index.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Label-setting search from one source, recording everything Brandes needs.
struct SourceSearch {
    dist: Vec<f64>,
    sigma: Vec<f64>,
    preds: Vec<Vec<usize>>,
    /// Settled nodes in non-decreasing distance.
    order: Vec<usize>,
}

fn search_from(neighbours: &[Vec<(usize, f64)>], source: usize) -> SourceSearch {
    let n = neighbours.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut sigma = vec![0.0; n];
    let mut preds = vec![Vec::new(); n];
    let mut settled = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    sigma[source] = 1.0;
    heap.push(Queued {
        dist: 0.0,
        node: source,
    });
    while let Some(Queued { node: v, .. }) = heap.pop() {
        if settled[v] {
            continue;
        }
        settled[v] = true;
        order.push(v);
        for &(w, weight) in &neighbours[v] {
            if settled[w] {
                continue;
            }
            let candidate = dist[v] + weight;
            if dist[w].is_finite() && ties(candidate, dist[w]) {
                sigma[w] += sigma[v];
                preds[w].push(v);
            } else if candidate < dist[w] {
                dist[w] = candidate;
                sigma[w] = sigma[v];
                preds[w].clear();
                preds[w].push(v);
                heap.push(Queued {
                    dist: candidate,
                    node: w,
                });
            }
        }
    }
    SourceSearch {
        dist,
        sigma,
        preds,
        order,
    }
}

fn checked_neighbours(adj: &WeightedAdjacency) -> Result<Vec<Vec<(usize, f64)>>> {
    let m = adj.matrix();
    for i in 0..adj.len() {
        for j in 0..adj.len() {
            if m[(i, j)] < 0.0 {
                return Err(Error::NegativeWeight(i, j));
            }
        }
    }
    Ok(adj.neighbour_lists())
}

/// All-pairs shortest distances and path counts, one search per source.
pub fn shortest_paths(adj: &WeightedAdjacency) -> Result<ShortestPathTable> {
    let neighbours = checked_neighbours(adj)?;
    let n = adj.len();
    let rows: Vec<SourceSearch> = (0..n).into_par_iter().map(|s| search_from(&neighbours, s)).collect();
    let mut dist = Matrix::zeros(n, n);
    let mut sigma = Matrix::zeros(n, n);
    for (s, row) in rows.iter().enumerate() {
        for t in 0..n {
            dist[(s, t)] = row.dist[t];
            sigma[(s, t)] = row.sigma[t];
        }
    }
    Ok(ShortestPathTable { dist, sigma })
}

/// Closeness `(N - 1) / Σ_j d(i, j)` of every joint.
pub fn joint_closeness(table: &ShortestPathTable) -> Result<Vec<f64>> {
    let n = table.len();
    if n == 1 {
        return Ok(vec![0.0]);
    }
    (0..n)
        .map(|i| {
            let total: f64 = table.dist.row(i).iter().sum();
            if total.is_finite() {
                Ok((n - 1) as f64 / total)
            } else {
                Err(Error::DisconnectedGraph)
            }
        })
        .collect()
}

/// Outer product of the closeness vector, max-normalized.
pub fn closeness_matrix(closeness: &[f64]) -> Matrix {
    let n = closeness.len();
    Matrix::from_fn(n, n, |i, j| closeness[i] * closeness[j]).max_normalized()
}

/// Raw edge betweenness over unordered joint pairs, excluding each bone's own
/// endpoint pair. Symmetric, zero off the edge set.
pub fn edge_betweenness_raw(adj: &WeightedAdjacency, table: &ShortestPathTable) -> Result<Matrix> {
    let neighbours = checked_neighbours(adj)?;
    let n = adj.len();
    if table.len() != n {
        return Err(Error::DimensionMismatch("path table does not match adjacency".into()));
    }
    let per_source: Vec<Matrix> = (0..n)
        .into_par_iter()
        .map(|s| {
            let search = search_from(&neighbours, s);
            let mut credit = Matrix::zeros(n, n);
            let mut delta = vec![0.0; n];
            for &w in search.order.iter().rev() {
                for &v in &search.preds[w] {
                    let c = search.sigma[v] / search.sigma[w] * (1.0 + delta[w]);
                    credit[(v, w)] += c;
                    delta[v] += c;
                }
            }
            credit
        })
        .collect();
    let mut b = Matrix::zeros(n, n);
    for credit in &per_source {
        for i in 0..n {
            for j in 0..n {
                b[(i, j)] += credit[(i, j)];
            }
        }
    }
    let a = adj.matrix();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if a[(i, j)] <= 0.0 {
                continue;
            }
            // Every unordered pair was counted once from each end.
            let mut value = (b[(i, j)] + b[(j, i)]) / 2.0;
            if ties(table.dist[(i, j)], a[(i, j)]) {
                value -= 1.0 / table.sigma[(i, j)];
            }
            let value = value.max(0.0);
            out[(i, j)] = value;
            out[(j, i)] = value;
        }
    }
    Ok(out)
}

/// Max-normalized edge betweenness matrix `B`.
pub fn edge_betweenness(adj: &WeightedAdjacency, table: &ShortestPathTable) -> Result<Matrix> {
    Ok(edge_betweenness_raw(adj, table)?.max_normalized())
}

/// Raw triplet co-membership counts; weights are ignored, only connectivity matters.
pub fn triplet_comembership_raw(adj: &WeightedAdjacency) -> Matrix {
    let n = adj.len();
    let a = adj.matrix();
    let linked = |i: usize, j: usize| a[(i, j)] > 0.0 || a[(j, i)] > 0.0;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && linked(i, j)).collect())
        .collect();
    let mut w = Matrix::zeros(n, n);
    for centre in 0..n {
        let around = &neighbours[centre];
        for (x, &p) in around.iter().enumerate() {
            for &q in &around[x + 1..] {
                // A triangle is found from all three corners; keep the smallest.
                if linked(p, q) && (centre > p || centre > q) {
                    continue;
                }
                let members = [centre, p, q];
                for &u in &members {
                    for &v in &members {
                        w[(u, v)] += 1.0;
                    }
                }
            }
        }
    }
    // The loop above adds one to each diagonal per triplet, and one to each
    // ordered off-diagonal pair.
    w
}

/// Max-normalized triplet co-membership matrix `W`.
pub fn triplet_comembership(adj: &WeightedAdjacency) -> Matrix {
    triplet_comembership_raw(adj).max_normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentralityMode {
    /// One computation on bone lengths averaged over all frames.
    #[default]
    SequenceMean,
    /// One computation per frame.
    PerFrame,
}

impl std::str::FromStr for CentralityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence_mean" => Ok(CentralityMode::SequenceMean),
            "per_frame" => Ok(CentralityMode::PerFrame),
            other => Err(Error::Config(format!("unknown centrality mode {other:?}"))),
        }
    }
}

/// Which centrality matrix a stream adds to `Ã`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    J,
    B,
    W,
    A,
}

impl Stream {
    pub const ALL: [Stream; 4] = [Stream::J, Stream::B, Stream::W, Stream::A];

    pub fn name(self) -> &'static str {
        match self {
            Stream::J => "J",
            Stream::B => "B",
            Stream::W => "W",
            Stream::A => "A",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "J" | "j" => Ok(Stream::J),
            "B" | "b" => Ok(Stream::B),
            "W" | "w" => Ok(Stream::W),
            "A" | "a" => Ok(Stream::A),
            other => Err(Error::Config(format!("unknown stream {other:?}"))),
        }
    }
}

/// Parses a comma-separated stream list such as `J,B,W,A`.
pub fn parse_streams(list: &str) -> Result<Vec<Stream>> {
    let mut streams = list.split(',').map(str::parse).collect::<Result<Vec<Stream>>>()?;
    streams.sort();
    streams.dedup();
    if streams.is_empty() {
        return Err(Error::Config("empty stream list".into()));
    }
    Ok(streams)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralitySet {
    #[serde(rename = "J")]
    pub j: Matrix,
    #[serde(rename = "B")]
    pub b: Matrix,
    #[serde(rename = "W")]
    pub w: Matrix,
    #[serde(rename = "A_tilde")]
    pub a_tilde: Matrix,
    pub mode: CentralityMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<usize>,
}

impl CentralitySet {
    pub fn len(&self) -> usize {
        self.a_tilde.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Ĉ = J + B + W + Ã`.
    pub fn c_hat(&self) -> PropagationMatrix {
        let sum = self
            .j
            .add(&self.b)
            .and_then(|m| m.add(&self.w))
            .and_then(|m| m.add(&self.a_tilde))
            .expect("centrality matrices share a shape");
        PropagationMatrix::new(sum, PropagationKind::CentralityAugmented).expect("sum of symmetric matrices")
    }

    /// `Ã` plus the stream's centrality matrix (`Ã` alone for the adjacency stream).
    pub fn stream_propagation(&self, stream: Stream) -> PropagationMatrix {
        let (matrix, kind) = match stream {
            Stream::J => (self.a_tilde.add(&self.j), PropagationKind::CentralityAugmented),
            Stream::B => (self.a_tilde.add(&self.b), PropagationKind::CentralityAugmented),
            Stream::W => (self.a_tilde.add(&self.w), PropagationKind::CentralityAugmented),
            Stream::A => (Ok(self.a_tilde.clone()), PropagationKind::AdjacencyNormalized),
        };
        PropagationMatrix::new(matrix.expect("same shape"), kind).expect("sum of symmetric matrices")
    }

    /// `Ã` plus the sum of the centrality matrices named in `streams`.
    pub fn summed_propagation(&self, streams: &[Stream]) -> PropagationMatrix {
        let mut m = self.a_tilde.clone();
        for s in streams {
            let extra = match s {
                Stream::J => &self.j,
                Stream::B => &self.b,
                Stream::W => &self.w,
                Stream::A => continue,
            };
            m = m.add(extra).expect("same shape");
        }
        let kind = if streams.iter().any(|&s| s != Stream::A) {
            PropagationKind::CentralityAugmented
        } else {
            PropagationKind::AdjacencyNormalized
        };
        PropagationMatrix::new(m, kind).expect("sum of symmetric matrices")
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        match name {
            "J" => Some(&self.j),
            "B" => Some(&self.b),
            "W" => Some(&self.w),
            "A_tilde" => Some(&self.a_tilde),
            _ => None,
        }
    }
}

/// Centralities for one set of bone lengths (given in graph edge order).
pub fn centrality_from_lengths(
    graph: &SkeletonGraph,
    lengths: &[f64],
    mode: CentralityMode,
    frame_index: Option<usize>,
) -> Result<CentralitySet> {
    let weighted = WeightedAdjacency::from_edge_weights(graph, lengths)?;
    let unit = WeightedAdjacency::unit(graph);
    let table = shortest_paths(&weighted)?;
    let closeness = joint_closeness(&table)?;
    Ok(CentralitySet {
        j: closeness_matrix(&closeness),
        b: edge_betweenness(&weighted, &table)?,
        w: triplet_comembership(&unit),
        a_tilde: normalized_propagation(&unit).matrix().clone(),
        mode,
        frame_index,
    })
}

/// One set for `SequenceMean`, one per frame for `PerFrame`.
pub fn assemble_centrality_set(
    graph: &SkeletonGraph,
    poses: &[FramePose],
    mode: CentralityMode,
) -> Result<Vec<CentralitySet>> {
    if poses.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for pose in poses {
        check_pose(graph, pose)?;
    }
    if !graph.is_connected() {
        return Err(Error::DisconnectedGraph);
    }
    match mode {
        CentralityMode::SequenceMean => {
            let mut mean = mean_bone_lengths(graph, poses)?;
            guard_zero_lengths(graph, &mut mean, false)?;
            Ok(vec![centrality_from_lengths(graph, &mean, mode, None)?])
        }
        CentralityMode::PerFrame => poses
            .par_iter()
            .enumerate()
            .map(|(t, pose)| {
                let mut lengths = bone_lengths(graph, pose)?;
                guard_zero_lengths(graph, &mut lengths, false)?;
                centrality_from_lengths(graph, &lengths, mode, Some(t))
            })
            .collect(),
    }
}

/// Per-bone length averaged over frames.
pub fn mean_bone_lengths(graph: &SkeletonGraph, poses: &[FramePose]) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; graph.edges().len()];
    for pose in poses {
        for (m, l) in mean.iter_mut().zip(bone_lengths(graph, pose)?) {
            *m += l;
        }
    }
    let t = poses.len() as f64;
    mean.iter_mut().for_each(|m| *m /= t);
    Ok(mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Highlight {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Top-`k` entries of the upper triangle (diagonal included), largest first,
/// ties by row then column. Zero entries are never highlighted.
pub fn highlights(matrix: &Matrix, k: usize) -> Vec<Highlight> {
    let mut entries: Vec<Highlight> = (0..matrix.rows())
        .flat_map(|i| (i..matrix.cols()).map(move |j| (i, j)))
        .map(|(i, j)| Highlight {
            i,
            j,
            value: matrix[(i, j)],
        })
        .filter(|h| h.value > 0.0)
        .collect();
    entries.sort_by(|a, b| b.value.total_cmp(&a.value).then((a.i, a.j).cmp(&(b.i, b.j))));
    entries.truncate(k);
    entries
}
