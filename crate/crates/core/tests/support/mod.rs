//! Brute-force references shared by the integration tests.

#![allow(dead_code)]

use cgcn::dataio::{synth_sequence, Archetype};
use cgcn::graph::{FramePose, SkeletonGraph, SkeletonTemplate};
use cgcn::linalg::Matrix;
use nalgebra::{Unit, UnitQuaternion, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(seed)
}

/// Random spanning tree as `(parent, child)` edges, child `i` hanging off some `j < i`.
pub fn random_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    (1..n).map(|i| (rng.gen_range(0..i), i)).collect()
}

/// Symmetric weighted adjacency of a random connected graph. Integer weights
/// make ties between path lengths exact.
pub fn random_connected(n: usize, extra: f64, integer_weights: bool, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    let weight = |rng: &mut ChaCha8Rng| {
        if integer_weights {
            rng.gen_range(1..=3) as f64
        } else {
            rng.gen_range(0.2..2.0)
        }
    };
    for (p, c) in random_tree(n, rng) {
        let w = weight(rng);
        m[(p, c)] = w;
        m[(c, p)] = w;
    }
    for i in 0..n {
        for j in i + 1..n {
            if m[(i, j)] == 0.0 && rng.gen_bool(extra) {
                let w = weight(rng);
                m[(i, j)] = w;
                m[(j, i)] = w;
            }
        }
    }
    m
}

pub fn floyd_warshall(adj: &Matrix) -> Vec<Vec<f64>> {
    let n = adj.rows();
    let mut d = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        d[i][i] = 0.0;
        for j in 0..n {
            if adj[(i, j)] > 0.0 {
                d[i][j] = adj[(i, j)];
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d
}

pub fn closeness(adj: &Matrix) -> Vec<f64> {
    let n = adj.rows();
    floyd_warshall(adj)
        .iter()
        .map(|row| (n - 1) as f64 / row.iter().sum::<f64>())
        .collect()
}

fn simple_paths(adj: &Matrix, at: usize, target: usize, path: &mut Vec<usize>, length: f64, out: &mut Vec<(Vec<usize>, f64)>) {
    if at == target {
        out.push((path.clone(), length));
        return;
    }
    for next in 0..adj.rows() {
        if adj[(at, next)] > 0.0 && !path.contains(&next) {
            path.push(next);
            simple_paths(adj, next, target, path, length + adj[(at, next)], out);
            path.pop();
        }
    }
}

/// Edge betweenness by listing every simple path: for each unordered pair
/// other than the bone's own endpoints, the share of shortest paths using the bone.
pub fn edge_betweenness(adj: &Matrix) -> Matrix {
    let n = adj.rows();
    let mut b = Matrix::zeros(n, n);
    for s in 0..n {
        for t in s + 1..n {
            let mut paths = Vec::new();
            simple_paths(adj, s, t, &mut vec![s], 0.0, &mut paths);
            let best = paths.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let shortest: Vec<&Vec<usize>> = paths
                .iter()
                .filter(|p| (p.1 - best).abs() <= 1e-9 * best)
                .map(|p| &p.0)
                .collect();
            let share = 1.0 / shortest.len() as f64;
            for path in shortest {
                for hop in path.windows(2) {
                    let (u, v) = (hop[0].min(hop[1]), hop[0].max(hop[1]));
                    if (u, v) != (s, t) {
                        b[(u, v)] += share;
                        b[(v, u)] += share;
                    }
                }
            }
        }
    }
    b
}

/// `a·b − 1` per tree edge, where `a` and `b` are the sizes of the two sides.
pub fn tree_betweenness(edges: &[(usize, usize)], n: usize) -> Matrix {
    let mut b = Matrix::zeros(n, n);
    for (k, &(p, c)) in edges.iter().enumerate() {
        let mut side = vec![false; n];
        side[c] = true;
        let mut stack = vec![c];
        while let Some(u) = stack.pop() {
            for (x, &(s, t)) in edges.iter().enumerate() {
                if x == k {
                    continue;
                }
                for (from, to) in [(s, t), (t, s)] {
                    if from == u && !side[to] {
                        side[to] = true;
                        stack.push(to);
                    }
                }
            }
        }
        let a = side.iter().filter(|&&x| x).count();
        let v = (a * (n - a)) as f64 - 1.0;
        b[(p, c)] = v;
        b[(c, p)] = v;
    }
    b
}

/// Connected three-joint induced subgraphs containing each pair, by enumeration.
pub fn triplets(adj: &Matrix) -> Matrix {
    let n = adj.rows();
    let linked = |i: usize, j: usize| adj[(i, j)] > 0.0;
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let edges = linked(i, j) as usize + linked(j, k) as usize + linked(i, k) as usize;
                if edges >= 2 {
                    for u in [i, j, k] {
                        for v in [i, j, k] {
                            w[(u, v)] += 1.0;
                        }
                    }
                }
            }
        }
    }
    w
}

pub fn max_normalize(m: &Matrix) -> Matrix {
    let peak = m.as_slice().iter().cloned().fold(0.0, f64::max);
    if peak > 0.0 {
        m.scale(1.0 / peak)
    } else {
        m.clone()
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Hop counts from `source` on the nonzero pattern of `adj`.
pub fn hops(adj: &Matrix, source: usize) -> Vec<usize> {
    let n = adj.rows();
    let mut d = vec![usize::MAX; n];
    d[source] = 0;
    let mut queue = std::collections::VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if adj[(u, v)] > 0.0 && d[v] == usize::MAX {
                d[v] = d[u] + 1;
                queue.push_back(v);
            }
        }
    }
    d
}

/// A skeleton and clip: the built-in template with a synthetic motion, or a
/// random graph with undirected cycles and random joint positions.
pub fn random_case(seed: u64) -> (SkeletonGraph, Vec<FramePose>) {
    let mut rng = rng(seed);
    if seed.is_multiple_of(2) {
        let arch = Archetype::ALL[rng.gen_range(0..4)];
        let seq = synth_sequence(arch, 12, 0.01, "clip", 0, &mut rng).unwrap();
        let graph = SkeletonTemplate::builtin("ntu25").unwrap().graph().unwrap();
        return (graph, seq.subjects[0].clone());
    }
    let n = rng.gen_range(4..=16);
    let m = random_connected(n, 0.25, true, &mut rng);
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| m[(i, j)] > 0.0)
        .collect();
    let graph = SkeletonGraph::new(edges, n, 3).unwrap();
    let poses = (0..6)
        .map(|_| FramePose::new((0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect(), 3, None).unwrap())
        .collect();
    (graph, poses)
}

pub fn transform(poses: &[FramePose], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<FramePose> {
    poses.iter().map(|p| p.map_joints(&f)).collect()
}

pub fn rigid_motion(rng: &mut ChaCha8Rng) -> impl Fn(&[f64]) -> Vec<f64> {
    let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let rotation = UnitQuaternion::from_axis_angle(&axis, rng.gen_range(-3.1..3.1));
    let shift = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    move |p: &[f64]| {
        let q = rotation * Vector3::new(p[0], p[1], p[2]) + shift;
        vec![q.x, q.y, q.z]
    }
}
