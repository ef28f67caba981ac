//! HDBSCAN: core distances, mutual reachability MST (dense Prim),
//! single-linkage hierarchy, condensed tree and excess-of-mass selection.
//!
//! Conventions follow the widely used reference implementation: the core
//! distance counts the point itself among its `min_samples` neighbours, the
//! root of the condensed tree is never selected, and condensed-tree cluster
//! ids start at `n` (the root) while points keep ids `0..n`.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::euclidean;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 15,
            min_samples: 5,
        }
    }
}

impl ClusterParams {
    pub fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 || self.min_samples < 1 {
            return Err(Error::Config(format!(
                "need min_cluster_size >= 2 and min_samples >= 1, got {} and {}",
                self.min_cluster_size, self.min_samples
            )));
        }
        Ok(())
    }
}

/// One row of the condensed tree. `child < n` is a point, otherwise a
/// cluster id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: usize,
    pub lambda: f64,
    pub size: usize,
}

/// MST edge over mutual reachability distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hierarchy {
    /// Per point: `-1` for noise, else `0..K`.
    pub labels: Vec<i32>,
    pub condensed: Vec<CondensedEdge>,
    /// Stability of every condensed-tree cluster, keyed by cluster id.
    pub stability: BTreeMap<usize, f64>,
    /// Condensed-tree id of label `k` at index `k`.
    pub selected: Vec<usize>,
}

/// Distance from each point to its `min_samples`-th nearest neighbour,
/// counting the point itself as the first.
pub fn core_distances(points: &[Vec<f32>], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let k = min_samples.clamp(1, n.max(1)) - 1;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row: Vec<f64> = points.iter().map(|q| euclidean(&points[i], q)).collect();
            let (_, kth, _) = row.select_nth_unstable_by(k, f64::total_cmp);
            *kth
        })
        .collect()
}

pub fn mutual_reachability(points: &[Vec<f32>], core: &[f64], a: usize, b: usize) -> f64 {
    euclidean(&points[a], &points[b]).max(core[a]).max(core[b])
}

/// Minimum spanning tree over mutual reachability with an O(n²) Prim scan,
/// edges in insertion order. Ties pick the lowest point index.
pub fn prim_mst(points: &[Vec<f32>], core: &[f64]) -> Vec<MstEdge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let updates: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .filter(|&j| !in_tree[j])
            .map(|j| (j, mutual_reachability(points, core, current, j)))
            .collect();
        for (j, d) in updates {
            if d < best[j] {
                best[j] = d;
                from[j] = current;
            }
        }
        let mut next = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (next == usize::MAX || best[j] < best[next]) {
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push(MstEdge {
            a: from[next],
            b: next,
            weight: best[next],
        });
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage merges `(left, right, distance, size)`; merge `i` creates
/// node `n + i`.
fn single_linkage(n: usize, mut edges: Vec<MstEdge>) -> Vec<(usize, usize, f64, usize)> {
    edges.sort_by(|x, y| x.weight.total_cmp(&y.weight));
    let mut uf = UnionFind::new(2 * n - 1);
    let mut size = vec![1usize; 2 * n - 1];
    let mut out = Vec::with_capacity(n - 1);
    for (i, e) in edges.iter().enumerate() {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        let node = n + i;
        uf.parent[ra] = node;
        uf.parent[rb] = node;
        size[node] = size[ra] + size[rb];
        out.push((ra, rb, e.weight, size[node]));
    }
    out
}

fn condense(n: usize, merges: &[(usize, usize, f64, usize)], min_cluster_size: usize, lambda_cap: f64) -> Vec<CondensedEdge> {
    let root = 2 * n - 2;
    let lambda_of = |d: f64| if d > 0.0 { (1.0 / d).min(lambda_cap) } else { lambda_cap };
    let children = |node: usize| merges[node - n];
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].3 };
    let leaves = |node: usize| {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let (l, r, _, _) = children(x);
                stack.push(r);
                stack.push(l);
            }
        }
        out
    };

    let mut label = vec![0usize; 2 * n - 1];
    label[root] = n;
    let mut next_label = n + 1;
    let mut out = Vec::new();
    // Breadth-first from the root, as the reference does.
    let mut queue = std::collections::VecDeque::from([root]);
    let mut ignore = vec![false; 2 * n - 1];
    while let Some(node) = queue.pop_front() {
        if node < n || ignore[node] {
            continue;
        }
        let (left, right, dist, _) = children(node);
        let lambda = lambda_of(dist);
        let (ls, rs) = (size_of(left), size_of(right));
        let parent = label[node];
        match (ls >= min_cluster_size, rs >= min_cluster_size) {
            (true, true) => {
                for (child, sz) in [(left, ls), (right, rs)] {
                    label[child] = next_label;
                    out.push(CondensedEdge {
                        parent,
                        child: next_label,
                        lambda,
                        size: sz,
                    });
                    next_label += 1;
                    queue.push_back(child);
                }
            }
            (false, false) => {
                for side in [left, right] {
                    for p in leaves(side) {
                        out.push(CondensedEdge {
                            parent,
                            child: p,
                            lambda,
                            size: 1,
                        });
                    }
                    if side >= n {
                        ignore[side] = true;
                    }
                }
            }
            (big_left, _) => {
                let (big, small) = if big_left { (left, right) } else { (right, left) };
                label[big] = parent;
                queue.push_back(big);
                for p in leaves(small) {
                    out.push(CondensedEdge {
                        parent,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
                if small >= n {
                    ignore[small] = true;
                }
            }
        }
    }
    out
}

fn stabilities(n: usize, condensed: &[CondensedEdge]) -> BTreeMap<usize, f64> {
    let mut birth: BTreeMap<usize, f64> = BTreeMap::new();
    birth.insert(n, 0.0);
    for e in condensed.iter().filter(|e| e.child >= n) {
        birth.insert(e.child, e.lambda);
    }
    let mut out: BTreeMap<usize, f64> = birth.keys().map(|&c| (c, 0.0)).collect();
    for e in condensed {
        *out.get_mut(&e.parent).expect("parent is a cluster") += (e.lambda - birth[&e.parent]) * e.size as f64;
    }
    out
}

/// Excess-of-mass selection; a parent is kept unless its children's
/// combined stability is strictly larger. The root is never selected.
fn select_eom(n: usize, condensed: &[CondensedEdge], stability: &BTreeMap<usize, f64>) -> Vec<usize> {
    let mut kids: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in condensed.iter().filter(|e| e.child >= n) {
        kids.entry(e.parent).or_default().push(e.child);
    }
    let mut score = stability.clone();
    let mut is_cluster: BTreeMap<usize, bool> = stability.keys().map(|&c| (c, c != n)).collect();
    for &node in stability.keys().rev() {
        if node == n {
            continue;
        }
        let sub: f64 = kids.get(&node).map_or(0.0, |ch| ch.iter().map(|c| score[c]).sum());
        if kids.contains_key(&node) && sub > score[&node] {
            is_cluster.insert(node, false);
            score.insert(node, sub);
        } else {
            let mut stack: Vec<usize> = kids.get(&node).cloned().unwrap_or_default();
            while let Some(d) = stack.pop() {
                is_cluster.insert(d, false);
                stack.extend(kids.get(&d).cloned().unwrap_or_default());
            }
        }
    }
    is_cluster.into_iter().filter(|&(_, v)| v).map(|(c, _)| c).collect()
}

fn assign_labels(n: usize, condensed: &[CondensedEdge], selected: &[usize]) -> Vec<i32> {
    let mut parent_of: BTreeMap<usize, usize> = BTreeMap::new();
    for e in condensed {
        parent_of.insert(e.child, e.parent);
    }
    let label_of: BTreeMap<usize, i32> = selected.iter().enumerate().map(|(k, &c)| (c, k as i32)).collect();
    (0..n)
        .map(|p| {
            let mut node = parent_of.get(&p).copied();
            while let Some(c) = node {
                if let Some(&l) = label_of.get(&c) {
                    return l;
                }
                node = parent_of.get(&c).copied();
            }
            -1
        })
        .collect()
}

/// Full pipeline. Fewer points than `min_cluster_size` yields all noise.
pub fn hdbscan(points: &[Vec<f32>], params: &ClusterParams) -> Result<Hierarchy> {
    params.validate()?;
    let n = points.len();
    if let Some(p) = points.first() {
        let dim = p.len();
        if let Some(bad) = points.iter().find(|q| q.len() != dim) {
            return Err(Error::Dimension {
                op: "hdbscan",
                left: vec![dim],
                right: vec![bad.len()],
            });
        }
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hdbscan input".into()));
    }
    if n < params.min_cluster_size || n < 2 {
        warn!("{n} points is below min_cluster_size {}; everything is noise", params.min_cluster_size);
        return Ok(Hierarchy {
            labels: vec![-1; n],
            condensed: Vec::new(),
            stability: BTreeMap::new(),
            selected: Vec::new(),
        });
    }
    let core = core_distances(points, params.min_samples);
    let mst = prim_mst(points, &core);
    // Zero distances get a finite density that scales with the data.
    let min_positive = mst.iter().map(|e| e.weight).filter(|&w| w > 0.0).fold(f64::INFINITY, f64::min);
    let lambda_cap = if min_positive.is_finite() { 2.0 / min_positive } else { 1.0 };
    let merges = single_linkage(n, mst);
    let condensed = condense(n, &merges, params.min_cluster_size, lambda_cap);
    let stability = stabilities(n, &condensed);
    let selected = select_eom(n, &condensed, &stability);
    let labels = assign_labels(n, &condensed, &selected);
    Ok(Hierarchy {
        labels,
        condensed,
        stability,
        selected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn blobs(seed: u64, per: usize, centers: &[[f32; 2]], sigma: f32) -> Vec<Vec<f32>> {
        let mut rng = stream(seed, "blobs");
        let mut out = Vec::new();
        for c in centers {
            for _ in 0..per {
                let dx: f32 = StandardNormal.sample(&mut rng);
                let dy: f32 = StandardNormal.sample(&mut rng);
                out.push(vec![c[0] + sigma * dx, c[1] + sigma * dy]);
            }
        }
        out
    }

    /// Kruskal over every pair, independent of the Prim scan.
    fn brute_force_mst_weights(points: &[Vec<f32>], core: &[f64]) -> Vec<f64> {
        let n = points.len();
        let mut all = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                all.push((mutual_reachability(points, core, a, b), a, b));
            }
        }
        all.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut uf = UnionFind::new(n);
        let mut out = Vec::new();
        for (w, a, b) in all {
            let (ra, rb) = (uf.find(a), uf.find(b));
            if ra != rb {
                uf.parent[ra] = rb;
                out.push(w);
            }
        }
        out
    }

    #[test]
    fn mst_matches_brute_force() {
        for seed in 0..5 {
            let mut rng = stream(seed, "mst");
            let n = 20 + 36 * seed as usize;
            let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
            let core = core_distances(&pts, 5);
            let mut prim: Vec<f64> = prim_mst(&pts, &core).iter().map(|e| e.weight).collect();
            prim.sort_by(f64::total_cmp);
            let brute = brute_force_mst_weights(&pts, &core);
            assert_eq!(prim, brute);
            assert_eq!(prim.iter().sum::<f64>(), brute.iter().sum::<f64>());
        }
    }

    #[test]
    fn core_distance_counts_self() {
        let pts = vec![vec![0.0], vec![1.0], vec![3.0], vec![7.0]];
        assert_eq!(core_distances(&pts, 1), vec![0.0; 4]);
        assert_eq!(core_distances(&pts, 2), vec![1.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn mutual_reachability_dominates_euclidean() {
        let mut rng = stream(3, "mr");
        let pts: Vec<Vec<f32>> = (0..60).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let core = core_distances(&pts, 5);
        for a in 0..60 {
            for b in 0..60 {
                assert!(mutual_reachability(&pts, &core, a, b) >= euclidean(&pts[a], &pts[b]));
            }
        }
    }

    #[test]
    fn three_blobs_recovered() {
        let pts = blobs(1, 100, &[[0.0, 0.0], [10.0, 0.0], [5.0, 8.66]], 1.0);
        let h = hdbscan(&pts, &ClusterParams::default()).unwrap();
        assert_eq!(h.selected.len(), 3);
        for b in 0..3 {
            let labels = &h.labels[b * 100..(b + 1) * 100];
            let mut counts = BTreeMap::new();
            for &l in labels {
                *counts.entry(l).or_insert(0) += 1;
            }
            let (&top, &count) = counts.iter().max_by_key(|(_, &c)| c).unwrap();
            assert!(top >= 0 && count >= 95, "blob {b}: {counts:?}");
        }
    }

    #[test]
    fn uniform_noise_with_large_min_cluster_is_all_noise() {
        let mut rng = stream(2, "u");
        let pts: Vec<Vec<f32>> = (0..50).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let h = hdbscan(&pts, &ClusterParams { min_cluster_size: 30, min_samples: 5 }).unwrap();
        assert!(h.labels.iter().all(|&l| l == -1), "{:?}", h.labels);
    }

    #[test]
    fn too_few_points_is_noise() {
        let pts = vec![vec![0.0f32, 0.0]; 5];
        let h = hdbscan(&pts, &ClusterParams::default()).unwrap();
        assert_eq!(h.labels, vec![-1; 5]);
    }

    #[test]
    fn scaling_preserves_labels() {
        let pts = blobs(4, 60, &[[0.0, 0.0], [8.0, 1.0], [3.0, 9.0], [12.0, 10.0]], 1.2);
        let scaled: Vec<Vec<f32>> = pts.iter().map(|p| p.iter().map(|v| v * 10.0).collect()).collect();
        let a = hdbscan(&pts, &ClusterParams::default()).unwrap();
        let b = hdbscan(&scaled, &ClusterParams::default()).unwrap();
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn clusters_meet_minimum_size_and_labels_are_contiguous() {
        let pts = blobs(5, 40, &[[0.0, 0.0], [6.0, 0.0], [0.0, 6.0], [30.0, 30.0]], 1.0);
        let params = ClusterParams::default();
        let h = hdbscan(&pts, &params).unwrap();
        let k = h.selected.len() as i32;
        for l in 0..k {
            let size = h.labels.iter().filter(|&&x| x == l).count();
            assert!(size >= params.min_cluster_size);
        }
        assert!(h.labels.iter().all(|&l| l >= -1 && l < k));
    }

    #[test]
    fn duplicate_points_are_handled() {
        let mut pts = vec![vec![1.0f32, 1.0]; 20];
        pts.extend(vec![vec![50.0f32, 50.0]; 20]);
        let h = hdbscan(&pts, &ClusterParams::default()).unwrap();
        assert_eq!(h.selected.len(), 2);
        assert!(h.labels[..20].iter().all(|&l| l == h.labels[0]));
        assert!(h.labels[20..].iter().all(|&l| l == h.labels[20]));
        assert_ne!(h.labels[0], h.labels[20]);
    }
}
