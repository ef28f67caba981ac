//! Random-hyperplane forest for approximate nearest-neighbour search over
//! pooled embeddings, plus the cluster assignment rule built on top of it.
//!
//! Persisted layout (little-endian):
//!
//! ```text
//! "RPAN" | version: u16
//! n_trees u32 | leaf_capacity u32 | seed u64 | budget_factor u32 | exact u8 | rule u8
//! dim u32 | count u64 | vectors: count*dim f32 | labels: count i64 | ids: count str
//! n_tau u64 | tau: n_tau f64
//! ```
//!
//! Trees are not stored; they are rebuilt from the seed on load.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::euclidean;
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};
use crate::rng::{stream, StreamRng};

const MAGIC: &[u8; 4] = b"RPAN";
const VERSION: u16 = 1;

/// How an unseen vector is matched to a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityRule {
    /// Cluster of the nearest non-noise item among the top-k.
    #[default]
    NearestMember,
    /// Cluster with the nearest centroid; the distance filter still uses the
    /// nearest retrieved member of that cluster.
    Centroid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnParams {
    pub n_trees: usize,
    pub leaf_capacity: usize,
    pub seed: u64,
    /// Search budget is `n_trees * k * budget_factor` visited nodes.
    pub budget_factor: usize,
    /// Skip the trees and scan every item.
    pub exact: bool,
    pub rule: ProximityRule,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            n_trees: 10,
            leaf_capacity: 32,
            seed: 0,
            budget_factor: 256,
            exact: false,
            rule: ProximityRule::NearestMember,
        }
    }
}

impl AnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.leaf_capacity == 0 || self.budget_factor == 0 {
            return Err(Error::Config("ann n_trees, leaf_capacity and budget_factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Split {
        normal: Vec<f32>,
        offset: f32,
        left: u32,
        right: u32,
    },
    Leaf(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

/// One retrieved item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    /// Exact Euclidean distance to the query.
    pub distance: f64,
    pub label: i32,
}

/// Why a query could not be matched to a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    NoData,
    TooFar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment {
    Cluster { label: i32, distance: f64 },
    Rejected(Rejection),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnForest {
    params: AnnParams,
    dim: usize,
    vectors: Vec<f32>,
    labels: Vec<i32>,
    ids: Vec<String>,
    tau: Vec<f64>,
    centroids: Vec<Option<Vec<f32>>>,
    trees: Vec<Tree>,
}

/// Max-heap entry keyed on the margin bound.
struct Pending {
    priority: f32,
    tree: u32,
    node: u32,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .total_cmp(&other.priority)
            .then_with(|| other.tree.cmp(&self.tree))
            .then_with(|| other.node.cmp(&self.node))
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl AnnForest {
    /// Builds the forest. `tau[l]` is the distance filter of cluster `l`.
    pub fn build(ids: Vec<String>, vectors: Vec<Vec<f32>>, labels: Vec<i32>, tau: Vec<f64>, params: AnnParams) -> Result<Self> {
        params.validate()?;
        if vectors.is_empty() {
            return Err(Error::Contract("ann index needs at least one item".into()));
        }
        if ids.len() != vectors.len() || labels.len() != vectors.len() {
            return Err(Error::Dimension {
                op: "ann build",
                left: vec![vectors.len()],
                right: vec![ids.len(), labels.len()],
            });
        }
        let dim = vectors[0].len();
        if let Some(bad) = vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::Dimension {
                op: "ann build",
                left: vec![dim],
                right: vec![bad.len()],
            });
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ann item vectors".into()));
        }
        let flat: Vec<f32> = vectors.into_iter().flatten().collect();
        Ok(Self::assemble(params, dim, flat, labels, ids, tau))
    }

    fn assemble(params: AnnParams, dim: usize, vectors: Vec<f32>, labels: Vec<i32>, ids: Vec<String>, tau: Vec<f64>) -> Self {
        let mut forest = Self {
            params,
            dim,
            vectors,
            labels,
            ids,
            tau,
            centroids: Vec::new(),
            trees: Vec::new(),
        };
        forest.centroids = forest.compute_centroids();
        if !params.exact {
            let mut rng = stream(params.seed, "ann");
            let all: Vec<u32> = (0..forest.len() as u32).collect();
            forest.trees = (0..params.n_trees)
                .map(|_| {
                    let mut tree = Tree { nodes: Vec::new() };
                    forest.grow(&mut tree, all.clone(), &mut rng);
                    tree
                })
                .collect();
        }
        forest
    }

    fn compute_centroids(&self) -> Vec<Option<Vec<f32>>> {
        let k = self.labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
        let mut sums = vec![vec![0f64; self.dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= 0 {
                counts[l as usize] += 1;
                for (s, &v) in sums[l as usize].iter_mut().zip(self.item(i)) {
                    *s += f64::from(v);
                }
            }
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| (c > 0).then(|| s.into_iter().map(|v| (v / c as f64) as f32).collect()))
            .collect()
    }

    /// Appends the subtree over `items` and returns its node index.
    fn grow(&self, tree: &mut Tree, items: Vec<u32>, rng: &mut StreamRng) -> u32 {
        let slot = tree.nodes.len() as u32;
        if items.len() <= self.params.leaf_capacity {
            tree.nodes.push(Node::Leaf(items));
            return slot;
        }
        tree.nodes.push(Node::Leaf(Vec::new()));
        let a = items[rng.random_range(0..items.len())];
        let mut b = items[rng.random_range(0..items.len() - 1)];
        if b == a {
            b = items[items.len() - 1];
        }
        let (pa, pb) = (self.item(a as usize), self.item(b as usize));
        let mut normal: Vec<f32> = pa.iter().zip(pb).map(|(x, y)| x - y).collect();
        let norm = dot(&normal, &normal).sqrt();
        let (mut left, mut right) = (Vec::new(), Vec::new());
        let mut offset = 0.0;
        if norm > 0.0 {
            normal.iter_mut().for_each(|v| *v /= norm);
            let mid: Vec<f32> = pa.iter().zip(pb).map(|(x, y)| 0.5 * (x + y)).collect();
            offset = dot(&normal, &mid);
            for &i in &items {
                if dot(&normal, self.item(i as usize)) - offset < 0.0 {
                    left.push(i);
                } else {
                    right.push(i);
                }
            }
        }
        if left.is_empty() || right.is_empty() {
            // Duplicates: no hyperplane separates them, so halve the list with
            // a zero normal; the query sends every point right.
            normal = vec![0.0; self.dim];
            offset = 0.0;
            right = items;
            left = right.split_off(right.len() / 2);
        }
        let l = self.grow(tree, left, rng);
        let r = self.grow(tree, right, rng);
        tree.nodes[slot as usize] = Node::Split {
            normal,
            offset,
            left: l,
            right: r,
        };
        slot
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn item(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }

    fn check_dim(&self, q: &[f32]) -> Result<()> {
        if q.len() != self.dim {
            return Err(Error::Dimension {
                op: "ann query",
                left: vec![self.dim],
                right: vec![q.len()],
            });
        }
        Ok(())
    }

    fn ranked(&self, q: &[f32], candidates: impl Iterator<Item = usize>, k: usize) -> Vec<Neighbor> {
        let mut out: Vec<Neighbor> = candidates
            .map(|index| Neighbor {
                index,
                distance: euclidean(q, self.item(index)),
                label: self.labels[index],
            })
            .collect();
        out.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
        out.truncate(k);
        out
    }

    /// Exact k-NN by scanning every item.
    pub fn brute_force(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.check_dim(q)?;
        Ok(self.ranked(q, 0..self.len(), k))
    }

    /// k nearest candidates under the default budget.
    pub fn query(&self, q: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        self.query_with_budget(q, k, Some(self.params.n_trees * k.max(1) * self.params.budget_factor))
    }

    /// `budget` caps the number of tree nodes visited; `None` visits all.
    /// The search continues past the budget until at least `k` candidates
    /// have been gathered or the trees are exhausted.
    pub fn query_with_budget(&self, q: &[f32], k: usize, budget: Option<usize>) -> Result<Vec<Neighbor>> {
        self.check_dim(q)?;
        if self.params.exact {
            return Ok(self.ranked(q, 0..self.len(), k));
        }
        let mut seen = vec![false; self.len()];
        let mut candidates = Vec::new();
        let mut heap: BinaryHeap<Pending> = (0..self.trees.len() as u32)
            .map(|tree| Pending {
                priority: f32::INFINITY,
                tree,
                node: 0,
            })
            .collect();
        let mut visited = 0usize;
        while let Some(p) = heap.pop() {
            if budget.is_some_and(|b| visited >= b) && candidates.len() >= k {
                break;
            }
            visited += 1;
            match &self.trees[p.tree as usize].nodes[p.node as usize] {
                Node::Leaf(items) => {
                    for &i in items {
                        if !std::mem::replace(&mut seen[i as usize], true) {
                            candidates.push(i as usize);
                        }
                    }
                }
                Node::Split {
                    normal,
                    offset,
                    left,
                    right,
                } => {
                    let margin = dot(normal, q) - offset;
                    heap.push(Pending {
                        priority: p.priority.min(margin),
                        tree: p.tree,
                        node: *right,
                    });
                    heap.push(Pending {
                        priority: p.priority.min(-margin),
                        tree: p.tree,
                        node: *left,
                    });
                }
            }
        }
        Ok(self.ranked(q, candidates.into_iter(), k))
    }

    /// Matches `q` to a cluster from its `k` nearest retrieved items.
    pub fn assign_cluster(&self, q: &[f32], k: usize) -> Result<Assignment> {
        let neighbors = self.query(q, k)?;
        let nearest_of = |label: i32| neighbors.iter().find(|n| n.label == label);
        let chosen = match self.params.rule {
            ProximityRule::NearestMember => neighbors.iter().find(|n| n.label >= 0).copied(),
            ProximityRule::Centroid => {
                if neighbors.iter().all(|n| n.label < 0) {
                    None
                } else {
                    let best = self
                        .centroids
                        .iter()
                        .enumerate()
                        .filter_map(|(l, c)| c.as_ref().map(|c| (l as i32, euclidean(q, c))))
                        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                    match best.and_then(|(l, _)| nearest_of(l)) {
                        Some(n) => Some(*n),
                        None => return Ok(Assignment::Rejected(Rejection::TooFar)),
                    }
                }
            }
        };
        let Some(n) = chosen else {
            return Ok(Assignment::Rejected(Rejection::NoData));
        };
        let limit = self.tau.get(n.label as usize).copied().unwrap_or(f64::NAN);
        // A NaN threshold (cluster too small to measure) accepts nothing.
        if !(n.distance <= limit) {
            return Ok(Assignment::Rejected(Rejection::TooFar));
        }
        Ok(Assignment::Cluster {
            label: n.label,
            distance: n.distance,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        w.bytes(MAGIC)?;
        w.u16(VERSION)?;
        let p = &self.params;
        w.u32(p.n_trees as u32)?;
        w.u32(p.leaf_capacity as u32)?;
        w.u64(p.seed)?;
        w.u32(p.budget_factor as u32)?;
        w.u8(u8::from(p.exact))?;
        w.u8(match p.rule {
            ProximityRule::NearestMember => 0,
            ProximityRule::Centroid => 1,
        })?;
        w.u32(self.dim as u32)?;
        w.u64(self.len() as u64)?;
        w.f32s(&self.vectors)?;
        for &l in &self.labels {
            w.i64(i64::from(l))?;
        }
        for id in &self.ids {
            w.str(id)?;
        }
        w.u64(self.tau.len() as u64)?;
        for &t in &self.tau {
            w.f64(t)?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        r.magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Version {
                expected: VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let n_trees = r.u32()? as usize;
        let leaf_capacity = r.u32()? as usize;
        let seed = r.u64()?;
        let budget_factor = r.u32()? as usize;
        let exact = r.u8()? != 0;
        let rule = match r.u8()? {
            0 => ProximityRule::NearestMember,
            1 => ProximityRule::Centroid,
            other => return Err(Error::Format(format!("unknown proximity rule {other}"))),
        };
        let params = AnnParams {
            n_trees,
            leaf_capacity,
            seed,
            budget_factor,
            exact,
            rule,
        };
        params.validate()?;
        let dim = r.u32()? as usize;
        let count = r.u64()? as usize;
        if count == 0 || dim == 0 {
            return Err(Error::Format("empty ann index".into()));
        }
        let vectors = r.f32s(count * dim)?;
        let labels = (0..count)
            .map(|_| r.i64().and_then(|l| i32::try_from(l).map_err(|_| Error::Format("label out of range".into()))))
            .collect::<Result<Vec<_>>>()?;
        let ids = (0..count).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let n_tau = r.u64()? as usize;
        let tau = (0..n_tau).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(params, dim, vectors, labels, ids, tau))
    }
}
