//! Behavior clustering of pooled trajectory embeddings.

mod hdbscan;
mod pca;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use hdbscan::{core_distances, hdbscan, mutual_reachability, prim_mst, ClusterParams, CondensedEdge, Hierarchy, MstEdge};
pub use pca::{pca_fit, Pca};

use crate::error::{Error, Result};

/// Euclidean distance with f64 accumulation.
pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Mean over rows with `padding == 1` of a row-major `[rows, dim]` matrix.
pub fn mean_pool(rows: &[f32], dim: usize, padding: &[u8]) -> Result<Vec<f32>> {
    if dim == 0 || rows.len() != padding.len() * dim {
        return Err(Error::Dimension {
            op: "mean_pool",
            left: vec![rows.len()],
            right: vec![padding.len(), dim],
        });
    }
    let mut acc = vec![0f64; dim];
    let mut count = 0usize;
    for (row, _) in rows.chunks_exact(dim).zip(padding).filter(|(_, &p)| p == 1) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::Contract("mean_pool over a chunk with no real rows".into()));
    }
    Ok(acc.into_iter().map(|v| (v / count as f64) as f32).collect())
}

/// Clustering result over a collection of pooled embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub params: ClusterParams,
    pub ids: Vec<String>,
    pub points: Vec<Vec<f32>>,
    pub hierarchy: Hierarchy,
    /// Distance filter threshold per label.
    pub tau: Vec<f64>,
}

impl ClusterModel {
    pub fn fit(ids: Vec<String>, points: Vec<Vec<f32>>, params: ClusterParams) -> Result<Self> {
        if ids.len() != points.len() {
            return Err(Error::Dimension {
                op: "cluster ids",
                left: vec![ids.len()],
                right: vec![points.len()],
            });
        }
        let hierarchy = hdbscan(&points, &params)?;
        let tau = cluster_distance_stats(&points, &hierarchy.labels);
        Ok(Self {
            params,
            ids,
            points,
            hierarchy,
            tau,
        })
    }

    pub fn labels(&self) -> &[i32] {
        &self.hierarchy.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.hierarchy.selected.len()
    }

    /// Indices of the members of `label`.
    pub fn members(&self, label: i32) -> Vec<usize> {
        self.labels().iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }

    /// `chunk_id,label`.
    pub fn write_assignments<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["chunk_id", "label"])?;
        for (id, l) in self.ids.iter().zip(self.labels()) {
            w.write_record([id.as_str(), &l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `parent,child,lambda,size`.
    pub fn write_condensed_tree<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parent", "child", "lambda", "size"])?;
        for e in &self.hierarchy.condensed {
            w.write_record([e.parent.to_string(), e.child.to_string(), e.lambda.to_string(), e.size.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `chunk_id,pc1,pc2,pc3,label`; missing components are written as 0.
    pub fn write_pca<W: Write>(&self, pca: &Pca, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["chunk_id", "pc1", "pc2", "pc3", "label"])?;
        for ((id, p), l) in self.ids.iter().zip(&self.points).zip(self.labels()) {
            let z = pca.transform(p);
            let pc = |k: usize| z.get(k).copied().unwrap_or(0.0).to_string();
            w.write_record([id.clone(), pc(0), pc(1), pc(2), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Linear-interpolation percentile of an unsorted sample, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Per label `0..K`: the 95th percentile of each member's distance to its
/// nearest fellow member.
pub fn cluster_distance_stats(points: &[Vec<f32>], labels: &[i32]) -> Vec<f64> {
    let k = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    (0..k as i32)
        .map(|label| {
            let members: Vec<usize> = labels.iter().enumerate().filter(|(_, &l)| l == label).map(|(i, _)| i).collect();
            let nearest: Vec<f64> = members
                .iter()
                .map(|&i| {
                    members
                        .iter()
                        .filter(|&&j| j != i)
                        .map(|&j| euclidean(&points[i], &points[j]))
                        .fold(f64::INFINITY, f64::min)
                })
                .filter(|d| d.is_finite())
                .collect();
            percentile(&nearest, 95.0)
        })
        .collect()
}
