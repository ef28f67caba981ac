use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Principal axes from an SVD of the centered data.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// One unit row per component; the largest-magnitude loading is positive.
    pub components: Vec<Vec<f64>>,
    pub explained_ratio: Vec<f64>,
    /// Fewer than the requested components had non-zero variance.
    pub rank_deficient: bool,
}

/// Fits up to `out_dim` components. Components whose singular value is at
/// or below `1e-10·σ_max` are dropped and `rank_deficient` is set.
pub fn pca_fit(points: &[Vec<f32>], out_dim: usize) -> Result<Pca> {
    let n = points.len();
    if n <= out_dim {
        return Err(Error::Size {
            needed: out_dim + 1,
            got: n,
        });
    }
    let d = points[0].len();
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::Dimension {
            op: "pca",
            left: vec![d],
            right: vec![bad.len()],
        });
    }
    let mut mean = vec![0f64; d];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| f64::from(points[i][j]) - mean[j]);
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma_max = order.first().map_or(0.0, |&i| svd.singular_values[i]);
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();

    let mut components = Vec::new();
    let mut explained_ratio = Vec::new();
    for &i in order.iter().take(out_dim) {
        let s = svd.singular_values[i];
        if sigma_max == 0.0 || s <= 1e-10 * sigma_max {
            break;
        }
        let mut row: Vec<f64> = v_t.row(i).iter().copied().collect();
        let pivot = row
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if v.abs() > row[best].abs() { j } else { best });
        if row[pivot] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        explained_ratio.push(s * s / total);
    }
    let rank_deficient = components.len() < out_dim;
    Ok(Pca {
        mean,
        components,
        explained_ratio,
        rank_deficient,
    })
}

impl Pca {
    pub fn transform(&self, p: &[f32]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(p).zip(&self.mean).map(|((w, &x), m)| w * (f64::from(x) - m)).sum())
            .collect()
    }

    pub fn inverse_transform(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &zi) in self.components.iter().zip(z) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += w * zi;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn line_has_single_component() {
        let dir = [1.0f32, -2.0, 0.5, 3.0, 0.0, 1.0];
        let pts: Vec<Vec<f32>> = (0..30).map(|i| dir.iter().map(|d| d * (i as f32 - 7.0) + 0.25).collect()).collect();
        let p = pca_fit(&pts, 3).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-8);
        assert_eq!(p.components.len(), 1);
        assert!(p.rank_deficient);
        // Largest loading (index 3) is positive.
        assert!(p.components[0][3] > 0.0);
    }

    #[test]
    fn isotropic_ratios_follow_marchenko_pastur() {
        // Sample covariance eigenvalues of N(0, I) data lie within
        // [(1-√γ)², (1+√γ)²] times the mean eigenvalue, γ = d/n.
        let (n, d) = (1000, 128);
        let mut rng = stream(7, "iso");
        let pts: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let p = pca_fit(&pts, 3).unwrap();
        let gamma = d as f64 / n as f64;
        let upper = (1.0 + gamma.sqrt()).powi(2) / d as f64;
        for &r in &p.explained_ratio {
            assert!(r > 1.0 / d as f64 && r < upper * 1.1, "ratio {r}");
        }
    }

    #[test]
    fn rank_three_round_trip() {
        let mut rng = stream(8, "r3");
        let basis: Vec<Vec<f32>> = (0..3).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let pts: Vec<Vec<f32>> = (0..50)
            .map(|_| {
                let w: Vec<f32> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
                (0..10).map(|j| (0..3).map(|k| w[k] * basis[k][j]).sum::<f32>() + 1.0).collect()
            })
            .collect();
        let p = pca_fit(&pts, 3).unwrap();
        assert!(!p.rank_deficient);
        for q in &pts {
            let back = p.inverse_transform(&p.transform(q));
            for (a, &b) in back.iter().zip(q) {
                assert!((a - f64::from(b)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn needs_more_points_than_components() {
        assert!(pca_fit(&[vec![0.0, 1.0], vec![1.0, 0.0]], 3).is_err());
    }
}
