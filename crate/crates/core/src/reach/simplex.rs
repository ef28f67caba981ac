//! Phase-I simplex for the box-constrained feasibility problem behind
//! zonotope membership.

use nalgebra::DMatrix;

/// Whether some `β` with `‖β‖∞ ≤ 1` satisfies `Gβ = rhs`, up to an L1
/// residual of `tol·(1 + ‖rhs‖∞)`.
///
/// Substituting `u = β + 1 ∈ [0, 2]` gives the standard form
/// `G u = rhs + G·1`, `u + s = 2`, `u, s ≥ 0`. Equality rows get artificials;
/// the bound rows start with their slacks basic. Bland's rule avoids cycling.
pub fn box_feasible(g: &DMatrix<f64>, rhs: &[f64], tol: f64) -> bool {
    let (n, m) = (g.nrows(), g.ncols());
    let scale = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let g_scale = g.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let eps = 1e-12 * g_scale;
    let rows = n + m;
    let cols = 2 * m + n;
    let rhs_col = cols;
    let mut t = vec![vec![0.0f64; cols + 1]; rows];
    let mut basis = vec![0usize; rows];
    for i in 0..n {
        let b = rhs[i] + g.row(i).iter().sum::<f64>();
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        for j in 0..m {
            t[i][j] = sign * g[(i, j)];
        }
        t[i][2 * m + i] = 1.0;
        t[i][rhs_col] = sign * b;
        basis[i] = 2 * m + i;
    }
    for j in 0..m {
        let r = n + j;
        t[r][j] = 1.0;
        t[r][m + j] = 1.0;
        t[r][rhs_col] = 2.0;
        basis[r] = m + j;
    }
    let is_artificial = |k: usize| k >= 2 * m;

    let max_iter = 50 * (rows + cols).max(1);
    for _ in 0..max_iter {
        // Reduced costs of the phase-I objective Σ a.
        let entering = (0..cols).find(|&k| {
            if basis.contains(&k) {
                return false;
            }
            let cost = if is_artificial(k) { 1.0 } else { 0.0 };
            let r = cost - (0..rows).filter(|&i| is_artificial(basis[i])).map(|i| t[i][k]).sum::<f64>();
            r < -eps
        });
        let Some(k) = entering else { break };
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..rows {
            if t[i][k] > eps {
                let ratio = t[i][rhs_col] / t[i][k];
                let better = match leave {
                    None => true,
                    Some((li, lr)) => ratio < lr || (ratio == lr && basis[i] < basis[li]),
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
        }
        // Unbounded cannot happen: the objective is bounded below by 0.
        let Some((p, _)) = leave else { break };
        let pivot = t[p][k];
        for v in t[p].iter_mut() {
            *v /= pivot;
        }
        let prow = t[p].clone();
        for (i, row) in t.iter_mut().enumerate() {
            if i != p && row[k] != 0.0 {
                let f = row[k];
                for (v, pv) in row.iter_mut().zip(&prow) {
                    *v -= f * pv;
                }
            }
        }
        basis[p] = k;
    }
    let residual: f64 = (0..rows).filter(|&i| is_artificial(basis[i])).map(|i| t[i][rhs_col].abs()).sum();
    residual <= tol * (1.0 + scale)
}
