use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::simplex::box_feasible;
use crate::error::{Error, Result};

/// Points within this distance of the boundary count as inside.
pub const BOUNDARY_TOL: f64 = 1e-9;

/// `{c + Gβ : ‖β‖∞ ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Zonotope {
    center: DVector<f64>,
    generators: DMatrix<f64>,
}

/// Center and generator columns, for JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZonotopeRecord {
    pub center: Vec<f64>,
    pub generators: Vec<Vec<f64>>,
}

fn dims_error(op: &'static str, left: usize, right: usize) -> Error {
    Error::Dimension {
        op,
        left: vec![left],
        right: vec![right],
    }
}

impl Zonotope {
    pub fn new(center: DVector<f64>, generators: DMatrix<f64>) -> Result<Self> {
        if generators.nrows() != center.len() && generators.ncols() > 0 {
            return Err(dims_error("zonotope", center.len(), generators.nrows()));
        }
        if center.iter().chain(generators.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("zonotope entries".into()));
        }
        let n = center.len();
        let generators = if generators.ncols() == 0 { DMatrix::zeros(n, 0) } else { generators };
        Ok(Self { center, generators })
    }

    /// The single point `p`.
    pub fn point(p: DVector<f64>) -> Self {
        let n = p.len();
        Self {
            center: p,
            generators: DMatrix::zeros(n, 0),
        }
    }

    /// Axis-aligned box with half-widths `radii`.
    pub fn axis_box(center: DVector<f64>, radii: &[f64]) -> Result<Self> {
        let n = center.len();
        if radii.len() != n {
            return Err(dims_error("axis_box", n, radii.len()));
        }
        let cols: Vec<usize> = (0..n).filter(|&i| radii[i] != 0.0).collect();
        let mut g = DMatrix::zeros(n, cols.len());
        for (k, &i) in cols.iter().enumerate() {
            g[(i, k)] = radii[i].abs();
        }
        Self::new(center, g)
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn generators(&self) -> &DMatrix<f64> {
        &self.generators
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn n_generators(&self) -> usize {
        self.generators.ncols()
    }

    /// Generators per dimension.
    pub fn order(&self) -> f64 {
        self.n_generators() as f64 / self.dim().max(1) as f64
    }

    pub fn minkowski_sum(&self, other: &Zonotope) -> Result<Zonotope> {
        if self.dim() != other.dim() {
            return Err(dims_error("minkowski_sum", self.dim(), other.dim()));
        }
        let mut g = DMatrix::zeros(self.dim(), self.n_generators() + other.n_generators());
        g.columns_mut(0, self.n_generators()).copy_from(&self.generators);
        g.columns_mut(self.n_generators(), other.n_generators()).copy_from(&other.generators);
        Ok(Zonotope {
            center: &self.center + &other.center,
            generators: g,
        })
    }

    pub fn linear_map(&self, a: &DMatrix<f64>) -> Result<Zonotope> {
        if a.ncols() != self.dim() {
            return Err(dims_error("linear_map", a.ncols(), self.dim()));
        }
        Ok(Zonotope {
            center: a * &self.center,
            generators: a * &self.generators,
        })
    }

    /// `h(d) = dᵀc + Σ|dᵀg|`.
    pub fn support(&self, d: &DVector<f64>) -> f64 {
        d.dot(&self.center) + (d.transpose() * &self.generators).iter().map(|v| v.abs()).sum::<f64>()
    }

    /// Half-widths of the interval hull.
    pub fn radius(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.generators.row(i).iter().map(|v| v.abs()).sum())
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.center.iter().chain(self.generators.iter()).fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Girard reduction: if there are more than `n·max_order` generators, the
    /// ones with the smallest `‖g‖₁ − ‖g‖∞` are replaced by their interval hull.
    pub fn reduce_order(&self, max_order: usize) -> Zonotope {
        let (n, m) = (self.dim(), self.n_generators());
        let max_order = max_order.max(1);
        if m <= n * max_order {
            return self.clone();
        }
        let score = |j: usize| {
            let col = self.generators.column(j);
            col.iter().map(|v| v.abs()).sum::<f64>() - col.iter().fold(0.0f64, |a, v| a.max(v.abs()))
        };
        let mut order: Vec<(f64, usize)> = (0..m).map(|j| (score(j), j)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_fold = m - n * (max_order - 1);
        let mut radii = vec![0.0; n];
        for &(_, j) in &order[..n_fold] {
            for (r, v) in radii.iter_mut().zip(self.generators.column(j).iter()) {
                *r += v.abs();
            }
        }
        let mut kept: Vec<usize> = order[n_fold..].iter().map(|&(_, j)| j).collect();
        kept.sort_unstable();
        let boxed: Vec<usize> = (0..n).filter(|&i| radii[i] > 0.0).collect();
        let mut g = DMatrix::zeros(n, kept.len() + boxed.len());
        for (k, &j) in kept.iter().enumerate() {
            g.set_column(k, &self.generators.column(j));
        }
        for (k, &i) in boxed.iter().enumerate() {
            g[(i, kept.len() + k)] = radii[i];
        }
        Zonotope {
            center: self.center.clone(),
            generators: g,
        }
    }

    /// Projection onto coordinates `(i, j)`.
    pub fn project(&self, (i, j): (usize, usize)) -> Result<Zonotope> {
        let n = self.dim();
        if i >= n || j >= n {
            return Err(dims_error("project", n, i.max(j) + 1));
        }
        let mut p = DMatrix::zeros(2, n);
        p[(0, i)] = 1.0;
        p[(1, j)] = 1.0;
        self.linear_map(&p)
    }

    /// Exact area of the projection onto `(i, j)`.
    pub fn area_2d(&self, dims: (usize, usize)) -> Result<f64> {
        let z = self.project(dims)?;
        let g = &z.generators;
        let mut area = 0.0;
        for a in 0..g.ncols() {
            for b in a + 1..g.ncols() {
                area += (g[(0, a)] * g[(1, b)] - g[(1, a)] * g[(0, b)]).abs();
            }
        }
        Ok(4.0 * area)
    }

    /// Counter-clockwise vertices of a 2-D zonotope, or `None` when it has
    /// no interior.
    pub fn polygon(&self) -> Option<Vec<[f64; 2]>> {
        if self.dim() != 2 {
            return None;
        }
        let mut gens: Vec<[f64; 2]> = self
            .generators
            .column_iter()
            .map(|c| if c[1] < 0.0 || (c[1] == 0.0 && c[0] < 0.0) { [-c[0], -c[1]] } else { [c[0], c[1]] })
            .filter(|g| g[0] != 0.0 || g[1] != 0.0)
            .collect();
        gens.sort_by(|a, b| a[1].atan2(a[0]).total_cmp(&b[1].atan2(b[0])));
        let spread = gens.iter().any(|a| gens.iter().any(|b| (a[0] * b[1] - a[1] * b[0]).abs() > 0.0));
        if !spread {
            return None;
        }
        let mut v = [
            self.center[0] - gens.iter().map(|g| g[0]).sum::<f64>(),
            self.center[1] - gens.iter().map(|g| g[1]).sum::<f64>(),
        ];
        let mut out = Vec::with_capacity(2 * gens.len());
        for sign in [2.0, -2.0] {
            for g in &gens {
                out.push(v);
                v = [v[0] + sign * g[0], v[1] + sign * g[1]];
            }
        }
        Some(out)
    }

    /// Membership of `p`, optionally after projecting onto `dims`. 2-D sets
    /// with an interior use the exact polygon; everything else solves the
    /// box-constrained feasibility problem `Gβ = p − c`.
    pub fn contains_point(&self, p: &[f64], dims: Option<(usize, usize)>) -> Result<bool> {
        let z = match dims {
            Some(d) => self.project(d)?,
            None => self.clone(),
        };
        if p.len() != z.dim() {
            return Err(dims_error("contains_point", z.dim(), p.len()));
        }
        let offset: Vec<f64> = p.iter().zip(z.center.iter()).map(|(a, c)| a - c).collect();
        let radius = z.radius();
        if offset.iter().zip(radius.iter()).any(|(o, r)| o.abs() > r + BOUNDARY_TOL) {
            return Ok(false);
        }
        if let Some(poly) = z.polygon() {
            return Ok(in_convex_polygon(&poly, [p[0], p[1]]));
        }
        Ok(z.contains_by_lp(p))
    }

    /// Feasibility of `Gβ = p − c`, `‖β‖∞ ≤ 1`, by phase-I simplex.
    pub fn contains_by_lp(&self, p: &[f64]) -> bool {
        let rhs: Vec<f64> = p.iter().zip(self.center.iter()).map(|(a, c)| a - c).collect();
        box_feasible(&self.generators, &rhs, BOUNDARY_TOL)
    }

    pub fn to_record(&self) -> ZonotopeRecord {
        ZonotopeRecord {
            center: self.center.iter().copied().collect(),
            generators: self.generators.column_iter().map(|c| c.iter().copied().collect()).collect(),
        }
    }

    pub fn from_record(r: &ZonotopeRecord) -> Result<Self> {
        let n = r.center.len();
        if let Some(bad) = r.generators.iter().find(|g| g.len() != n) {
            return Err(dims_error("zonotope record", n, bad.len()));
        }
        let g = DMatrix::from_fn(n, r.generators.len(), |i, j| r.generators[j][i]);
        Self::new(DVector::from_vec(r.center.clone()), g)
    }
}

/// Boundary-tolerant test against counter-clockwise vertices.
pub fn in_convex_polygon(vertices: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = vertices.len();
    (0..n).all(|i| {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        let e = [b[0] - a[0], b[1] - a[1]];
        let len = e[0].hypot(e[1]);
        if len == 0.0 {
            return true;
        }
        let cross = e[0] * (p[1] - a[1]) - e[1] * (p[0] - a[0]);
        cross / len >= -BOUNDARY_TOL
    })
}
