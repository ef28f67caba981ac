use nalgebra::{DMatrix, DVector};

use super::zonotope::Zonotope;
use super::Exclusion;
use crate::error::{Error, Result};

/// Relative singular-value cutoff for the pseudoinverse and rank test.
pub const PINV_CUTOFF: f64 = 1e-10;

/// A set of matrices `{C + Σ βᵢ Gᵢ : ‖β‖∞ ≤ 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixZonotope {
    center: DMatrix<f64>,
    generators: Vec<DMatrix<f64>>,
}

/// Anything that can multiply a zonotope, producing an enclosure of
/// `{Mz : M ∈ set, z ∈ Z}`.
pub trait ModelSet {
    fn state_dim(&self) -> usize;
    fn times(&self, z: &Zonotope) -> Result<Zonotope>;
    /// The nominal (center) model.
    fn center(&self) -> &DMatrix<f64>;
}

impl MatrixZonotope {
    pub fn new(center: DMatrix<f64>, generators: Vec<DMatrix<f64>>) -> Result<Self> {
        if let Some(g) = generators.iter().find(|g| g.shape() != center.shape()) {
            return Err(Error::Dimension {
                op: "matrix zonotope",
                left: vec![center.nrows(), center.ncols()],
                right: vec![g.nrows(), g.ncols()],
            });
        }
        if center.iter().chain(generators.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix zonotope entries".into()));
        }
        Ok(Self { center, generators })
    }

    pub fn generators(&self) -> &[DMatrix<f64>] {
        &self.generators
    }

    /// Entry-wise bounds `C ± Σ|Gᵢ|`.
    pub fn interval_hull(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut spread = DMatrix::zeros(self.center.nrows(), self.center.ncols());
        for g in &self.generators {
            spread += g.abs();
        }
        (&self.center - &spread, &self.center + &spread)
    }
}

impl ModelSet for MatrixZonotope {
    fn state_dim(&self) -> usize {
        self.center.ncols()
    }

    fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    /// `⟨C c, [C G, Gᵢ c ∀i, Gᵢ G ∀i]⟩`.
    fn times(&self, z: &Zonotope) -> Result<Zonotope> {
        if self.center.ncols() != z.dim() {
            return Err(Error::Dimension {
                op: "matzono_times_zono",
                left: vec![self.center.nrows(), self.center.ncols()],
                right: vec![z.dim()],
            });
        }
        let (c, g) = (z.center(), z.generators());
        let m = g.ncols();
        let total = m + self.generators.len() * (1 + m);
        let mut out = DMatrix::zeros(self.center.nrows(), total);
        out.columns_mut(0, m).copy_from(&(&self.center * g));
        let mut col = m;
        for gi in &self.generators {
            out.set_column(col, &(gi * c));
            col += 1;
        }
        for gi in &self.generators {
            out.columns_mut(col, m).copy_from(&(gi * g));
            col += m;
        }
        Zonotope::new(&self.center * c, out)
    }
}

/// The data-consistent model set `(X₊ ⊕ −M_w) X₋⁺` in factored form.
///
/// With diagonal noise generators `w_d`, every matrix generator is
/// `−w_d e_d r_jᵀ` where `r_j` is row `j` of `X₋⁺`. Applied to a zonotope,
/// all resulting generators for a given `d` are multiples of `e_d`, so they
/// merge exactly into one axis-aligned generator of length
/// `w_d · Σ_j (|r_j·c| + Σ_k |r_j·g_k|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiedModel {
    center: DMatrix<f64>,
    noise: Vec<f64>,
    pinv: DMatrix<f64>,
}

impl IdentifiedModel {
    pub fn transitions(&self) -> usize {
        self.pinv.nrows()
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    /// Expanded generic form; one generator per (state dim, transition).
    pub fn to_matrix_zonotope(&self) -> MatrixZonotope {
        let n = self.center.nrows();
        let mut gens = Vec::new();
        for (d, &w) in self.noise.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for j in 0..self.pinv.nrows() {
                let mut g = DMatrix::zeros(n, n);
                g.row_mut(d).copy_from(&(self.pinv.row(j) * -w));
                gens.push(g);
            }
        }
        MatrixZonotope {
            center: self.center.clone(),
            generators: gens,
        }
    }

    /// Entry-wise bounds of the model set.
    pub fn interval_hull(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let col_abs: Vec<f64> = (0..self.pinv.ncols()).map(|b| self.pinv.column(b).iter().map(|v| v.abs()).sum()).collect();
        let spread = DMatrix::from_fn(self.center.nrows(), self.center.ncols(), |a, b| self.noise[a] * col_abs[b]);
        (&self.center - &spread, &self.center + &spread)
    }
}

impl ModelSet for IdentifiedModel {
    fn state_dim(&self) -> usize {
        self.center.ncols()
    }

    fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    fn times(&self, z: &Zonotope) -> Result<Zonotope> {
        if self.center.ncols() != z.dim() {
            return Err(Error::Dimension {
                op: "matzono_times_zono",
                left: vec![self.center.nrows(), self.center.ncols()],
                right: vec![z.dim()],
            });
        }
        let (c, g) = (z.center(), z.generators());
        let s: f64 = (&self.pinv * c).iter().map(|v| v.abs()).sum::<f64>() + (&self.pinv * g).iter().map(|v| v.abs()).sum::<f64>();
        let nominal = &self.center * g;
        let extra: Vec<usize> = (0..self.noise.len()).filter(|&d| self.noise[d] * s > 0.0).collect();
        let mut out = DMatrix::zeros(self.center.nrows(), nominal.ncols() + extra.len());
        out.columns_mut(0, nominal.ncols()).copy_from(&nominal);
        for (k, &d) in extra.iter().enumerate() {
            out[(d, nominal.ncols() + k)] = self.noise[d] * s;
        }
        Zonotope::new(&self.center * c, out)
    }
}

/// Identifies the model set from paired states (`x_minus[:, j]` maps to
/// `x_plus[:, j]`).
///
/// Excluded when there are more than `memory_cap` transitions, or when
/// `X₋` does not have full row rank.
pub fn identify_from_data(
    x_minus: &DMatrix<f64>,
    x_plus: &DMatrix<f64>,
    noise: &[f64],
    memory_cap: usize,
) -> Result<std::result::Result<IdentifiedModel, Exclusion>> {
    let (n, t) = x_minus.shape();
    if x_plus.shape() != (n, t) || noise.len() != n {
        return Err(Error::Dimension {
            op: "identify_models",
            left: vec![n, t],
            right: vec![x_plus.nrows(), x_plus.ncols(), noise.len()],
        });
    }
    if t > memory_cap {
        return Ok(Err(Exclusion::MemoryCap));
    }
    if t < n {
        return Ok(Err(Exclusion::RankDeficient));
    }
    if x_minus.iter().chain(x_plus.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("identification data".into()));
    }
    let svd = x_minus.clone().svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let sigma = &svd.singular_values;
    let sigma_max = sigma.iter().fold(0.0f64, |a, &s| a.max(s));
    let cutoff = PINV_CUTOFF * sigma_max;
    let rank = sigma.iter().filter(|&&s| s > cutoff).count();
    if sigma_max == 0.0 || rank < n {
        return Ok(Err(Exclusion::RankDeficient));
    }
    let inv = DVector::from_iterator(sigma.len(), sigma.iter().map(|&s| if s > cutoff { 1.0 / s } else { 0.0 }));
    // X₋⁺ = V Σ⁺ Uᵀ, shape t × n.
    let pinv = v_t.transpose() * DMatrix::from_diagonal(&inv) * u.transpose();
    let center = x_plus * &pinv;
    Ok(Ok(IdentifiedModel {
        center,
        noise: noise.to_vec(),
        pinv,
    }))
}

/// Result of a reachability run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachOutcome {
    /// `R̂_1 ..= R̂_N`, shorter if truncated.
    pub sets: Vec<Zonotope>,
    /// Stopped early because an entry exceeded the overflow bound.
    pub truncated: bool,
}

/// Entries beyond this magnitude end the horizon.
pub const OVERFLOW_BOUND: f64 = 1e9;

/// `R̂_{k+1} = reduce(M · R̂_k ⊕ Z_w)` for `k = 0 .. horizon`.
pub fn reach<M: ModelSet>(model: &M, r0: &Zonotope, noise: &Zonotope, horizon: usize, max_order: usize) -> Result<ReachOutcome> {
    if horizon == 0 || max_order == 0 {
        return Err(Error::Config("reach horizon and max order must be positive".into()));
    }
    if r0.dim() != model.state_dim() || noise.dim() != model.state_dim() {
        return Err(Error::Dimension {
            op: "reach",
            left: vec![model.state_dim()],
            right: vec![r0.dim(), noise.dim()],
        });
    }
    let mut sets = Vec::with_capacity(horizon);
    let mut current = r0.clone();
    for _ in 0..horizon {
        let next = match model.times(&current).and_then(|z| z.minkowski_sum(noise)) {
            Ok(z) => z.reduce_order(max_order),
            Err(Error::NonFinite(_)) => return Ok(ReachOutcome { sets, truncated: true }),
            Err(e) => return Err(e),
        };
        if next.max_abs_entry() > OVERFLOW_BOUND {
            return Ok(ReachOutcome { sets, truncated: true });
        }
        sets.push(next.clone());
        current = next;
    }
    Ok(ReachOutcome { sets, truncated: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamRng};
    use rand::Rng;

    fn rotation_system() -> DMatrix<f64> {
        let (s, c) = 0.1f64.sin_cos();
        let mut a = DMatrix::identity(4, 4);
        a[(0, 0)] = c;
        a[(0, 1)] = -s;
        a[(1, 0)] = s;
        a[(1, 1)] = c;
        a
    }

    fn noisy_data(a: &DMatrix<f64>, w: f64, t: usize, rng: &mut StreamRng) -> (DMatrix<f64>, DMatrix<f64>) {
        let xm = DMatrix::from_fn(4, t, |_, _| rng.random_range(-5.0..5.0));
        let mut xp = a * &xm;
        if w > 0.0 {
            xp.iter_mut().for_each(|v| *v += rng.random_range(-w..=w));
        }
        (xm, xp)
    }

    #[test]
    fn noiseless_rotation_recovered() {
        let mut rng = stream(21, "rot");
        let a = rotation_system();
        let (xm, xp) = noisy_data(&a, 0.0, 40, &mut rng);
        let model = identify_from_data(&xm, &xp, &[0.0; 4], 20_000).unwrap().unwrap();
        assert!((model.center() - &a).norm() < 1e-6);
    }

    #[test]
    fn too_few_transitions() {
        let xm = DMatrix::from_element(4, 1, 1.0);
        let got = identify_from_data(&xm, &xm, &[0.005; 4], 20_000).unwrap();
        assert_eq!(got.unwrap_err(), Exclusion::RankDeficient);
        // Enough columns but collinear.
        let xm = DMatrix::from_fn(4, 10, |i, j| (i + 1) as f64 * j as f64);
        assert_eq!(identify_from_data(&xm, &xm, &[0.005; 4], 20_000).unwrap().unwrap_err(), Exclusion::RankDeficient);
    }

    #[test]
    fn memory_cap() {
        let xm = DMatrix::from_element(4, 30_000, 1.0);
        assert_eq!(identify_from_data(&xm, &xm, &[0.005; 4], 20_000).unwrap().unwrap_err(), Exclusion::MemoryCap);
    }

    #[test]
    fn true_model_inside_interval_hull() {
        let mut rng = stream(22, "hull");
        let a = rotation_system();
        let w = 0.005;
        let (xm, xp) = noisy_data(&a, w, 200, &mut rng);
        let model = identify_from_data(&xm, &xp, &[w; 4], 20_000).unwrap().unwrap();
        let (lo, hi) = model.interval_hull();
        for i in 0..16 {
            assert!(lo[i] <= a[i] && a[i] <= hi[i], "entry {i}: {} not in [{}, {}]", a[i], lo[i], hi[i]);
        }
        let (glo, ghi) = model.to_matrix_zonotope().interval_hull();
        assert!((glo - lo).norm() < 1e-12 && (ghi - hi).norm() < 1e-12);
    }

    #[test]
    fn factored_product_equals_generic() {
        let mut rng = stream(23, "fact");
        let a = rotation_system();
        let (xm, xp) = noisy_data(&a, 0.01, 12, &mut rng);
        let model = identify_from_data(&xm, &xp, &[0.01, 0.02, 0.0, 0.03], 20_000).unwrap().unwrap();
        let generic = model.to_matrix_zonotope();
        assert_eq!(generic.generators().len(), 36);
        let z = Zonotope::new(
            DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0)),
            DMatrix::from_fn(4, 6, |_, _| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let (fast, slow) = (model.times(&z).unwrap(), generic.times(&z).unwrap());
        assert_eq!(fast.center(), slow.center());
        for _ in 0..200 {
            let d = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let (hf, hs) = (fast.support(&d), slow.support(&d));
            assert!((hf - hs).abs() < 1e-9 * hs.abs().max(1.0), "{hf} vs {hs}");
        }
    }

    #[test]
    fn degenerate_matrix_zonotope() {
        let mut rng = stream(24, "deg");
        let c = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let m = MatrixZonotope::new(c.clone(), vec![]).unwrap();
        let z = Zonotope::new(DVector::from_element(4, 1.0), DMatrix::identity(4, 4)).unwrap();
        let out = m.times(&z).unwrap();
        assert_eq!(out, z.linear_map(&c).unwrap());
    }

    #[test]
    fn identity_fixed_point() {
        let m = MatrixZonotope::new(DMatrix::identity(4, 4), vec![]).unwrap();
        let r0 = Zonotope::axis_box(DVector::from_vec(vec![1.0, 2.0, 0.5, 0.0]), &[0.05; 4]).unwrap();
        let zero = Zonotope::point(DVector::zeros(4));
        let out = reach(&m, &r0, &zero, 10, 5).unwrap();
        assert_eq!(out.sets.len(), 10);
        assert!(!out.truncated);
        assert!(out.sets.iter().all(|s| s == &r0));
    }

    #[test]
    fn uncertainty_never_shrinks_below_nominal() {
        let mut rng = stream(25, "grow");
        let a = rotation_system();
        let (xm, xp) = noisy_data(&a, 0.005, 100, &mut rng);
        let model = identify_from_data(&xm, &xp, &[0.005; 4], 20_000).unwrap().unwrap();
        let r0 = Zonotope::axis_box(DVector::from_vec(vec![1.0, 2.0, 0.5, 0.2]), &[0.05; 4]).unwrap();
        let noise = Zonotope::axis_box(DVector::zeros(4), &[0.005; 4]).unwrap();
        let out = reach(&model, &r0, &noise, 20, 5).unwrap();
        let mut prev = r0;
        for next in &out.sets {
            let nominal = prev.linear_map(model.center()).unwrap();
            assert!(next.area_2d((0, 1)).unwrap() >= nominal.area_2d((0, 1)).unwrap());
            prev = next.clone();
        }
    }

    #[test]
    fn overflow_truncates() {
        let m = MatrixZonotope::new(DMatrix::identity(4, 4) * 1e3, vec![]).unwrap();
        let r0 = Zonotope::axis_box(DVector::from_element(4, 1.0), &[0.05; 4]).unwrap();
        let out = reach(&m, &r0, &Zonotope::point(DVector::zeros(4)), 50, 5).unwrap();
        assert!(out.truncated);
        // 1e3, 1e6 and 1e9 are within the bound; 1e12 is not.
        assert_eq!(out.sets.len(), 3);
    }

    #[test]
    fn noisy_rollouts_are_contained() {
        let mut rng = stream(26, "sound");
        let a = rotation_system();
        let w = 0.005;
        let (xm, xp) = noisy_data(&a, w, 300, &mut rng);
        let model = identify_from_data(&xm, &xp, &[w; 4], 20_000).unwrap().unwrap();
        let x0 = DVector::from_vec(vec![2.0, -1.0, 0.5, 0.3]);
        let r0 = Zonotope::axis_box(x0.clone(), &[0.05; 4]).unwrap();
        let noise = Zonotope::axis_box(DVector::zeros(4), &[w; 4]).unwrap();
        let sets = reach(&model, &r0, &noise, 20, 5).unwrap().sets;
        for _ in 0..20 {
            let mut x = &x0 + DVector::from_fn(4, |_, _| rng.random_range(-0.05..=0.05));
            for set in &sets {
                x = &a * x + DVector::from_fn(4, |_, _| rng.random_range(-w..=w));
                assert!(set.contains_point(x.as_slice(), None).unwrap());
            }
        }
    }
}
