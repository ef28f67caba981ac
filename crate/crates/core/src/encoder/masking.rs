//! Span masking for the denoising objective.
//!
//! Each feature column is a two-state Markov chain over real time steps.
//! Masked spans end with probability `1/l_m` per step and kept spans end
//! with probability `r/((1-r)·l_m)`, so both span lengths are geometric with
//! means `l_m` and `l_m·(1-r)/r`, and the stationary masked fraction is `r`.
//! The first step is masked with probability `r`.

use rand::Rng;

use crate::error::{Error, Result};

/// Curriculum over `(r, l_m)`. Both increase linearly in steps of
/// `epochs_per_increment` epochs, reaching the end values at the last stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskingSchedule {
    pub r_start: f64,
    pub r_end: f64,
    pub l_m_start: f64,
    pub l_m_end: f64,
    pub epochs_per_increment: usize,
}

impl Default for MaskingSchedule {
    fn default() -> Self {
        Self {
            r_start: 0.15,
            r_end: 0.45,
            l_m_start: 3.0,
            l_m_end: 7.0,
            epochs_per_increment: 5,
        }
    }
}

impl MaskingSchedule {
    pub fn validate(&self) -> Result<()> {
        let r_ok = |r: f64| r > 0.0 && r < 1.0;
        if !r_ok(self.r_start) || !r_ok(self.r_end) {
            return Err(Error::Config(format!(
                "masking ratio must lie in (0, 1), got {} -> {}",
                self.r_start, self.r_end
            )));
        }
        if self.l_m_start < 1.0 || self.l_m_end < 1.0 {
            return Err(Error::Config("mean masked span must be >= 1".into()));
        }
        if self.r_end < self.r_start || self.l_m_end < self.l_m_start {
            return Err(Error::Config("masking schedule must be non-decreasing".into()));
        }
        if self.epochs_per_increment == 0 {
            return Err(Error::Config("epochs_per_increment must be positive".into()));
        }
        Ok(())
    }

    /// `(r, l_m)` for zero-based `epoch` out of `total_epochs`.
    pub fn at(&self, epoch: usize, total_epochs: usize) -> (f64, f64) {
        let last_stage = total_epochs.saturating_sub(1) / self.epochs_per_increment;
        if last_stage == 0 {
            return (self.r_start, self.l_m_start);
        }
        let stage = (epoch / self.epochs_per_increment).min(last_stage);
        let f = stage as f64 / last_stage as f64;
        (
            self.r_start + (self.r_end - self.r_start) * f,
            self.l_m_start + (self.l_m_end - self.l_m_start) * f,
        )
    }
}

/// One column of length `real_len`: 1 = keep, 0 = masked.
pub fn sample_column<R: Rng + ?Sized>(real_len: usize, r: f64, l_m: f64, rng: &mut R) -> Vec<u8> {
    let p_end_masked = 1.0 / l_m;
    let p_end_kept = p_end_masked * r / (1.0 - r);
    let mut out = Vec::with_capacity(real_len);
    let mut masked = rng.random::<f64>() < r;
    for _ in 0..real_len {
        out.push(u8::from(!masked));
        let flip = if masked { p_end_masked } else { p_end_kept };
        if rng.random::<f64>() < flip {
            masked = !masked;
        }
    }
    out
}

/// Row-major `[chunk_len × features]` keep-mask. Padded rows are kept.
pub fn sample_mask<R: Rng + ?Sized>(
    chunk_len: usize,
    real_len: usize,
    features: usize,
    r: f64,
    l_m: f64,
    rng: &mut R,
) -> Vec<u8> {
    let mut mask = vec![1u8; chunk_len * features];
    for f in 0..features {
        for (t, keep) in sample_column(real_len, r, l_m, rng).into_iter().enumerate() {
            mask[t * features + f] = keep;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    #[test]
    fn vanishing_ratio_keeps_everything() {
        let mut rng = stream(1, "t");
        let m = sample_mask(50, 50, 6, 1e-9, 3.0, &mut rng);
        assert!(m.iter().all(|&v| v == 1));
    }

    #[test]
    fn padded_rows_never_masked() {
        let mut rng = stream(2, "t");
        for _ in 0..200 {
            let m = sample_mask(50, 12, 6, 0.45, 7.0, &mut rng);
            assert!(m[12 * 6..].iter().all(|&v| v == 1));
        }
    }

    #[test]
    fn default_schedule_endpoints() {
        let s = MaskingSchedule::default();
        assert_eq!(s.at(0, 37), (0.15, 3.0));
        assert_eq!(s.at(4, 37), (0.15, 3.0));
        assert!(s.at(5, 37).0 > 0.15);
        let (r, l) = s.at(36, 37);
        assert!((r - 0.45).abs() < 1e-12 && (l - 7.0).abs() < 1e-12);
        assert_eq!(s.at(0, 1), (0.15, 3.0));
    }

    proptest! {
        #[test]
        fn schedule_is_monotone(total in 1usize..80, a in 0usize..80, b in 0usize..80) {
            let s = MaskingSchedule::default();
            let (e1, e2) = (a.min(b).min(total - 1), a.max(b).min(total - 1));
            let (r1, l1) = s.at(e1, total);
            let (r2, l2) = s.at(e2, total);
            prop_assert!(r1 <= r2 && l1 <= l2);
            prop_assert!(r2 > 0.0 && r2 < 1.0 && l1 >= 1.0);
        }
    }
}
