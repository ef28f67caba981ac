//! Zonotope algebra and data-driven reachability over the pedestrian state
//! `(x, y, vx, vy)`.

mod identify;
mod simplex;
mod zonotope;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use identify::{identify_from_data, reach, IdentifiedModel, MatrixZonotope, ModelSet, ReachOutcome, OVERFLOW_BOUND, PINV_CUTOFF};
pub use simplex::box_feasible;
pub use zonotope::{in_convex_polygon, Zonotope, ZonotopeRecord, BOUNDARY_TOL};

use crate::ann::Rejection;
use crate::data::TrajectoryChunk;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
/// Position coordinates within the state.
pub const POSITION_DIMS: (usize, usize) = (0, 1);

/// Why a trial produced no reachable sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    MemoryCap,
    NoData,
    TooFar,
    RankDeficient,
}

impl Exclusion {
    pub const ALL: [Exclusion; 4] = [Exclusion::MemoryCap, Exclusion::NoData, Exclusion::TooFar, Exclusion::RankDeficient];

    pub fn as_str(self) -> &'static str {
        match self {
            Exclusion::MemoryCap => "memory_cap",
            Exclusion::NoData => "no_data",
            Exclusion::TooFar => "too_far",
            Exclusion::RankDeficient => "rank_deficient",
        }
    }
}

impl From<Rejection> for Exclusion {
    fn from(r: Rejection) -> Self {
        match r {
            Rejection::NoData => Exclusion::NoData,
            Rejection::TooFar => Exclusion::TooFar,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReachConfig {
    pub horizon: usize,
    /// Half-widths of the noise zonotope `Z_w` per state dimension.
    pub noise: [f64; STATE_DIM],
    /// Half-widths of the initial set around the last observed state.
    pub init_generators: [f64; STATE_DIM],
    pub max_order: usize,
    /// Maximum number of transitions used for identification.
    pub memory_cap: usize,
    /// Test inclusion in the full state instead of the position projection.
    pub full_state_inclusion: bool,
}

impl Default for ReachConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            noise: [0.005; STATE_DIM],
            init_generators: [0.05; STATE_DIM],
            max_order: 5,
            memory_cap: 20_000,
            full_state_inclusion: false,
        }
    }
}

impl ReachConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.max_order == 0 || self.memory_cap == 0 {
            return Err(Error::Config("reach horizon, max_order and memory_cap must be positive".into()));
        }
        if self.noise.iter().chain(&self.init_generators).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("reach noise and initial generators must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn noise_set(&self) -> Zonotope {
        Zonotope::axis_box(DVector::zeros(STATE_DIM), &self.noise).expect("validated sizes")
    }

    pub fn initial_set(&self, state: &DVector<f64>) -> Result<Zonotope> {
        Zonotope::axis_box(state.clone(), &self.init_generators)
    }
}

/// `(x, y, vx, vy)` of a chunk row.
pub fn state_of(row: &[f32]) -> DVector<f64> {
    DVector::from_iterator(STATE_DIM, row[..STATE_DIM].iter().map(|&v| f64::from(v)))
}

/// Consecutive real-row pairs across the chunks.
pub fn count_transitions<'a>(chunks: impl IntoIterator<Item = &'a TrajectoryChunk>) -> usize {
    chunks.into_iter().map(|c| c.real_len().saturating_sub(1)).sum()
}

/// Stacks every consecutive real-state pair of `chunks` and identifies the
/// model set. The memory cap is checked before any matrix is assembled.
pub fn identify_models(chunks: &[&TrajectoryChunk], cfg: &ReachConfig) -> Result<std::result::Result<IdentifiedModel, Exclusion>> {
    let t = count_transitions(chunks.iter().copied());
    if t > cfg.memory_cap {
        return Ok(Err(Exclusion::MemoryCap));
    }
    let mut xm = DMatrix::zeros(STATE_DIM, t);
    let mut xp = DMatrix::zeros(STATE_DIM, t);
    let mut col = 0;
    for chunk in chunks {
        for k in 1..chunk.real_len() {
            xm.set_column(col, &state_of(chunk.row(k - 1)));
            xp.set_column(col, &state_of(chunk.row(k)));
            col += 1;
        }
    }
    identify_from_data(&xm, &xp, &cfg.noise, cfg.memory_cap)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Excluded(Exclusion),
}

impl TrialStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TrialStatus::Ok => "ok",
            TrialStatus::Excluded(e) => e.as_str(),
        }
    }
}

/// Outcome of predicting one test chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub chunk_id: String,
    pub sets: Vec<Zonotope>,
    /// Position-plane area per step.
    pub areas: Vec<f64>,
    pub inclusion: Vec<bool>,
    pub status: TrialStatus,
    /// The horizon was cut short by numeric overflow.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub center: Vec<f64>,
    pub generators: Vec<Vec<f64>>,
    pub area: f64,
    pub included: bool,
}

/// JSON shape of a trial's reachable sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub chunk_id: String,
    pub status: String,
    pub truncated: bool,
    pub steps: Vec<StepRecord>,
}

impl TrialResult {
    pub fn excluded(chunk_id: String, reason: Exclusion) -> Self {
        Self {
            chunk_id,
            sets: Vec::new(),
            areas: Vec::new(),
            inclusion: Vec::new(),
            status: TrialStatus::Excluded(reason),
            truncated: false,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }

    pub fn to_record(&self) -> TrialRecord {
        TrialRecord {
            chunk_id: self.chunk_id.clone(),
            status: self.status.as_str().to_string(),
            truncated: self.truncated,
            steps: self
                .sets
                .iter()
                .zip(&self.areas)
                .zip(&self.inclusion)
                .enumerate()
                .map(|(k, ((z, &area), &included))| {
                    let r = z.to_record();
                    StepRecord {
                        step: k + 1,
                        center: r.center,
                        generators: r.generators,
                        area,
                        included,
                    }
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn chunk(rows: &[[f32; 6]], len: usize) -> TrajectoryChunk {
        let mut values = vec![0f32; len * 6];
        let mut padding = vec![0u8; len];
        for (i, r) in rows.iter().enumerate() {
            values[i * 6..i * 6 + 6].copy_from_slice(r);
            padding[i] = 1;
        }
        TrajectoryChunk {
            values,
            padding,
            track_id: "t".into(),
            start_frame: 0,
            dt: 0.1,
            split: Some(Split::Train),
        }
    }

    #[test]
    fn transitions_skip_padding() {
        let rows: Vec<[f32; 6]> = (0..7).map(|i| [i as f32, 0.0, 1.0, 0.0, 0.0, 0.0]).collect();
        let c = chunk(&rows, 10);
        assert_eq!(count_transitions([&c, &c]), 12);
    }

    #[test]
    fn memory_cap_before_assembly() {
        let rows: Vec<[f32; 6]> = (0..50).map(|i| [i as f32, 0.0, 1.0, 0.0, 0.0, 0.0]).collect();
        let c = chunk(&rows, 50);
        let many = vec![&c; 1000];
        let cfg = ReachConfig {
            memory_cap: 20_000,
            ..ReachConfig::default()
        };
        assert_eq!(identify_models(&many, &cfg).unwrap().unwrap_err(), Exclusion::MemoryCap);
    }

    #[test]
    fn single_transition_is_rank_deficient() {
        let c = chunk(&[[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.1, 0.0, 1.0, 0.0, 0.0, 0.0]], 50);
        assert_eq!(identify_models(&[&c], &ReachConfig::default()).unwrap().unwrap_err(), Exclusion::RankDeficient);
    }

    #[test]
    fn status_strings() {
        assert_eq!(TrialStatus::Ok.as_str(), "ok");
        assert_eq!(TrialStatus::Excluded(Exclusion::TooFar).as_str(), "too_far");
        assert_eq!(Exclusion::from(Rejection::NoData), Exclusion::NoData);
        assert!(ReachConfig::default().validate().is_ok());
        assert!(ReachConfig { horizon: 0, ..ReachConfig::default() }.validate().is_err());
    }
}
