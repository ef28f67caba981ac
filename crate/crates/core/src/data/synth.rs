//! Synthetic pedestrian tracks with planted behavior modes.
//!
//! Every mode is a fixed linear map on `(x, y, vx, vy)` plus truncated
//! Gaussian process noise:
//!
//! - `constant_velocity`: `v' = v`.
//! - `turning`: `v' = R(ω·dt) v`, one shared yaw rate.
//! - `stop_and_go`: phases of `phase_len` samples alternating `v' = λ v`
//!   (slowing) and `v' = v / λ` (speeding up).
//!
//! Positions always integrate `x' = x + dt·v`. Accelerations are forward
//! differences of the velocity.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RawTrack, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ConstantVelocity,
    Turning,
    StopAndGo,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::ConstantVelocity, Mode::Turning, Mode::StopAndGo];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ConstantVelocity => "constant_velocity",
            Mode::Turning => "turning",
            Mode::StopAndGo => "stop_and_go",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_tracks: usize,
    pub seed: u64,
    pub dt: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Side of the square start region, meters.
    pub extent: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Yaw rate of the turning mode, rad/s.
    pub turn_rate: f64,
    /// Per-step speed factor while slowing down.
    pub slow_factor: f64,
    pub phase_len: usize,
    /// Standard deviation of the per-step process noise.
    pub noise_std: f64,
    /// Noise samples beyond this magnitude are redrawn.
    pub noise_bound: f64,
    /// Entry routes per mode. With 0, starts are uniform over the region
    /// with uniform headings; otherwise each track starts near one of its
    /// mode's fixed entry points and headings.
    pub routes: usize,
    /// Start-position spread around a route entry, meters.
    pub route_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_tracks: 300,
            seed: 7,
            dt: 0.1,
            min_len: 60,
            max_len: 200,
            extent: 35.0,
            speed_min: 0.8,
            speed_max: 1.6,
            turn_rate: 0.4,
            slow_factor: 0.95,
            phase_len: 50,
            noise_std: 0.002,
            noise_bound: 0.005,
            routes: 2,
            route_jitter: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_tracks > 0
            && self.dt > 0.0
            && self.min_len >= 2
            && self.max_len >= self.min_len
            && self.extent > 0.0
            && self.speed_min > 0.0
            && self.speed_max >= self.speed_min
            && self.slow_factor > 0.0
            && self.slow_factor < 1.0
            && self.phase_len > 0
            && self.noise_std >= 0.0
            && self.noise_bound >= 0.0
            && self.route_jitter >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid synthetic config {self:?}")));
        }
        Ok(())
    }
}

/// Generated tracks with their modes, in the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub tracks: Vec<RawTrack>,
    pub modes: Vec<Mode>,
}

fn noise(rng: &mut StreamRng, dist: &Option<Normal<f64>>, bound: f64) -> f64 {
    let Some(d) = dist else { return 0.0 };
    loop {
        let v = d.sample(rng);
        if v.abs() <= bound {
            return v;
        }
    }
}

/// Tracks cycle through the modes so each gets a third of them.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "synth");
    let dist = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("positive std"));
    let mut tracks = Vec::with_capacity(cfg.n_tracks);
    let mut modes = Vec::with_capacity(cfg.n_tracks);
    let (sin, cos) = (cfg.turn_rate * cfg.dt).sin_cos();
    let mut route_rng = stream(cfg.seed, "synth-routes");
    let entries: Vec<[f64; 3]> = (0..3 * cfg.routes)
        .map(|_| {
            [
                route_rng.random_range(0.0..cfg.extent),
                route_rng.random_range(0.0..cfg.extent),
                route_rng.random_range(0.0..std::f64::consts::TAU),
            ]
        })
        .collect();
    let jitter = (cfg.route_jitter > 0.0).then(|| Normal::new(0.0, cfg.route_jitter).expect("positive spread"));
    for i in 0..cfg.n_tracks {
        let mode = Mode::ALL[i % 3];
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let speed = rng.random_range(cfg.speed_min..=cfg.speed_max);
        let (x0, y0, heading) = if cfg.routes == 0 {
            let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            (rng.random_range(0.0..cfg.extent), rng.random_range(0.0..cfg.extent), h)
        } else {
            let [ex, ey, eh] = entries[(i % 3) * cfg.routes + (i / 3) % cfg.routes];
            let mut j = || jitter.map_or(0.0, |d| d.sample(&mut rng));
            (ex + j(), ey + j(), eh + 0.1 * j())
        };
        let mut s = [x0, y0, speed * heading.cos(), speed * heading.sin()];
        let mut states = Vec::with_capacity(len + 1);
        for k in 0..=len {
            states.push(s);
            let (vx, vy) = match mode {
                Mode::ConstantVelocity => (s[2], s[3]),
                Mode::Turning => (cos * s[2] - sin * s[3], sin * s[2] + cos * s[3]),
                Mode::StopAndGo => {
                    let f = if (k / cfg.phase_len).is_multiple_of(2) { cfg.slow_factor } else { 1.0 / cfg.slow_factor };
                    (f * s[2], f * s[3])
                }
            };
            s = [
                s[0] + cfg.dt * s[2] + noise(&mut rng, &dist, cfg.noise_bound),
                s[1] + cfg.dt * s[3] + noise(&mut rng, &dist, cfg.noise_bound),
                vx + noise(&mut rng, &dist, cfg.noise_bound),
                vy + noise(&mut rng, &dist, cfg.noise_bound),
            ];
        }
        let samples = (0..len)
            .map(|k| {
                let (a, b) = (states[k], states[k + 1]);
                Sample {
                    frame: k as i64,
                    x: a[0],
                    y: a[1],
                    vx: a[2],
                    vy: a[3],
                    ax: (b[2] - a[2]) / cfg.dt,
                    ay: (b[3] - a[3]) / cfg.dt,
                }
            })
            .collect();
        tracks.push(RawTrack {
            track_id: format!("s{i:04}"),
            samples,
            dt: cfg.dt,
        });
        modes.push(mode);
    }
    Ok(SynthDataset { tracks, modes })
}

impl SynthDataset {
    /// CSV with the default schema columns.
    pub fn write_tracks<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["track_id", "frame", "x", "y", "vx", "vy", "ax", "ay"])?;
        for t in &self.tracks {
            for s in &t.samples {
                w.write_record([
                    t.track_id.clone(),
                    s.frame.to_string(),
                    s.x.to_string(),
                    s.y.to_string(),
                    s.vx.to_string(),
                    s.vy.to_string(),
                    s.ax.to_string(),
                    s.ay.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `track_id,label` with the mode index as label.
    pub fn write_labels<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["track_id", "label"])?;
        for (t, m) in self.tracks.iter().zip(&self.modes) {
            let label = Mode::ALL.iter().position(|x| x == m).expect("known mode");
            w.write_record([t.track_id.clone(), label.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, tracks_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
        self.write_tracks(std::io::BufWriter::new(std::fs::File::create(tracks_path)?))?;
        self.write_labels(std::io::BufWriter::new(std::fs::File::create(labels_path)?))
    }
}
