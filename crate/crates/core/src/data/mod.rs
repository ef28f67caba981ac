//! Trajectory ingestion: loading, stationary filtering, chunking, splitting
//! and feature standardization.

mod store;
pub mod synth;

use std::collections::HashMap;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, fnv1a};

pub use store::{read_chunk_store, write_chunk_store};

/// Number of per-timestep features: x, y, vx, vy, ax, ay.
pub const FEATURES: usize = 6;
pub const FEATURE_NAMES: [&str; FEATURES] = ["x", "y", "vx", "vy", "ax", "ay"];
pub const DEFAULT_CHUNK_LEN: usize = 50;
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.70, 0.20, 0.10);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub ax: f64,
    pub ay: f64,
}

impl Sample {
    pub fn features(&self) -> [f64; FEATURES] {
        [self.x, self.y, self.vx, self.vy, self.ax, self.ay]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrack {
    pub track_id: String,
    pub samples: Vec<Sample>,
    /// Seconds per sample.
    pub dt: f64,
}

/// Column names for [`load_tracks`] plus the capture period of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub track_id: String,
    pub frame: String,
    pub x: String,
    pub y: String,
    pub vx: String,
    pub vy: String,
    pub ax: String,
    pub ay: String,
    pub frame_period: f64,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            track_id: "track_id".into(),
            frame: "frame".into(),
            x: "x".into(),
            y: "y".into(),
            vx: "vx".into(),
            vy: "vy".into(),
            ax: "ax".into(),
            ay: "ay".into(),
            frame_period: 0.1,
        }
    }
}

impl CsvSchema {
    fn columns(&self) -> [&str; 8] {
        [
            &self.track_id,
            &self.frame,
            &self.x,
            &self.y,
            &self.vx,
            &self.vy,
            &self.ax,
            &self.ay,
        ]
    }
}

/// Read a trajectory CSV into one [`RawTrack`] per track id, in order of
/// first appearance, with samples sorted by frame.
pub fn load_tracks(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<RawTrack>> {
    let file = std::fs::File::open(path.as_ref())?;
    load_tracks_from_reader(file, schema)
}

pub fn load_tracks_from_reader<R: std::io::Read>(
    reader: R,
    schema: &CsvSchema,
) -> Result<Vec<RawTrack>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(schema.columns()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(name.to_string()))?;
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, Vec<Sample>> = HashMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        // header is line 1
        let row = record.position().map_or(i + 2, |p| p.line() as usize);
        let cell = |k: usize| record.get(idx[k]).unwrap_or("");
        let num = |k: usize| -> Result<f64> {
            let raw = cell(k);
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                message: format!("column `{}`: `{raw}` is not numeric", schema.columns()[k]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("column `{}`: non-finite value", schema.columns()[k]),
                });
            }
            Ok(v)
        };
        let frame = num(1)?;
        if frame.fract() != 0.0 {
            return Err(Error::Parse {
                row,
                message: format!("frame `{}` is not an integer", cell(1)),
            });
        }
        let sample = Sample {
            frame: frame as i64,
            x: num(2)?,
            y: num(3)?,
            vx: num(4)?,
            vy: num(5)?,
            ax: num(6)?,
            ay: num(7)?,
        };
        let id = cell(0).to_string();
        by_id
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push(sample);
    }

    let mut tracks = Vec::with_capacity(order.len());
    for id in order {
        let mut samples = by_id.remove(&id).unwrap_or_default();
        samples.sort_by_key(|s| s.frame);
        if let Some(w) = samples.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::Parse {
                row: 0,
                message: format!("track `{id}` has duplicate frame {}", w[0].frame),
            });
        }
        let dt = infer_dt(&samples, schema.frame_period);
        tracks.push(RawTrack {
            track_id: id,
            samples,
            dt,
        });
    }
    Ok(tracks)
}

/// Median frame spacing times the frame period.
fn infer_dt(samples: &[Sample], frame_period: f64) -> f64 {
    let mut steps: Vec<i64> = samples.windows(2).map(|w| w[1].frame - w[0].frame).collect();
    if steps.is_empty() {
        return frame_period;
    }
    steps.sort_unstable();
    steps[steps.len() / 2] as f64 * frame_period
}

/// Drop tracks whose velocity is zero at every sample.
pub fn filter_stationary(tracks: Vec<RawTrack>) -> Vec<RawTrack> {
    tracks
        .into_iter()
        .filter(|t| t.samples.iter().any(|s| s.vx != 0.0 || s.vy != 0.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub(crate) fn to_code(split: Option<Split>) -> u8 {
        match split {
            None => 0,
            Some(Split::Train) => 1,
            Some(Split::Val) => 2,
            Some(Split::Test) => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Option<Split>> {
        Ok(match code {
            0 => None,
            1 => Some(Split::Train),
            2 => Some(Split::Val),
            3 => Some(Split::Test),
            other => return Err(Error::Format(format!("unknown split code {other}"))),
        })
    }
}

/// Fixed-length trajectory segment. Rows are `(x, y, vx, vy, ax, ay)`; real
/// rows form a prefix and padded rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryChunk {
    pub values: Vec<f32>,
    pub padding: Vec<u8>,
    pub track_id: String,
    pub start_frame: i64,
    pub dt: f32,
    pub split: Option<Split>,
}

impl TrajectoryChunk {
    pub fn chunk_len(&self) -> usize {
        self.padding.len()
    }

    pub fn real_len(&self) -> usize {
        self.padding.iter().take_while(|&&p| p == 1).count()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * FEATURES..(i + 1) * FEATURES]
    }

    pub fn real_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(FEATURES).take(self.real_len())
    }

    /// Stable identifier `track_id#start_frame`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.track_id, self.start_frame)
    }

    /// A chunk holding only the first `len` real rows, re-padded to the
    /// same length.
    pub fn prefix(&self, len: usize) -> TrajectoryChunk {
        let len = len.min(self.real_len());
        let mut out = self.clone();
        for i in len..self.chunk_len() {
            out.padding[i] = 0;
            out.values[i * FEATURES..(i + 1) * FEATURES].fill(0.0);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.chunk_len() * FEATURES {
            return Err(Error::Dimension {
                op: "chunk",
                left: vec![self.values.len()],
                right: vec![self.chunk_len(), FEATURES],
            });
        }
        let real = self.real_len();
        if real < 2 {
            return Err(Error::Contract(format!("chunk {} has {real} real rows", self.id())));
        }
        for (i, &p) in self.padding.iter().enumerate() {
            if (i < real) != (p == 1) {
                return Err(Error::Contract(format!(
                    "chunk {}: real rows are not a contiguous prefix",
                    self.id()
                )));
            }
            if p == 0 && self.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::Contract(format!("chunk {}: padded row {i} non-zero", self.id())));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("chunk {}", self.id())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ChunkSet {
    pub chunks: Vec<TrajectoryChunk>,
    /// Tracks with fewer than two samples.
    pub skipped_tracks: usize,
    /// Final partial chunks dropped for having a single sample.
    pub dropped_tails: usize,
}

/// Cut each track into consecutive non-overlapping windows of `chunk_len`
/// samples, zero-padding the final partial window.
pub fn chunk_and_pad(tracks: &[RawTrack], chunk_len: usize) -> Result<ChunkSet> {
    if chunk_len < 2 {
        return Err(Error::Contract(format!("chunk length must be >= 2, got {chunk_len}")));
    }
    let mut out = ChunkSet::default();
    for track in tracks {
        if track.samples.len() < 2 {
            out.skipped_tracks += 1;
            continue;
        }
        for window in track.samples.chunks(chunk_len) {
            if window.len() < 2 {
                out.dropped_tails += 1;
                continue;
            }
            let mut values = vec![0f32; chunk_len * FEATURES];
            let mut padding = vec![0u8; chunk_len];
            for (i, s) in window.iter().enumerate() {
                for (k, v) in s.features().into_iter().enumerate() {
                    values[i * FEATURES + k] = v as f32;
                }
                padding[i] = 1;
            }
            out.chunks.push(TrajectoryChunk {
                values,
                padding,
                track_id: track.track_id.clone(),
                start_frame: window[0].frame,
                dt: track.dt as f32,
                split: None,
            });
        }
    }
    if out.skipped_tracks > 0 {
        warn!("skipped {} tracks shorter than 2 samples", out.skipped_tracks);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<TrajectoryChunk>,
    pub val: Vec<TrajectoryChunk>,
    pub test: Vec<TrajectoryChunk>,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl DatasetSplit {
    /// Train and validation chunks: the historical data used for clustering.
    pub fn historical(&self) -> Vec<TrajectoryChunk> {
        self.train.iter().chain(&self.val).cloned().collect()
    }

    pub fn all(&self) -> Vec<TrajectoryChunk> {
        self.train.iter().chain(&self.val).chain(&self.test).cloned().collect()
    }

    /// Rebuild from chunks that already carry split tags.
    pub fn from_tagged(chunks: Vec<TrajectoryChunk>, seed: u64) -> Result<Self> {
        let mut split = DatasetSplit {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            fractions: SPLIT_FRACTIONS,
            seed,
        };
        for c in chunks {
            match c.split {
                Some(Split::Train) => split.train.push(c),
                Some(Split::Val) => split.val.push(c),
                Some(Split::Test) => split.test.push(c),
                None => return Err(Error::Contract(format!("chunk {} has no split tag", c.id()))),
            }
        }
        Ok(split)
    }
}

/// 70/20/10 split. The test subset depends only on chunk identities, never
/// on `seed`; the seed shuffles the remainder into train and validation.
pub fn split_dataset(chunks: Vec<TrajectoryChunk>, seed: u64) -> Result<DatasetSplit> {
    let n = chunks.len();
    if n < 10 {
        return Err(Error::Size { needed: 10, got: n });
    }
    let (f_train, _, f_test) = SPLIT_FRACTIONS;
    let n_test = (f_test * n as f64).round() as usize;
    let n_train = (f_train * n as f64).round() as usize;

    let mut keyed: Vec<(u64, usize)> = chunks
        .iter()
        .enumerate()
        .map(|(i, c)| (fnv1a(c.id().as_bytes()), i))
        .collect();
    keyed.sort_unstable();
    let mut is_test = vec![false; n];
    for &(_, i) in keyed.iter().take(n_test) {
        is_test[i] = true;
    }

    let mut rest: Vec<usize> = (0..n).filter(|&i| !is_test[i]).collect();
    rest.shuffle(&mut rng::stream(seed, "split"));
    let mut role = vec![Split::Test; n];
    for (pos, &i) in rest.iter().enumerate() {
        role[i] = if pos < n_train { Split::Train } else { Split::Val };
    }

    let mut out = DatasetSplit {
        train: Vec::with_capacity(n_train),
        val: Vec::with_capacity(n - n_train - n_test),
        test: Vec::with_capacity(n_test),
        fractions: SPLIT_FRACTIONS,
        seed,
    };
    // train and val keep the shuffled order, test keeps input order
    let mut slots: Vec<Option<TrajectoryChunk>> = chunks.into_iter().map(Some).collect();
    for &i in &rest {
        let mut c = slots[i].take().expect("each index visited once");
        c.split = Some(role[i]);
        match role[i] {
            Split::Train => out.train.push(c),
            _ => out.val.push(c),
        }
    }
    for slot in slots.into_iter().flatten() {
        let mut c = slot;
        c.split = Some(Split::Test);
        out.test.push(c);
    }
    Ok(out)
}

/// Per-feature z-score statistics fitted on real rows of the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; FEATURES],
    pub std: [f64; FEATURES],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            mean: [0.0; FEATURES],
            std: [1.0; FEATURES],
        }
    }
}

impl Standardizer {
    pub fn fit(chunks: &[TrajectoryChunk]) -> Self {
        let mut sum = [0f64; FEATURES];
        let mut sq = [0f64; FEATURES];
        let mut count = 0usize;
        for c in chunks {
            for row in c.real_rows() {
                for k in 0..FEATURES {
                    let v = f64::from(row[k]);
                    sum[k] += v;
                    sq[k] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for k in 0..FEATURES {
            let mean = sum[k] / count as f64;
            let var = (sq[k] / count as f64 - mean * mean).max(0.0);
            out.mean[k] = mean;
            out.std[k] = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        }
        out
    }

    /// Standardized copy; padded rows stay zero.
    pub fn apply(&self, chunk: &TrajectoryChunk) -> TrajectoryChunk {
        let mut out = chunk.clone();
        let real = chunk.real_len();
        for i in 0..real {
            for k in 0..FEATURES {
                let v = &mut out.values[i * FEATURES + k];
                *v = ((f64::from(*v) - self.mean[k]) / self.std[k]) as f32;
            }
        }
        out
    }

    pub fn apply_all(&self, chunks: &[TrajectoryChunk]) -> Vec<TrajectoryChunk> {
        chunks.iter().map(|c| self.apply(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(id: &str, n: usize) -> RawTrack {
        RawTrack {
            track_id: id.into(),
            samples: (0..n)
                .map(|i| Sample {
                    frame: i as i64,
                    x: i as f64,
                    y: 2.0 * i as f64,
                    vx: 1.0,
                    vy: 2.0,
                    ax: 0.0,
                    ay: 0.0,
                })
                .collect(),
            dt: 0.1,
        }
    }

    const CSV_HEADER: &str = "track_id,frame,x,y,vx,vy,ax,ay\n";

    #[test]
    fn load_two_tracks() {
        let mut csv = String::from(CSV_HEADER);
        for t in ["a", "b"] {
            for f in (0..5).rev() {
                csv.push_str(&format!("{t},{f},1,2,0.5,0,0,0\n"));
            }
        }
        let tracks = load_tracks_from_reader(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(tracks.len(), 2);
        assert!(tracks.iter().all(|t| t.samples.len() == 5));
        assert!(tracks[0].samples.windows(2).all(|w| w[0].frame < w[1].frame));
        assert!((tracks[0].dt - 0.1).abs() < 1e-12);
    }

    #[test]
    fn load_header_only() {
        let tracks = load_tracks_from_reader(CSV_HEADER.as_bytes(), &CsvSchema::default()).unwrap();
        assert!(tracks.is_empty());
    }

    #[test]
    fn load_missing_column_names_it() {
        let csv = "track_id,frame,x,y,vy,ax,ay\n";
        let err = load_tracks_from_reader(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        match err {
            Error::Schema(col) => assert_eq!(col, "vx"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn load_non_numeric_reports_row() {
        let csv = format!("{CSV_HEADER}a,0,1,2,3,4,5,6\na,1,1,oops,3,4,5,6\n");
        let err = load_tracks_from_reader(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        match err {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn dt_from_frame_spacing() {
        let csv = format!("{CSV_HEADER}a,0,0,0,1,0,0,0\na,3,0,0,1,0,0,0\na,6,0,0,1,0,0,0\n");
        let tracks = load_tracks_from_reader(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert!((tracks[0].dt - 0.3).abs() < 1e-12);
    }

    #[test]
    fn stationary_filter() {
        let mut still = track("still", 4);
        for s in &mut still.samples {
            s.vx = 0.0;
            s.vy = 0.0;
        }
        let mut one = still.clone();
        one.track_id = "one".into();
        one.samples[2].vy = 0.1;
        let kept = filter_stationary(vec![still, one]);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].track_id, "one");
        assert!(filter_stationary(vec![]).is_empty());
        let again = filter_stationary(kept.clone());
        assert_eq!(again, kept);
    }

    #[test]
    fn chunking_lengths() {
        let set = chunk_and_pad(&[track("t", 120)], 50).unwrap();
        let lens: Vec<usize> = set.chunks.iter().map(|c| c.real_len()).collect();
        assert_eq!(lens, vec![50, 50, 20]);
        assert_eq!(set.chunks[1].start_frame, 50);
        for c in &set.chunks {
            c.validate().unwrap();
        }

        let set = chunk_and_pad(&[track("t", 50)], 50).unwrap();
        assert_eq!(set.chunks.len(), 1);
        assert!(set.chunks[0].padding.iter().all(|&p| p == 1));

        let set = chunk_and_pad(&[track("t", 1)], 50).unwrap();
        assert!(set.chunks.is_empty());
        assert_eq!(set.skipped_tracks, 1);

        let set = chunk_and_pad(&[track("t", 51)], 50).unwrap();
        assert_eq!(set.chunks.len(), 1);
        assert_eq!(set.dropped_tails, 1);

        assert!(chunk_and_pad(&[], 1).is_err());
    }

    fn synthetic_chunks(n: usize) -> Vec<TrajectoryChunk> {
        let tracks: Vec<RawTrack> = (0..n).map(|i| track(&format!("t{i}"), 10)).collect();
        chunk_and_pad(&tracks, 10).unwrap().chunks
    }

    #[test]
    fn split_sizes() {
        let split = split_dataset(synthetic_chunks(100), 3).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (70, 20, 10));
        assert!(split.train.iter().all(|c| c.split == Some(Split::Train)));
        assert!(split.test.iter().all(|c| c.split == Some(Split::Test)));
        assert!(matches!(split_dataset(synthetic_chunks(9), 3), Err(Error::Size { .. })));
    }

    #[test]
    fn test_split_independent_of_seed() {
        let ids = |s: &DatasetSplit| -> (Vec<String>, Vec<String>) {
            (
                s.test.iter().map(|c| c.id()).collect(),
                s.train.iter().map(|c| c.id()).collect(),
            )
        };
        let a = split_dataset(synthetic_chunks(1000), 1).unwrap();
        let a2 = split_dataset(synthetic_chunks(1000), 1).unwrap();
        let b = split_dataset(synthetic_chunks(1000), 2).unwrap();
        assert_eq!(ids(&a), ids(&a2));
        assert_eq!(ids(&a).0, ids(&b).0);
        assert_ne!(ids(&a).1, ids(&b).1);
    }

    #[test]
    fn standardizer_uses_real_rows_only() {
        let set = chunk_and_pad(&[track("t", 30)], 50).unwrap();
        let st = Standardizer::fit(&set.chunks);
        assert!((st.mean[0] - 14.5).abs() < 1e-9);
        assert_eq!(st.std[2], 1.0); // constant vx
        let z = st.apply(&set.chunks[0]);
        z.validate().unwrap();
        let mean_x: f64 = z.real_rows().map(|r| f64::from(r[0])).sum::<f64>() / 30.0;
        assert!(mean_x.abs() < 1e-6);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunks_reassemble_track(len in 2usize..300, chunk_len in 2usize..60) {
                let t = track("p", len);
                let set = chunk_and_pad(std::slice::from_ref(&t), chunk_len).unwrap();
                let rows: Vec<Vec<f32>> = set.chunks.iter()
                    .flat_map(|c| c.real_rows().map(|r| r.to_vec()).collect::<Vec<_>>())
                    .collect();
                let expected_len = if len % chunk_len == 1 { len - 1 } else { len };
                prop_assert_eq!(rows.len(), expected_len);
                for (row, s) in rows.iter().zip(&t.samples) {
                    let f: Vec<f32> = s.features().iter().map(|&v| v as f32).collect();
                    prop_assert_eq!(row, &f);
                }
                for c in &set.chunks {
                    for i in 0..c.chunk_len() {
                        if c.padding[i] == 0 {
                            prop_assert!(c.row(i).iter().all(|&v| v == 0.0));
                        }
                    }
                }
            }

            #[test]
            fn split_partitions(n in 10usize..400, seed in 0u64..1000) {
                let chunks = synthetic_chunks(n);
                let split = split_dataset(chunks.clone(), seed).unwrap();
                prop_assert_eq!(split.test.len(), (0.1 * n as f64).round() as usize);
                let mut ids: Vec<String> = split.all().iter().map(|c| c.id()).collect();
                ids.sort();
                let mut orig: Vec<String> = chunks.iter().map(|c| c.id()).collect();
                orig.sort();
                prop_assert_eq!(ids, orig);
            }
        }
    }
}
