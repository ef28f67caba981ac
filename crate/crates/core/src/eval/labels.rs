use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use crate::data::TrajectoryChunk;
use crate::error::{Error, Result};

/// Precomputed behavior labels keyed by chunk id or by track id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelTable {
    by_chunk: HashMap<String, i32>,
    by_track: HashMap<String, i32>,
}

impl LabelTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    /// CSV with a `label` column and a `chunk_id` or `track_id` column.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let label_col = find("label").ok_or_else(|| Error::Schema("label".into()))?;
        let (key_col, by_chunk) = match (find("chunk_id"), find("track_id")) {
            (Some(c), _) => (c, true),
            (None, Some(t)) => (t, false),
            (None, None) => return Err(Error::Schema("chunk_id".into())),
        };
        let mut table = LabelTable::default();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            let key = rec.get(key_col).ok_or(Error::Parse {
                row,
                message: "missing key".into(),
            })?;
            let label: i32 = rec.get(label_col).unwrap_or("").trim().parse().map_err(|e| Error::Parse {
                row,
                message: format!("label: {e}"),
            })?;
            let map = if by_chunk { &mut table.by_chunk } else { &mut table.by_track };
            map.insert(key.trim().to_string(), label);
        }
        Ok(table)
    }

    pub fn insert_chunk(&mut self, chunk_id: impl Into<String>, label: i32) {
        self.by_chunk.insert(chunk_id.into(), label);
    }

    pub fn insert_track(&mut self, track_id: impl Into<String>, label: i32) {
        self.by_track.insert(track_id.into(), label);
    }

    /// Chunk-level entries win over track-level ones.
    pub fn label_of(&self, chunk: &TrajectoryChunk) -> Option<i32> {
        self.by_chunk
            .get(&chunk.id())
            .or_else(|| self.by_track.get(&chunk.track_id))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.by_chunk.len() + self.by_track.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
