//! Binary chunk store.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "RPDC" | version: u16 | chunk_len: u32 | count: u64
//! values:  count * chunk_len * 6 f32, row-major per chunk
//! padding: count * chunk_len u8
//! per chunk: track_id (u32 len + utf-8) | start_frame i64 | split u8 | dt f32
//! ```
//!
//! Split codes: 0 unassigned, 1 train, 2 val, 3 test.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{Split, TrajectoryChunk, FEATURES};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};

const MAGIC: &[u8; 4] = b"RPDC";
const VERSION: u16 = 1;

pub fn write_chunk_store(path: impl AsRef<Path>, chunks: &[TrajectoryChunk]) -> Result<()> {
    let chunk_len = chunks.first().map_or(0, |c| c.chunk_len());
    if let Some(bad) = chunks.iter().find(|c| c.chunk_len() != chunk_len) {
        return Err(Error::Dimension {
            op: "write_chunk_store",
            left: vec![chunk_len],
            right: vec![bad.chunk_len()],
        });
    }
    let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    w.u32(chunk_len as u32)?;
    w.u64(chunks.len() as u64)?;
    for c in chunks {
        w.f32s(&c.values)?;
    }
    for c in chunks {
        w.bytes(&c.padding)?;
    }
    for c in chunks {
        w.str(&c.track_id)?;
        w.i64(c.start_frame)?;
        w.u8(Split::to_code(c.split))?;
        w.f32(c.dt)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_chunk_store(path: impl AsRef<Path>) -> Result<Vec<TrajectoryChunk>> {
    let mut r = BinReader::new(BufReader::new(File::open(path)?));
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let chunk_len = r.u32()? as usize;
    let count = r.u64()? as usize;
    let mut chunks: Vec<TrajectoryChunk> = Vec::with_capacity(count);
    for _ in 0..count {
        chunks.push(TrajectoryChunk {
            values: r.f32s(chunk_len * FEATURES)?,
            padding: Vec::new(),
            track_id: String::new(),
            start_frame: 0,
            dt: 0.0,
            split: None,
        });
    }
    for c in &mut chunks {
        c.padding = r.bytes(chunk_len)?;
    }
    for c in &mut chunks {
        c.track_id = r.str()?;
        c.start_frame = r.i64()?;
        c.split = Split::from_code(r.u8()?)?;
        c.dt = r.f32()?;
        c.validate()?;
    }
    Ok(chunks)
}
