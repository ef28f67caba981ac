//! Checkpoint file.
//!
//! ```text
//! "RPNN" | version: u16
//! config: u32 len + utf-8 key=value lines
//! standardizer: 6 f64 means, 6 f64 stds
//! count: u32, then per tensor:
//!   name (u32 len + utf-8) | ndim u32 | dims u64 * ndim | f32 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::tensor::Tensor;
use crate::data::{Standardizer, FEATURES};
use crate::error::{Error, Result};
use crate::io::{BinReader, BinWriter};

const MAGIC: &[u8; 4] = b"RPNN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub standardizer: Standardizer,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BinWriter::new(BufWriter::new(File::create(path)?));
        w.bytes(MAGIC)?;
        w.u16(CHECKPOINT_VERSION)?;
        w.str(&self.config)?;
        for v in self.standardizer.mean.iter().chain(&self.standardizer.std) {
            w.f64(*v)?;
        }
        w.u32(self.tensors.len() as u32)?;
        for (name, t) in &self.tensors {
            w.str(name)?;
            w.u32(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.u64(d as u64)?;
            }
            w.f32s(t.data())?;
        }
        w.finish()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BinReader::new(BufReader::new(File::open(path)?));
        r.magic(MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let config = r.str()?;
        let mut standardizer = Standardizer::default();
        for k in 0..FEATURES {
            standardizer.mean[k] = r.f64()?;
        }
        for k in 0..FEATURES {
            standardizer.std[k] = r.f64()?;
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape.iter().product();
            let data = r.f32s(n)?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok(Self {
            config,
            standardizer,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            config: "d_model=8\nn_heads=2\n".into(),
            standardizer: Standardizer {
                mean: [1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
                std: [0.5; 6],
            },
            tensors: vec![
                ("a.weight".into(), Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.5, 0.0, 1e-7]).unwrap()),
                ("a.bias".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap()),
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rpnn");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RPNN");
    }
}
