//! Transformer trajectory encoder and its masked-denoising training loop.
//!
//! A chunk of `d_c` standardized rows is projected to `d_model`, a
//! positional table is added, and a stack of post-norm encoder layers
//! (`x ← BN(x + Drop(MHA(x)))`, `x ← BN(x + Drop(FF(x)))`) is applied. The
//! ReLU of the last layer's output is the embedding `H_out`. During training
//! a linear head maps `Drop(H_out)` back to the six input features.

mod masking;
mod model;
mod train;

use std::collections::BTreeMap;

pub use masking::{sample_column, sample_mask, MaskingSchedule};
pub use model::{sinusoidal_table, Batch, Encoder, ForwardOut, Mode, RunningStats};
pub use train::{masked_batch, train, validation_mse, write_log, EpochMetrics, TrainConfig, TrainOutcome};

use crate::data::{DEFAULT_CHUNK_LEN, FEATURES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub input_dim: usize,
    pub d_c: usize,
    /// Learn the positional table instead of using fixed sinusoids.
    pub learnable_pe: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 3,
            n_heads: 8,
            ff_dim: 256,
            dropout: 0.1,
            input_dim: FEATURES,
            d_c: DEFAULT_CHUNK_LEN,
            learnable_pe: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ff_dim == 0 || self.d_c < 2 {
            return Err(Error::Config(format!("encoder dimensions must be positive: {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.input_dim != FEATURES {
            return Err(Error::Config(format!("input_dim must be {FEATURES}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// `key=value` lines stored in checkpoints.
    pub fn to_echo(&self) -> String {
        format!(
            "d_model={}\nn_layers={}\nn_heads={}\nff_dim={}\ndropout={}\ninput_dim={}\nd_c={}\nlearnable_pe={}\n",
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.ff_dim,
            self.dropout,
            self.input_dim,
            self.d_c,
            self.learnable_pe
        )
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let map: BTreeMap<&str, &str> = text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim(), v.trim()))
            .collect();
        let get = |k: &str| -> Result<&str> {
            map.get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("checkpoint config lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("checkpoint config `{k}` is not an integer")))
        };
        let cfg = Self {
            d_model: num("d_model")?,
            n_layers: num("n_layers")?,
            n_heads: num("n_heads")?,
            ff_dim: num("ff_dim")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Format("checkpoint config `dropout` is not a number".into()))?,
            input_dim: num("input_dim")?,
            d_c: num("d_c")?,
            learnable_pe: get("learnable_pe")? == "true",
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
