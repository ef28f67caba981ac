use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use super::masking::{sample_mask, MaskingSchedule};
use super::model::{Batch, Encoder, Mode};
use crate::data::{Standardizer, TrajectoryChunk, FEATURES};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Graph, Tensor, DEFAULT_L2, DEFAULT_LR};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub l2: f64,
    pub seed: u64,
    pub schedule: MaskingSchedule,
    /// Log the running train loss every this many batches (0 = never).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 37,
            batch_size: 256,
            lr: DEFAULT_LR,
            l2: DEFAULT_L2,
            seed: 0,
            schedule: MaskingSchedule::default(),
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.l2 < 0.0 {
            return Err(Error::Config(format!("invalid optimizer settings lr={} l2={}", self.lr, self.l2)));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    /// One-based.
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub r: f64,
    pub l_m: f64,
}

pub struct TrainOutcome {
    /// The model after the last fully finite epoch.
    pub model: Encoder<f32>,
    pub history: Vec<EpochMetrics>,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<Error>,
}

/// Masked inputs, clean targets and loss weights (1 on every real cell).
pub fn masked_batch<R: Rng + ?Sized>(
    chunks: &[&TrajectoryChunk],
    r: f64,
    l_m: f64,
    rng: &mut R,
) -> Result<(Batch<f32>, Vec<f32>, Vec<u8>)> {
    let mut batch = Batch::<f32>::from_chunks(chunks)?;
    let targets = batch.values.clone();
    let mut weights = Vec::with_capacity(targets.len());
    for (i, c) in chunks.iter().enumerate() {
        let len = c.chunk_len();
        let mask = sample_mask(len, c.real_len(), FEATURES, r, l_m, rng);
        let base = i * len * FEATURES;
        for (j, &keep) in mask.iter().enumerate() {
            if keep == 0 {
                batch.values[base + j] = 0.0;
            }
        }
        for &p in &c.padding {
            weights.extend(std::iter::repeat_n(p, FEATURES));
        }
    }
    Ok((batch, targets, weights))
}

/// Eval-mode reconstruction MSE on standardized chunks with masks drawn at
/// `(r, l_m)` from a stream that restarts on every call, so calls at the
/// same curriculum stage see identical masks.
pub fn validation_mse(model: &Encoder<f32>, chunks: &[TrajectoryChunk], r: f64, l_m: f64, seed: u64, batch_size: usize) -> Result<f64> {
    let mut rng = rng::stream(seed, "val_mask");
    let (mut total, mut count) = (0f64, 0usize);
    for group in chunks.chunks(batch_size.max(1)) {
        let refs: Vec<&TrajectoryChunk> = group.iter().collect();
        let (batch, targets, weights) = masked_batch(&refs, r, l_m, &mut rng)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let out = model.forward(&mut g, &vars, &batch, Mode::Eval)?;
        let loss = g.masked_mse(out.pred, &targets, &weights)?;
        let n = weights.iter().filter(|&&w| w == 1).count();
        total += f64::from(g.value(loss).data()[0]) * n as f64;
        count += n;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Trains `model` on raw `train` chunks, validating on raw `val` chunks.
/// The standardizer is fitted on `train` and stored in the model.
/// `on_epoch` sees each epoch's metrics as soon as they are known.
pub fn train(
    mut model: Encoder<f32>,
    cfg: &TrainConfig,
    train: &[TrajectoryChunk],
    val: &[TrajectoryChunk],
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Size { needed: 1, got: 0 });
    }
    model.standardizer = Standardizer::fit(train);
    let train = model.standardizer.apply_all(train);
    let val = model.standardizer.apply_all(val);

    let mut shuffle_rng = rng::stream(cfg.seed, "shuffle");
    let mut mask_rng = rng::stream(cfg.seed, "mask");
    let mut drop_rng = rng::stream(cfg.seed, "dropout");
    let mut adam = AdamState::new(model.params(), cfg.lr, cfg.l2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut last_good = model.clone();

    for epoch in 0..cfg.epochs {
        let (r, l_m) = cfg.schedule.at(epoch, cfg.epochs);
        order.shuffle(&mut shuffle_rng);
        let (mut total, mut count) = (0f64, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&TrajectoryChunk> = idx.iter().map(|&i| &train[i]).collect();
            let step = (|| -> Result<(f64, usize)> {
                let (batch, targets, weights) = masked_batch(&refs, r, l_m, &mut mask_rng)?;
                let mut g = Graph::new();
                let vars = model.bind(&mut g, true);
                let out = model.forward(&mut g, &vars, &batch, Mode::Train { rng: &mut drop_rng })?;
                let loss = g.masked_mse(out.pred, &targets, &weights)?;
                let value = f64::from(g.value(loss).data()[0]);
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {}, batch {}", epoch + 1, bi + 1)));
                }
                let mut grads = g.backward(loss)?;
                let grads: Vec<Tensor<f32>> = vars
                    .iter()
                    .zip(model.params())
                    .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                    .collect();
                adam.step(model.params_mut(), &grads)?;
                model.update_running(&out.stats);
                Ok((value, weights.iter().filter(|&&w| w == 1).count()))
            })();
            match step {
                Ok((value, n)) => {
                    total += value * n as f64;
                    count += n;
                }
                Err(e) => {
                    warn!("training aborted: {e}; keeping the model from epoch {epoch}");
                    return Ok(TrainOutcome {
                        model: last_good,
                        history,
                        aborted: Some(e),
                    });
                }
            }
            if cfg.log_every > 0 && (bi + 1) % cfg.log_every == 0 {
                info!("epoch {} batch {}: running train mse {:.5}", epoch + 1, bi + 1, total / count.max(1) as f64);
            }
        }
        let train_mse = total / count.max(1) as f64;
        let val_mse = if val.is_empty() {
            f64::NAN
        } else {
            validation_mse(&model, &val, r, l_m, cfg.seed, cfg.batch_size)?
        };
        if !val.is_empty() && !val_mse.is_finite() {
            let e = Error::NonFinite(format!("validation loss at epoch {}", epoch + 1));
            warn!("training aborted: {e}");
            return Ok(TrainOutcome {
                model: last_good,
                history,
                aborted: Some(e),
            });
        }
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_mse,
            val_mse,
            r,
            l_m,
        };
        info!("epoch {}: train {:.5} val {:.5} (r {:.3}, l_m {:.2})", m.epoch, train_mse, val_mse, r, l_m);
        on_epoch(&m);
        history.push(m);
        last_good = model.clone();
    }
    Ok(TrainOutcome {
        model: last_good,
        history,
        aborted: None,
    })
}

/// CSV training log with header `epoch,train_mse,val_mse,r,l_m`.
pub fn write_log<W: std::io::Write>(out: W, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "train_mse", "val_mse", "r", "l_m"])?;
    for m in history {
        w.write_record([
            m.epoch.to_string(),
            format!("{:.8}", m.train_mse),
            format!("{:.8}", m.val_mse),
            format!("{:.4}", m.r),
            format!("{:.4}", m.l_m),
        ])?;
    }
    w.flush()?;
    Ok(())
}
