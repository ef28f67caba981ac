use std::collections::HashMap;

use rand::Rng;

use super::EncoderConfig;
use crate::data::{Standardizer, TrajectoryChunk, FEATURES};
use crate::error::{Error, Result};
use crate::nn::{BatchStats, Checkpoint, Graph, NormMode, Scalar, Tensor, Var};
use crate::rng::{self, StreamRng};

/// Running-average momentum for batch-norm statistics.
const BN_MOMENTUM: f64 = 0.1;
const HEAD_INIT_SCALE: f64 = 0.1;

/// Fixed sinusoidal table `[time, d_model]`: even columns `sin(t/10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn sinusoidal_table(time: usize, d_model: usize) -> Vec<f64> {
    let mut out = vec![0.0; time * d_model];
    for t in 0..time {
        for j in 0..d_model {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d_model as f64);
            out[t * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A batch of equally long chunks, flattened to `[batch·time, 6]` rows.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub values: Vec<T>,
    /// 1 for real rows.
    pub valid: Vec<u8>,
    pub batch: usize,
    pub time: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn from_chunks(chunks: &[&TrajectoryChunk]) -> Result<Self> {
        let time = chunks.first().map_or(0, |c| c.chunk_len());
        let mut values = Vec::with_capacity(chunks.len() * time * FEATURES);
        let mut valid = Vec::with_capacity(chunks.len() * time);
        for c in chunks {
            if c.chunk_len() != time || c.values.len() != time * FEATURES {
                return Err(Error::Dimension {
                    op: "batch",
                    left: vec![time, FEATURES],
                    right: vec![c.chunk_len(), c.values.len() / time.max(1)],
                });
            }
            values.extend(c.values.iter().map(|&v| T::from_f64_lossy(f64::from(v))));
            valid.extend_from_slice(&c.padding);
        }
        Ok(Self {
            values,
            valid,
            batch: chunks.len(),
            time,
        })
    }
}

pub enum Mode<'a> {
    /// Dropout active, batch norm from batch statistics.
    Train { rng: &'a mut StreamRng },
    Eval,
}

impl Mode<'_> {
    fn training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub struct ForwardOut {
    /// `[batch·time, d_model]` encoder output after the final ReLU.
    pub h_out: Var,
    /// `[batch·time, 6]` reconstruction from the head.
    pub pred: Var,
    /// Batch statistics of every batch norm, in layer order (training only).
    pub stats: Vec<BatchStats>,
}

/// Encoder parameters, batch-norm running statistics and the feature
/// standardizer the model was trained with.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub config: EncoderConfig,
    pub standardizer: Standardizer,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    running: Vec<RunningStats>,
}

fn layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.d_model, cfg.ff_dim);
    let mut out = vec![("input.w".to_string(), vec![cfg.input_dim, d]), ("input.b".to_string(), vec![d])];
    if cfg.learnable_pe {
        out.push(("pos".to_string(), vec![cfg.d_c, d]));
    }
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        for proj in ["q", "k", "v", "o"] {
            out.push((p(&format!("{proj}.w")), vec![d, d]));
            out.push((p(&format!("{proj}.b")), vec![d]));
        }
        out.push((p("norm1.gamma"), vec![d]));
        out.push((p("norm1.beta"), vec![d]));
        out.push((p("ff1.w"), vec![d, f]));
        out.push((p("ff1.b"), vec![f]));
        out.push((p("ff2.w"), vec![f, d]));
        out.push((p("ff2.b"), vec![d]));
        out.push((p("norm2.gamma"), vec![d]));
        out.push((p("norm2.beta"), vec![d]));
    }
    out.push(("head.w".to_string(), vec![d, cfg.input_dim]));
    out.push(("head.b".to_string(), vec![cfg.input_dim]));
    out
}

/// Key mask for `[batch·heads, time, time]` scores: key `s` is visible
/// when row `s` of the query's chunk is real.
fn attention_mask(valid: &[u8], batch: usize, time: usize, heads: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch * heads * time * time);
    for b in 0..batch {
        let keys = &valid[b * time..(b + 1) * time];
        for _ in 0..heads * time {
            out.extend_from_slice(keys);
        }
    }
    out
}

impl<T: Scalar> Encoder<T> {
    /// Glorot-uniform weights (the reconstruction head at a tenth of that
    /// scale, so an untrained model predicts close to zero), zero biases,
    /// unit norm gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "init");
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with(".w") {
                let mut limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                if name == "head.w" {
                    limit *= HEAD_INIT_SCALE;
                }
                (0..n).map(|_| T::from_f64_lossy(rng.random_range(-limit..limit))).collect()
            } else if name == "pos" {
                (0..n).map(|_| T::from_f64_lossy(rng.random_range(-0.02..0.02))).collect()
            } else if name.ends_with(".gamma") {
                vec![T::one(); n]
            } else {
                vec![T::zero(); n]
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let running = (0..2 * config.n_layers)
            .map(|_| RunningStats {
                mean: vec![0.0; config.d_model],
                var: vec![1.0; config.d_model],
            })
            .collect();
        Ok(Self::assemble(config, Standardizer::default(), names, params, running))
    }

    fn assemble(
        config: EncoderConfig,
        standardizer: Standardizer,
        names: Vec<String>,
        params: Vec<Tensor<T>>,
        running: Vec<RunningStats>,
    ) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            standardizer,
            names,
            params,
            index,
            running,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn running(&self) -> &[RunningStats] {
        &self.running
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder::assemble(
            self.config.clone(),
            self.standardizer,
            self.names.clone(),
            self.params.iter().map(|p| p.cast()).collect(),
            self.running.clone(),
        )
    }

    /// Registers every parameter as a leaf of `g`, in [`Encoder::params`] order.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| g.leaf(p.clone(), requires_grad)).collect()
    }

    /// Exponential update of running statistics from one training batch.
    /// Values are kept at f32 precision so checkpoints round-trip exactly.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        for (run, s) in self.running.iter_mut().zip(stats) {
            for (r, &b) in run.mean.iter_mut().zip(&s.mean) {
                *r = f64::from(((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b) as f32);
            }
            for (r, &b) in run.var.iter_mut().zip(&s.var) {
                *r = f64::from(((1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b) as f32);
            }
        }
    }

    /// Forward pass over `batch` using parameter leaves `vars` from
    /// [`Encoder::bind`] (or any leaves with the same shapes).
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], batch: &Batch<T>, mut mode: Mode<'_>) -> Result<ForwardOut> {
        let cfg = &self.config;
        let (b, t, d, heads) = (batch.batch, batch.time, cfg.d_model, cfg.n_heads);
        if vars.len() != self.params.len() {
            return Err(Error::Dimension {
                op: "encoder params",
                left: vec![self.params.len()],
                right: vec![vars.len()],
            });
        }
        let p = |name: &str| vars[self.index[name]];
        let mut h = self.embed(g, vars, batch)?;
        let key_mask = attention_mask(&batch.valid, b, t, heads);
        let scale = T::from_f64_lossy(1.0 / ((d / heads) as f64).sqrt());
        let mut stats = Vec::new();
        for l in 0..cfg.n_layers {
            let n = |s: &str| format!("layer{l}.{s}");
            let q = g.linear(h, p(&n("q.w")), p(&n("q.b")))?;
            let k = g.linear(h, p(&n("k.w")), p(&n("k.b")))?;
            let v = g.linear(h, p(&n("v.w")), p(&n("v.b")))?;
            let q = g.split_heads(q, b, t, heads)?;
            let k = g.split_heads(k, b, t, heads)?;
            let v = g.split_heads(v, b, t, heads)?;
            let scores = g.bmm(q, k, true)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_lastdim(scores, Some(&key_mask))?;
            let ctx = g.bmm(attn, v, false)?;
            let ctx = g.merge_heads(ctx, b, t, heads)?;
            let o = g.linear(ctx, p(&n("o.w")), p(&n("o.b")))?;
            let o = self.drop(g, o, &mut mode)?;
            let sum = g.add(h, o)?;
            h = self.norm(g, sum, p(&n("norm1.gamma")), p(&n("norm1.beta")), 2 * l, batch, &mode, &mut stats)?;

            let f = g.linear(h, p(&n("ff1.w")), p(&n("ff1.b")))?;
            let f = g.relu(f);
            let f = g.linear(f, p(&n("ff2.w")), p(&n("ff2.b")))?;
            let f = self.drop(g, f, &mut mode)?;
            let sum = g.add(h, f)?;
            h = self.norm(g, sum, p(&n("norm2.gamma")), p(&n("norm2.beta")), 2 * l + 1, batch, &mode, &mut stats)?;
        }
        let h_out = g.relu(h);
        let dropped = self.drop(g, h_out, &mut mode)?;
        let pred = g.linear(dropped, p("head.w"), p("head.b"))?;
        Ok(ForwardOut { h_out, pred, stats })
    }

    /// `H⁰ = input·W + b + PE` as a `[batch·time, d_model]` node.
    pub fn embed(&self, g: &mut Graph<T>, vars: &[Var], batch: &Batch<T>) -> Result<Var> {
        let cfg = &self.config;
        let (t, d) = (batch.time, cfg.d_model);
        let p = |name: &str| vars[self.index[name]];
        let x = g.leaf(Tensor::new(vec![batch.batch * t, cfg.input_dim], batch.values.clone())?, false);
        let h = g.linear(x, p("input.w"), p("input.b"))?;
        let pe = if cfg.learnable_pe {
            if t != cfg.d_c {
                return Err(Error::Dimension {
                    op: "learnable positional table",
                    left: vec![cfg.d_c],
                    right: vec![t],
                });
            }
            p("pos")
        } else {
            let table = sinusoidal_table(t, d).into_iter().map(T::from_f64_lossy).collect();
            g.leaf(Tensor::new(vec![t, d], table)?, false)
        };
        g.add_table(h, pe)
    }

    fn drop(&self, g: &mut Graph<T>, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        match mode {
            Mode::Train { rng } => g.dropout(x, self.config.dropout, true, &mut **rng),
            Mode::Eval => Ok(x),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &self,
        g: &mut Graph<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        which: usize,
        batch: &Batch<T>,
        mode: &Mode<'_>,
        stats: &mut Vec<BatchStats>,
    ) -> Result<Var> {
        let run = &self.running[which];
        let norm_mode = if mode.training() {
            NormMode::Train
        } else {
            NormMode::Eval {
                mean: &run.mean,
                var: &run.var,
            }
        };
        let (y, s) = g.batchnorm(x, gamma, beta, &batch.valid, norm_mode)?;
        stats.extend(s);
        Ok(y)
    }

    /// Eval-mode `H_out` for already standardized chunks, one
    /// `[chunk_len, d_model]` tensor per chunk.
    pub fn encode_standardized(&self, chunks: &[TrajectoryChunk], batch_size: usize) -> Result<Vec<Tensor<T>>> {
        let (d, bs) = (self.config.d_model, batch_size.max(1));
        let mut out = Vec::with_capacity(chunks.len());
        for group in chunks.chunks(bs) {
            let refs: Vec<&TrajectoryChunk> = group.iter().collect();
            let batch = Batch::<T>::from_chunks(&refs)?;
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let fwd = self.forward(&mut g, &vars, &batch, Mode::Eval)?;
            let h = g.value(fwd.h_out);
            h.check_finite("encoder output")?;
            for (i, rows) in h.data().chunks(batch.time * d).enumerate() {
                debug_assert!(i < group.len());
                out.push(Tensor::new(vec![batch.time, d], rows.to_vec())?);
            }
        }
        Ok(out)
    }

    /// Standardizes raw chunks with the model's statistics and encodes them.
    /// Returns `(chunk id, H_out)` pairs in input order.
    pub fn encode_dataset(&self, chunks: &[TrajectoryChunk], batch_size: usize) -> Result<Vec<(String, Tensor<T>)>> {
        let standardized = self.standardizer.apply_all(chunks);
        let encoded = self.encode_standardized(&standardized, batch_size)?;
        Ok(chunks.iter().map(|c| c.id()).zip(encoded).collect())
    }
}

impl Encoder<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self.names.iter().cloned().zip(self.params.iter().cloned()).collect();
        for (i, run) in self.running.iter().enumerate() {
            let (l, k) = (i / 2, i % 2 + 1);
            let to_t = |v: &[f64]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f32).collect()).expect("vector");
            tensors.push((format!("layer{l}.norm{k}.running_mean"), to_t(&run.mean)));
            tensors.push((format!("layer{l}.norm{k}.running_var"), to_t(&run.var)));
        }
        Checkpoint {
            config: self.config.to_echo(),
            standardizer: self.standardizer,
            tensors,
        }
    }

    /// Rebuilds a model from a checkpoint. With `expected`, the stored
    /// configuration must match it.
    pub fn from_checkpoint(ckpt: &Checkpoint, expected: Option<&EncoderConfig>) -> Result<Self> {
        let config = EncoderConfig::from_echo(&ckpt.config)?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(Error::Version {
                    expected: exp.to_echo().replace('\n', " "),
                    found: config.to_echo().replace('\n', " "),
                });
            }
        }
        let fetch = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let t = ckpt
                .tensor(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Dimension {
                    op: "checkpoint tensor",
                    left: shape.to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in layout(&config) {
            params.push(fetch(&name, &shape)?);
            names.push(name);
        }
        let mut running = Vec::new();
        for i in 0..2 * config.n_layers {
            let (l, k) = (i / 2, i % 2 + 1);
            let d = [config.d_model];
            let widen = |t: Tensor<f32>| t.data().iter().map(|&v| f64::from(v)).collect();
            running.push(RunningStats {
                mean: widen(fetch(&format!("layer{l}.norm{k}.running_mean"), &d)?),
                var: widen(fetch(&format!("layer{l}.norm{k}.running_var"), &d)?),
            });
        }
        Ok(Self::assemble(config, ckpt.standardizer, names, params, running))
    }
}
