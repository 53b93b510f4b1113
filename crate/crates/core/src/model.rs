//! Residual 1D CNN over 12-lead traces with age/sex side inputs.
//!
//! Topology: stem conv→BN→ReLU, four residual blocks, flatten, a dense
//! embedding with ReLU, concatenation of `[age_norm, sex_bit]`, and a dense
//! output layer producing one logit per label. Sigmoid is applied only by
//! [`predict`]; training minimizes `bce_with_logits` on the logits.
//!
//! Each block runs conv→BN→ReLU→dropout→conv, where the second conv is
//! strided by the block's subsample factor. The skip path max-pools by the
//! same factor and adds a 1×1 conv when the channel count changes. After
//! the sum come BN→ReLU→dropout.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, AdamConfig, AdamState, AutodiffError, BatchNormStats, DropoutKey, Graph, Mode, Real, Tensor, Var,
};
use crate::signal::{ModelInput, NormalizationStats, N_LEADS};

pub const N_BLOCKS: usize = 4;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ECGN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("label width mismatch: model has {expected} outputs, data has {found}")]
    LabelWidthMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not an ECGN checkpoint")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint is truncated")]
    TruncatedFile,
    #[error("tensor {name}: expected shape {expected:?}, found {found:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor {0}")]
    UnexpectedTensor(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::TruncatedFile
        } else {
            ModelError::Io(e)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub subsample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_leads: usize,
    pub input_len: usize,
    pub stem: ConvSpec,
    pub blocks: Vec<BlockSpec>,
    pub dropout_rate: f64,
    pub embed_dim: usize,
    /// Filled from the label vocabulary when omitted from a run config.
    #[serde(default)]
    pub n_labels: usize,
}

impl ModelConfig {
    /// Small network for 100 Hz × 10 s inputs; sized to train on one CPU core.
    pub fn desk(n_labels: usize) -> Self {
        let b = |channels| BlockSpec {
            channels,
            kernel: 7,
            subsample: 4,
        };
        ModelConfig {
            input_leads: N_LEADS,
            input_len: 1000,
            stem: ConvSpec { channels: 8, kernel: 7 },
            blocks: vec![b(8), b(16), b(16), b(32)],
            dropout_rate: 0.2,
            embed_dim: 32,
            n_labels,
        }
    }

    /// 500 Hz × 10 s inputs with ECG-ResNet-sized channels.
    pub fn paper_scale(n_labels: usize) -> Self {
        let b = |channels| BlockSpec {
            channels,
            kernel: 17,
            subsample: 4,
        };
        ModelConfig {
            input_leads: N_LEADS,
            input_len: 5000,
            stem: ConvSpec {
                channels: 64,
                kernel: 17,
            },
            blocks: vec![b(64), b(128), b(196), b(256)],
            dropout_rate: 0.2,
            embed_dim: 32,
            n_labels,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::ConfigInvalid(m));
        if self.blocks.len() != N_BLOCKS {
            return bad(format!("blocks: need exactly {N_BLOCKS}, got {}", self.blocks.len()));
        }
        for (name, v) in [
            ("input_leads", self.input_leads),
            ("input_len", self.input_len),
            ("stem.channels", self.stem.channels),
            ("embed_dim", self.embed_dim),
            ("n_labels", self.n_labels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.stem.kernel % 2 == 0 {
            return bad(format!("stem.kernel must be odd, got {}", self.stem.kernel));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 {
                return bad(format!("blocks[{i}].channels must be positive"));
            }
            if b.kernel % 2 == 0 {
                return bad(format!("blocks[{i}].kernel must be odd, got {}", b.kernel));
            }
            if b.subsample == 0 {
                return bad(format!("blocks[{i}].subsample must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        Ok(())
    }

    /// Temporal length after each block: `ceil(previous / subsample)`.
    pub fn block_lengths(&self) -> Vec<usize> {
        let mut t = self.input_len;
        self.blocks
            .iter()
            .map(|b| {
                t = t.div_ceil(b.subsample);
                t
            })
            .collect()
    }

    pub fn flat_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.channels) * self.block_lengths().last().copied().unwrap_or(0)
    }

    /// Parameter names and shapes in storage order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, co, ci, k| {
            out.push((format!("{name}.weight"), vec![co, ci, k]));
            out.push((format!("{name}.bias"), vec![co]));
        };
        let bn = |out: &mut Vec<(String, Vec<usize>)>, name: &str, c| {
            out.push((format!("{name}.weight"), vec![c]));
            out.push((format!("{name}.bias"), vec![c]));
        };
        conv(&mut out, "stem.conv", self.stem.channels, self.input_leads, self.stem.kernel);
        bn(&mut out, "stem.bn", self.stem.channels);
        let mut c_in = self.stem.channels;
        for (i, b) in self.blocks.iter().enumerate() {
            conv(&mut out, &format!("blocks.{i}.conv1"), b.channels, c_in, b.kernel);
            bn(&mut out, &format!("blocks.{i}.bn1"), b.channels);
            conv(&mut out, &format!("blocks.{i}.conv2"), b.channels, b.channels, b.kernel);
            if c_in != b.channels {
                conv(&mut out, &format!("blocks.{i}.skip"), b.channels, c_in, 1);
            }
            bn(&mut out, &format!("blocks.{i}.bn2"), b.channels);
            c_in = b.channels;
        }
        out.push(("embed.weight".into(), vec![self.embed_dim, self.flat_dim()]));
        out.push(("embed.bias".into(), vec![self.embed_dim]));
        out.push(("head.weight".into(), vec![self.n_labels, self.embed_dim + 2]));
        out.push(("head.bias".into(), vec![self.n_labels]));
        out
    }

    /// Batch-norm layer names with their channel counts.
    pub fn batchnorm_layers(&self) -> Vec<(String, usize)> {
        let mut out = vec![("stem.bn".to_string(), self.stem.channels)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.bn1"), b.channels));
            out.push((format!("blocks.{i}.bn2"), b.channels));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 512,
            max_epochs: 70,
            patience: 7,
            seed: 0,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 12,
            patience: 3,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::ConfigInvalid("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.eval_every == 0 {
            return Err(ModelError::ConfigInvalid("max_epochs and eval_every must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(ModelError::ConfigInvalid(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Rows ready for the network: signals N×leads×len, demographics N×2
/// (`age_norm`, `sex_bit`) and 0/1 targets N×L.
#[derive(Clone, Debug, PartialEq)]
pub struct Examples {
    pub leads: usize,
    pub len: usize,
    pub n_labels: usize,
    pub signals: Vec<f32>,
    pub demographics: Vec<f32>,
    pub targets: Vec<f32>,
}

impl Examples {
    pub fn new(leads: usize, len: usize, n_labels: usize) -> Self {
        Examples {
            leads,
            len,
            n_labels,
            signals: Vec::new(),
            demographics: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.demographics.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.demographics.is_empty()
    }

    pub fn push(&mut self, input: &ModelInput, labels: &[u8]) -> Result<(), ModelError> {
        if input.signal.len() != self.leads * self.len {
            return Err(ModelError::ShapeMismatch(format!(
                "signal has {} values, expected {}×{}",
                input.signal.len(),
                self.leads,
                self.len
            )));
        }
        if labels.len() != self.n_labels {
            return Err(ModelError::LabelWidthMismatch {
                expected: self.n_labels,
                found: labels.len(),
            });
        }
        self.signals.extend_from_slice(&input.signal);
        self.demographics.extend([input.age_norm, input.sex_bit]);
        self.targets.extend(labels.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }));
        Ok(())
    }

    /// Sub-batch in the given row order.
    pub fn select(&self, rows: &[usize]) -> Examples {
        let s = self.leads * self.len;
        let mut out = Examples::new(self.leads, self.len, self.n_labels);
        for &r in rows {
            out.signals.extend_from_slice(&self.signals[r * s..(r + 1) * s]);
            out.demographics.extend_from_slice(&self.demographics[r * 2..r * 2 + 2]);
            out.targets
                .extend_from_slice(&self.targets[r * self.n_labels..(r + 1) * self.n_labels]);
        }
        out
    }

    fn tensors<R: Real>(&self, rows: &[usize]) -> (Tensor<R>, Tensor<R>, Vec<R>) {
        let s = self.leads * self.len;
        let mut x = Vec::with_capacity(rows.len() * s);
        let mut d = Vec::with_capacity(rows.len() * 2);
        let mut y = Vec::with_capacity(rows.len() * self.n_labels);
        for &r in rows {
            x.extend(self.signals[r * s..(r + 1) * s].iter().map(|&v| R::of(v as f64)));
            d.extend(self.demographics[r * 2..r * 2 + 2].iter().map(|&v| R::of(v as f64)));
            y.extend(
                self.targets[r * self.n_labels..(r + 1) * self.n_labels]
                    .iter()
                    .map(|&v| R::of(v as f64)),
            );
        }
        (
            Tensor::new(vec![rows.len(), self.leads, self.len], x).expect("non-empty batch"),
            Tensor::new(vec![rows.len(), 2], d).expect("non-empty batch"),
            y,
        )
    }

    fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.leads != cfg.input_leads || self.len != cfg.input_len {
            return Err(ModelError::ShapeMismatch(format!(
                "rows are {}×{}, model expects {}×{}",
                self.leads, self.len, cfg.input_leads, cfg.input_len
            )));
        }
        if self.n_labels != cfg.n_labels {
            return Err(ModelError::LabelWidthMismatch {
                expected: cfg.n_labels,
                found: self.n_labels,
            });
        }
        Ok(())
    }
}

/// Dropout stream identity for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKey {
    pub seed: u64,
    pub step: u64,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub params: Vec<Var>,
    pub stem: Var,
    pub blocks: Vec<Var>,
    pub logits: Var,
}

/// Parameters and batch-norm buffers of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<R = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<R>>,
    index: HashMap<String, usize>,
    bn_names: Vec<String>,
    bn: Vec<BatchNormStats<R>>,
}

/// Kaiming-uniform weights (fan-in), zero biases, unit BN scale.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Network<f32>, ModelError> {
    Network::new(cfg, seed)
}

impl<R: Real> Network<R> {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in cfg.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![R::zero(); n]
            } else if name.contains(".bn") {
                vec![R::one(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| R::of(rng.random_range(-bound..bound))).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        let (bn_names, bn) = cfg
            .batchnorm_layers()
            .into_iter()
            .map(|(name, c)| (name, BatchNormStats::new(c)))
            .unzip();
        Ok(Self::assemble(cfg.clone(), names, params, bn_names, bn))
    }

    fn assemble(
        config: ModelConfig,
        names: Vec<String>,
        params: Vec<Tensor<R>>,
        bn_names: Vec<String>,
        bn: Vec<BatchNormStats<R>>,
    ) -> Self {
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Network {
            config,
            names,
            params,
            index,
            bn_names,
            bn,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<R>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn batchnorm(&self, name: &str) -> Option<&BatchNormStats<R>> {
        self.bn_names.iter().position(|n| n == name).map(|i| &self.bn[i])
    }

    pub fn batchnorm_mut(&mut self, name: &str) -> Option<&mut BatchNormStats<R>> {
        self.bn_names.iter().position(|n| n == name).map(move |i| &mut self.bn[i])
    }

    pub fn cast<S: Real>(&self) -> Network<S> {
        let bn = self
            .bn
            .iter()
            .map(|s| BatchNormStats {
                running_mean: s.running_mean.iter().map(|v| S::of(v.f64())).collect(),
                running_var: s.running_var.iter().map(|v| S::of(v.f64())).collect(),
                momentum: S::of(s.momentum.f64()),
                eps: S::of(s.eps.f64()),
            })
            .collect();
        Network::assemble(
            self.config.clone(),
            self.names.clone(),
            self.params.iter().map(Tensor::cast).collect(),
            self.bn_names.clone(),
            bn,
        )
    }

    /// Train-mode pass: batch statistics, dropout on, running stats updated.
    pub fn forward_train(&mut self, g: &mut Graph<R>, x: Var, demo: Var, key: StepKey) -> Result<ForwardTrace, ModelError> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.run(g, x, demo, Mode::Train, key, &mut bn, true);
        self.bn = bn;
        out
    }

    /// Eval-mode pass: running statistics, dropout off. Parameters are graph
    /// inputs unless `with_grad` is set.
    pub fn forward_eval(&self, g: &mut Graph<R>, x: Var, demo: Var, with_grad: bool) -> Result<ForwardTrace, ModelError> {
        let mut bn = self.bn.clone();
        self.run(g, x, demo, Mode::Eval, StepKey { seed: 0, step: 0 }, &mut bn, with_grad)
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        g: &mut Graph<R>,
        x: Var,
        demo: Var,
        mode: Mode,
        key: StepKey,
        bn: &mut [BatchNormStats<R>],
        with_grad: bool,
    ) -> Result<ForwardTrace, ModelError> {
        let cfg = &self.config;
        let xs = g.shape(x);
        if xs.len() != 3 || xs[1] != cfg.input_leads || xs[2] != cfg.input_len {
            return Err(ModelError::ShapeMismatch(format!(
                "input {xs:?}, expected N×{}×{}",
                cfg.input_leads, cfg.input_len
            )));
        }
        if g.shape(demo) != [xs[0], 2] {
            return Err(ModelError::ShapeMismatch(format!("demographics {:?}, expected {}×2", g.shape(demo), xs[0])));
        }
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|t| if with_grad { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        let p = |name: String| pv[self.index[&name]];
        let mut bn_iter = bn.iter_mut();
        let mut norm = |g: &mut Graph<R>, h: Var, name: &str| -> Result<Var, ModelError> {
            let stats = bn_iter.next().expect("one stats entry per batch-norm layer");
            Ok(g.batchnorm1d(h, p(format!("{name}.weight")), p(format!("{name}.bias")), stats, mode)?)
        };
        let drop = |g: &mut Graph<R>, h: Var, layer: u64| {
            g.dropout(
                h,
                cfg.dropout_rate,
                mode,
                DropoutKey {
                    seed: key.seed,
                    layer,
                    step: key.step,
                },
            )
        };

        let h = g.conv1d(x, p("stem.conv.weight".into()), p("stem.conv.bias".into()), 1, (cfg.stem.kernel - 1) / 2)?;
        let h = norm(g, h, "stem.bn")?;
        let mut h = g.relu(h)?;
        let stem = h;
        let mut blocks = Vec::with_capacity(cfg.blocks.len());
        let mut c_in = cfg.stem.channels;
        for (i, b) in cfg.blocks.iter().enumerate() {
            let pad = (b.kernel - 1) / 2;
            let a = g.conv1d(h, p(format!("blocks.{i}.conv1.weight")), p(format!("blocks.{i}.conv1.bias")), 1, pad)?;
            let a = norm(g, a, &format!("blocks.{i}.bn1"))?;
            let a = g.relu(a)?;
            let a = drop(g, a, 2 * i as u64)?;
            let a = g.conv1d(
                a,
                p(format!("blocks.{i}.conv2.weight")),
                p(format!("blocks.{i}.conv2.bias")),
                b.subsample,
                pad,
            )?;
            let mut skip = if b.subsample > 1 {
                g.maxpool1d(h, b.subsample, b.subsample)?
            } else {
                h
            };
            if c_in != b.channels {
                skip = g.conv1d(skip, p(format!("blocks.{i}.skip.weight")), p(format!("blocks.{i}.skip.bias")), 1, 0)?;
            }
            let s = g.add(a, skip)?;
            let s = norm(g, s, &format!("blocks.{i}.bn2"))?;
            let s = g.relu(s)?;
            h = drop(g, s, 2 * i as u64 + 1)?;
            blocks.push(h);
            c_in = b.channels;
        }
        let f = g.flatten(h)?;
        let e = g.dense(f, p("embed.weight".into()), p("embed.bias".into()))?;
        let e = g.relu(e)?;
        let c = g.concat(e, demo)?;
        let logits = g.dense(c, p("head.weight".into()), p("head.bias".into()))?;
        Ok(ForwardTrace {
            params: pv,
            stem,
            blocks,
            logits,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (the last epoch without validation).
    pub best_epoch: usize,
    pub adam: AdamState<f32>,
}

fn batches(n: usize, batch_size: usize, order: &[usize]) -> Vec<&[usize]> {
    debug_assert_eq!(order.len(), n);
    order.chunks(batch_size).collect()
}

/// Minibatch Adam on `bce_with_logits`. With `val`, parameters of the epoch
/// with the lowest validation loss are kept and training stops after
/// `patience` epochs without strict improvement.
pub fn train(
    net: &mut Network<f32>,
    train_rows: &Examples,
    val_rows: Option<&Examples>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    tcfg.validate()?;
    if train_rows.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    train_rows.check_against(&net.config)?;
    if let Some(v) = val_rows {
        v.check_against(&net.config)?;
    }
    let mut adam = AdamState::new(
        AdamConfig {
            lr: tcfg.lr,
            ..AdamConfig::default()
        },
        net.params.iter().map(Tensor::len),
    );
    let n = train_rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>, Vec<BatchNormStats<f32>>)> = None;
    let mut step = 0u64;
    for epoch in 1..=tcfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for rows in batches(n, tcfg.batch_size, &order) {
            let (x, d, y) = train_rows.tensors::<f32>(rows);
            let mut g = Graph::new();
            let (xv, dv) = (g.input(x), g.input(d));
            let tr = net.forward_train(&mut g, xv, dv, StepKey { seed: tcfg.seed, step })?;
            let loss = g.bce_with_logits(tr.logits, &y)?;
            loss_sum += g.value(loss).data()[0] as f64 * rows.len() as f64;
            g.backward(loss)?;
            let grads: Vec<Vec<f32>> = tr
                .params
                .iter()
                .map(|&v| g.take_grad(v).expect("parameter gradient"))
                .collect();
            let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
            adam_step(&mut net.params, &refs, &mut adam)?;
            step += 1;
        }
        let train_loss = loss_sum / n as f64;
        let evaluate = epoch % tcfg.eval_every == 0 || epoch == tcfg.max_epochs;
        let val_loss = match val_rows {
            Some(v) if evaluate && !v.is_empty() => Some(mean_loss(net, v, tcfg.batch_size)?),
            _ => None,
        };
        log::info!(
            "epoch {epoch}: train loss {train_loss:.5}{}",
            val_loss.map(|v| format!(", val loss {v:.5}")).unwrap_or_default()
        );
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if let Some(vl) = val_loss {
            if best.as_ref().is_none_or(|b| vl < b.0) {
                best = Some((vl, epoch, net.params.clone(), net.bn.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= tcfg.patience {
                log::info!("early stop at epoch {epoch}");
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, params, bn)) => {
            net.params = params;
            net.bn = bn;
            e
        }
        None => curve.len(),
    };
    Ok(TrainOutcome {
        curve,
        best_epoch,
        adam,
    })
}

/// Mean eval-mode BCE over all rows and labels.
pub fn mean_loss(net: &Network<f32>, rows: &Examples, batch_size: usize) -> Result<f64, ModelError> {
    rows.check_against(&net.config)?;
    let idx: Vec<usize> = (0..rows.len()).collect();
    let parts: Vec<Result<f64, ModelError>> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, d, y) = rows.tensors::<f32>(chunk);
            let mut g = Graph::new();
            let (xv, dv) = (g.input(x), g.input(d));
            let tr = net.forward_eval(&mut g, xv, dv, false)?;
            let loss = g.bce_with_logits(tr.logits, &y)?;
            Ok(g.value(loss).data()[0] as f64 * chunk.len() as f64)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / rows.len() as f64)
}

/// Eval-mode logits, N×L row-major, rows in input order.
pub fn predict_logits(net: &Network<f32>, rows: &Examples, batch_size: usize) -> Result<Vec<f32>, ModelError> {
    let cfg = &net.config;
    if rows.leads != cfg.input_leads || rows.len != cfg.input_len {
        return Err(ModelError::ShapeMismatch(format!(
            "rows are {}×{}, model expects {}×{}",
            rows.leads, rows.len, cfg.input_leads, cfg.input_len
        )));
    }
    let idx: Vec<usize> = (0..rows.len()).collect();
    let parts: Vec<Result<Vec<f32>, ModelError>> = idx
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let (x, d, _) = rows.tensors::<f32>(chunk);
            let mut g = Graph::new();
            let (xv, dv) = (g.input(x), g.input(d));
            let tr = net.forward_eval(&mut g, xv, dv, false)?;
            Ok(g.value(tr.logits).data().to_vec())
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len() * cfg.n_labels);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Probabilities in the open interval (0, 1), N×L row-major.
pub fn predict(net: &Network<f32>, rows: &Examples, batch_size: usize) -> Result<Vec<f32>, ModelError> {
    Ok(predict_logits(net, rows, batch_size)?
        .into_iter()
        .map(probability)
        .collect())
}

/// Sigmoid evaluated in f64 and clamped so f32 rounding never yields 0 or 1.
pub fn probability(logit: f32) -> f32 {
    let z = logit as f64;
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    (p as f32).clamp(f32::MIN_POSITIVE, 1.0 - f32::EPSILON / 2.0)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub loss_history: Vec<EpochRecord>,
    pub labels: Vec<String>,
    pub label_kind: Option<String>,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stats: NormalizationStats,
    pub meta: CheckpointMeta,
    pub network: Network<f32>,
    pub adam: Option<AdamState<f32>>,
}

#[derive(Serialize, Deserialize)]
struct AdamHeader {
    t: u64,
    config: AdamConfig,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    stats: NormalizationStats,
    meta: CheckpointMeta,
    adam: Option<AdamHeader>,
}

fn write_tensor<W: Write>(w: &mut W, name: &str, shape: &[usize], data: &[f32]) -> Result<(), ModelError> {
    let nb = name.as_bytes();
    w.write_all(&(nb.len() as u16).to_le_bytes())?;
    w.write_all(nb)?;
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one record; `None` at a clean end of stream.
fn read_tensor<Rd: Read>(r: &mut Rd) -> Result<Option<(String, Vec<usize>, Vec<f32>)>, ModelError> {
    let mut len = [0u8; 2];
    let got = r.read(&mut len[..1])?;
    if got == 0 {
        return Ok(None);
    }
    r.read_exact(&mut len[1..])?;
    let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| ModelError::UnexpectedTensor("<non-utf8 name>".into()))?;
    let mut rank = [0u8; 1];
    r.read_exact(&mut rank)?;
    let mut shape = Vec::with_capacity(rank[0] as usize);
    for _ in 0..rank[0] {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Some((name, shape, data)))
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let net = &self.network;
        let header = Header {
            config: net.config.clone(),
            stats: self.stats.clone(),
            meta: self.meta.clone(),
            adam: self.adam.as_ref().map(|a| AdamHeader {
                t: a.t,
                config: a.config,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (name, t) in net.names.iter().zip(&net.params) {
            write_tensor(&mut w, name, t.shape(), t.data())?;
        }
        for (name, s) in net.bn_names.iter().zip(&net.bn) {
            write_tensor(&mut w, &format!("{name}.running_mean"), &[s.running_mean.len()], &s.running_mean)?;
            write_tensor(&mut w, &format!("{name}.running_var"), &[s.running_var.len()], &s.running_var)?;
        }
        if let Some(a) = &self.adam {
            for (moment, bufs) in [("m", &a.m), ("v", &a.v)] {
                for ((name, t), buf) in net.names.iter().zip(&net.params).zip(bufs) {
                    write_tensor(&mut w, &format!("adam.{moment}.{name}"), t.shape(), buf)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<Rd: Read>(mut r: Rd) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        let version = u16::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.config.validate()?;

        let mut expected: HashMap<String, Vec<usize>> = header.config.parameter_shapes().into_iter().collect();
        for (name, c) in header.config.batchnorm_layers() {
            expected.insert(format!("{name}.running_mean"), vec![c]);
            expected.insert(format!("{name}.running_var"), vec![c]);
        }
        if header.adam.is_some() {
            for (name, shape) in header.config.parameter_shapes() {
                expected.insert(format!("adam.m.{name}"), shape.clone());
                expected.insert(format!("adam.v.{name}"), shape);
            }
        }
        let mut found: HashMap<String, Vec<f32>> = HashMap::new();
        while let Some((name, shape, data)) = read_tensor(&mut r)? {
            let want = expected
                .get(&name)
                .ok_or_else(|| ModelError::UnexpectedTensor(name.clone()))?;
            if *want != shape {
                return Err(ModelError::TensorShapeMismatch {
                    name,
                    expected: want.clone(),
                    found: shape,
                });
            }
            found.insert(name, data);
        }
        let mut take = |name: &str| found.remove(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()));

        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in header.config.parameter_shapes() {
            params.push(Tensor::new(shape, take(&name)?)?);
            names.push(name);
        }
        let mut bn_names = Vec::new();
        let mut bn = Vec::new();
        for (name, c) in header.config.batchnorm_layers() {
            let mut s = BatchNormStats::new(c);
            s.running_mean = take(&format!("{name}.running_mean"))?;
            s.running_var = take(&format!("{name}.running_var"))?;
            bn.push(s);
            bn_names.push(name);
        }
        let adam = match header.adam {
            Some(h) => {
                let mut m = Vec::new();
                let mut v = Vec::new();
                for name in &names {
                    m.push(take(&format!("adam.m.{name}"))?);
                    v.push(take(&format!("adam.v.{name}"))?);
                }
                Some(AdamState {
                    config: h.config,
                    t: h.t,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            stats: header.stats,
            meta: header.meta,
            network: Network::assemble(header.config, names, params, bn_names, bn),
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Fails unless the output layer has exactly `n_labels` rows.
    pub fn expect_labels(&self, n_labels: usize) -> Result<(), ModelError> {
        let cfg = self.network.config();
        if cfg.n_labels != n_labels {
            return Err(ModelError::TensorShapeMismatch {
                name: "head.weight".into(),
                expected: vec![n_labels, cfg.embed_dim + 2],
                found: vec![cfg.n_labels, cfg.embed_dim + 2],
            });
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(len: usize, subsample: [usize; 4], channels: [usize; 4], n_labels: usize) -> ModelConfig {
        ModelConfig {
            input_leads: 2,
            input_len: len,
            stem: ConvSpec { channels: 2, kernel: 3 },
            blocks: (0..4)
                .map(|i| BlockSpec {
                    channels: channels[i],
                    kernel: 3,
                    subsample: subsample[i],
                })
                .collect(),
            dropout_rate: 0.0,
            embed_dim: 4,
            n_labels,
        }
    }

    fn random_examples(cfg: &ModelConfig, n: usize, seed: u64) -> Examples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ex = Examples::new(cfg.input_leads, cfg.input_len, cfg.n_labels);
        for _ in 0..n {
            let input = ModelInput {
                signal: (0..cfg.input_leads * cfg.input_len).map(|_| rng.random_range(-1.0..1.0)).collect(),
                age_norm: rng.random_range(-2.0..2.0),
                sex_bit: rng.random_range(0..2) as f32,
            };
            let labels: Vec<u8> = (0..cfg.n_labels).map(|_| rng.random_range(0..2)).collect();
            ex.push(&input, &labels).unwrap();
        }
        ex
    }

    /// Rows whose first label is 1 exactly when lead 0 has a positive mean.
    fn learnable(cfg: &ModelConfig, n: usize, seed: u64) -> Examples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ex = Examples::new(cfg.input_leads, cfg.input_len, cfg.n_labels);
        for _ in 0..n {
            let pos = rng.random_bool(0.5);
            let shift = if pos { 0.8 } else { -0.8 };
            let signal = (0..cfg.input_leads * cfg.input_len)
                .map(|j| rng.random_range(-1.0..1.0) + if j < cfg.input_len { shift } else { 0.0 })
                .collect();
            let mut labels = vec![0u8; cfg.n_labels];
            labels[0] = pos as u8;
            ex.push(&ModelInput { signal, age_norm: 0.0, sex_bit: 0.0 }, &labels).unwrap();
        }
        ex
    }

    #[test]
    fn desk_example_config_outputs_probabilities() {
        let b = |channels, kernel, subsample| BlockSpec { channels, kernel, subsample };
        let cfg = ModelConfig {
            input_leads: 12,
            input_len: 1000,
            stem: ConvSpec { channels: 16, kernel: 17 },
            blocks: vec![b(16, 9, 4), b(32, 9, 4), b(48, 9, 4), b(64, 9, 4)],
            dropout_rate: 0.2,
            embed_dim: 32,
            n_labels: 5,
        };
        let net = build_model(&cfg, 1).unwrap();
        let rows = random_examples(&cfg, 3, 2);
        let p = predict(&net, &rows, 8).unwrap();
        assert_eq!(p.len(), 3 * 5);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        let head = net.param("head.weight").unwrap().len() + net.param("head.bias").unwrap().len();
        assert_eq!(head, (32 + 2) * 5 + 5);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(3);
        cfg.validate().unwrap();
        ModelConfig::paper_scale(3).validate().unwrap();
        cfg.blocks.pop();
        assert!(matches!(cfg.validate(), Err(ModelError::ConfigInvalid(_))));
        let mut cfg = ModelConfig::desk(3);
        cfg.blocks[2].kernel = 4;
        assert!(matches!(build_model(&cfg, 0), Err(ModelError::ConfigInvalid(_))));
        let mut cfg = ModelConfig::desk(3);
        cfg.blocks[0].subsample = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn block_lengths_follow_ceil_division() {
        for len in [5usize, 16, 31, 32, 33] {
            for s in [[1, 1, 1, 1], [2, 3, 1, 4], [4, 4, 4, 4], [3, 2, 2, 5]] {
                let cfg = tiny(len, s, [2, 3, 3, 2], 1);
                let mut expect = Vec::new();
                let mut t = len;
                for f in s {
                    t = (t + f - 1) / f;
                    expect.push(t);
                }
                assert_eq!(cfg.block_lengths(), expect);
                let net = build_model(&cfg, 0).unwrap();
                let rows = random_examples(&cfg, 2, 0);
                let (x, d, _) = rows.tensors::<f32>(&[0, 1]);
                let mut g = Graph::new();
                let (xv, dv) = (g.input(x), g.input(d));
                let tr = net.forward_eval(&mut g, xv, dv, false).unwrap();
                for (i, &b) in tr.blocks.iter().enumerate() {
                    assert_eq!(g.shape(b), &[2, cfg.blocks[i].channels, expect[i]]);
                }
            }
        }
    }

    #[test]
    fn residual_identity() {
        let cfg = tiny(12, [3, 1, 1, 1], [2, 2, 2, 2], 1);
        let mut net = build_model(&cfg, 4).unwrap();
        net.param_mut("blocks.0.conv2.weight").unwrap().data_mut().fill(0.0);
        let rows = random_examples(&cfg, 2, 1);
        let (x, d, _) = rows.tensors::<f32>(&[0, 1]);
        let mut g = Graph::new();
        let (xv, dv) = (g.input(x), g.input(d));
        let tr = net.forward_eval(&mut g, xv, dv, false).unwrap();
        let stem = g.value(tr.stem).data().to_vec();
        let out = g.value(tr.blocks[0]).data();
        let scale = 1.0 / (1.0f32 + 1e-5).sqrt();
        for r in 0..4 {
            for o in 0..4 {
                let pooled = stem[r * 12 + o * 3..r * 12 + o * 3 + 3].iter().copied().fold(f32::MIN, f32::max);
                let want = (pooled * scale).max(0.0);
                assert!((out[r * 4 + o] - want).abs() < 1e-6, "{} vs {want}", out[r * 4 + o]);
            }
        }
    }

    #[test]
    fn zero_input_gives_half() {
        let cfg = ModelConfig::desk(4);
        let net = build_model(&cfg, 9).unwrap();
        let mut rows = Examples::new(12, 1000, 4);
        let zero = ModelInput { signal: vec![0.0; 12_000], age_norm: 0.0, sex_bit: 0.0 };
        rows.push(&zero, &[0; 4]).unwrap();
        rows.push(&zero, &[0; 4]).unwrap();
        assert!(predict(&net, &rows, 4).unwrap().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn predict_is_deterministic_and_row_equivariant() {
        let cfg = tiny(20, [2, 2, 2, 2], [2, 3, 3, 4], 3);
        let mut net = build_model(&cfg, 3).unwrap();
        net.param_mut("head.bias").unwrap().data_mut().copy_from_slice(&[0.3, -0.2, 12.0]);
        let rows = random_examples(&cfg, 5, 7);
        let a = predict(&net, &rows, 2).unwrap();
        assert_eq!(a, predict(&net, &rows, 3).unwrap());
        let perm = [3, 0, 4, 1, 2];
        let b = predict(&net, &rows.select(&perm), 2).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert_eq!(&b[i * 3..i * 3 + 3], &a[src * 3..src * 3 + 3]);
        }
        let logits = predict_logits(&net, &rows, 5).unwrap();
        for (p, z) in a.iter().zip(&logits) {
            let exact = 1.0 / (1.0 + (-(*z as f64)).exp());
            assert!((*p as f64 - exact).abs() < 1e-7);
            assert!(*p > 0.0 && *p < 1.0);
        }
    }

    #[test]
    fn probability_stays_open() {
        assert!(probability(60.0) < 1.0);
        assert!(probability(-120.0) > 0.0);
        assert_eq!(probability(0.0), 0.5);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let cfg = tiny(24, [2, 2, 2, 2], [4, 4, 4, 4], 2);
        let data = learnable(&cfg, 64, 5);
        let tcfg = TrainConfig {
            lr: 0.01,
            batch_size: 16,
            max_epochs: 5,
            patience: 10,
            seed: 11,
            eval_every: 1,
        };
        let mut a = build_model(&cfg, 2).unwrap();
        let out_a = train(&mut a, &data, Some(&data), &tcfg).unwrap();
        assert!(out_a.curve[4].train_loss < out_a.curve[0].train_loss, "{:?}", out_a.curve);
        let mut b = build_model(&cfg, 2).unwrap();
        let out_b = train(&mut b, &data, Some(&data), &tcfg).unwrap();
        assert_eq!(out_a.curve, out_b.curve);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = tiny(16, [2, 2, 2, 2], [2, 2, 2, 2], 1);
        let data = random_examples(&cfg, 10, 1);
        let mut net = build_model(&cfg, 0).unwrap();
        let before = net.params().to_vec();
        let tcfg = TrainConfig { lr: 0.0, batch_size: 4, max_epochs: 2, ..TrainConfig::default() };
        train(&mut net, &data, None, &tcfg).unwrap();
        assert_eq!(net.params(), &before[..]);
    }

    #[test]
    fn early_stopping_restores_best_epoch() {
        let cfg = tiny(16, [2, 2, 2, 2], [2, 2, 2, 2], 1);
        let data = random_examples(&cfg, 16, 3);
        let val = random_examples(&cfg, 16, 4);
        let tcfg = TrainConfig { lr: 0.05, batch_size: 4, max_epochs: 30, patience: 2, seed: 1, eval_every: 1 };
        let mut net = build_model(&cfg, 0).unwrap();
        let out = train(&mut net, &data, Some(&val), &tcfg).unwrap();
        let best = out
            .curve
            .iter()
            .filter_map(|r| r.val_loss.map(|v| (v, r.epoch)))
            .fold((f64::INFINITY, 0), |a, b| if b.0 < a.0 { b } else { a });
        assert_eq!(out.best_epoch, best.1);
        assert!(out.curve.len() <= out.best_epoch + 2);
        assert_eq!(mean_loss(&net, &val, 4).unwrap(), best.0);
    }

    #[test]
    fn training_errors() {
        let cfg = tiny(16, [2, 2, 2, 2], [2, 2, 2, 2], 2);
        let mut net = build_model(&cfg, 0).unwrap();
        let empty = Examples::new(2, 16, 2);
        assert!(matches!(train(&mut net, &empty, None, &TrainConfig::default()), Err(ModelError::EmptyTrainingSet)));
        let wide = random_examples(&tiny(16, [2, 2, 2, 2], [2, 2, 2, 2], 3), 4, 0);
        assert!(matches!(
            train(&mut net, &wide, None, &TrainConfig::default()),
            Err(ModelError::LabelWidthMismatch { expected: 2, found: 3 })
        ));
    }

    fn sample_checkpoint(n_labels: usize, with_adam: bool) -> (Checkpoint, Examples) {
        let cfg = tiny(20, [2, 2, 2, 2], [2, 3, 3, 4], n_labels);
        let mut net = build_model(&cfg, 8).unwrap();
        let data = random_examples(&cfg, 8, 2);
        let tcfg = TrainConfig { lr: 0.01, batch_size: 4, max_epochs: 2, ..TrainConfig::default() };
        let out = train(&mut net, &data, None, &tcfg).unwrap();
        let stats = NormalizationStats {
            lead_mean: [0.125; N_LEADS],
            lead_std: [1.5; N_LEADS],
            age_mean: 61.3,
            age_std: 17.1,
        };
        let meta = CheckpointMeta {
            epoch: out.best_epoch,
            seed: 8,
            loss_history: out.curve,
            labels: (0..n_labels).map(|i| format!("I2{i}")).collect(),
            label_kind: Some("code".into()),
            config_digest: "abc".into(),
        };
        let ckpt = Checkpoint { stats, meta, network: net, adam: with_adam.then_some(out.adam) };
        (ckpt, data)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        for with_adam in [false, true] {
            let (ckpt, data) = sample_checkpoint(5, with_adam);
            let mut bytes = Vec::new();
            ckpt.write(&mut bytes).unwrap();
            let back = Checkpoint::read(&bytes[..]).unwrap();
            assert_eq!(back, ckpt);
            let a = predict(&ckpt.network, &data, 4).unwrap();
            let b = predict(&back.network, &data, 4).unwrap();
            assert_eq!(a, b);
            assert!(back.expect_labels(5).is_ok());
            assert!(matches!(back.expect_labels(6), Err(ModelError::TensorShapeMismatch { .. })));
        }
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let (ckpt, _) = sample_checkpoint(2, true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ecgn");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn corrupted_checkpoints_are_typed() {
        let (ckpt, _) = sample_checkpoint(2, false);
        let mut bytes = Vec::new();
        ckpt.write(&mut bytes).unwrap();

        for cut in [3, 5, 9, 20, bytes.len() - 1] {
            assert!(matches!(Checkpoint::read(&bytes[..cut]), Err(ModelError::TruncatedFile)), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read(&bad[..]), Err(ModelError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::read(&bad[..]), Err(ModelError::VersionMismatch { found: 9, .. })));

        // swap in a header that claims one more label than the stored tensors
        let mut other = ckpt.clone();
        other.network.config.n_labels = 3;
        let header = Header {
            config: other.network.config.clone(),
            stats: other.stats.clone(),
            meta: other.meta.clone(),
            adam: None,
        };
        let json = serde_json::to_vec(&header).unwrap();
        let old_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let mut patched = bytes[..6].to_vec();
        patched.extend((json.len() as u32).to_le_bytes());
        patched.extend(&json);
        patched.extend(&bytes[10 + old_len..]);
        assert!(matches!(Checkpoint::read(&patched[..]), Err(ModelError::TensorShapeMismatch { .. })));
    }
}
