//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every operation in execution order. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in exact reverse
//! and accumulates gradients into every node that feeds a later one.
//! Only leaf gradients survive a backward pass.
//!
//! The operator set is the one the residual ECG network needs: batched 1D
//! convolution, batch normalization, ReLU, sigmoid, inverted dropout,
//! max-pooling, dense layers, concatenation, flattening, elementwise
//! add/mul, sum, and a logits-based binary cross-entropy. [`adam_step`]
//! updates parameters from the collected gradients.
//!
//! Everything is generic over [`Real`] so the same kernels can be checked
//! against finite differences in `f64` and trained in `f32`.
//!
//! ```
//! use ecgscreen::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
//! ```

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Scalar type of the engine (`f32` for training, `f64` for gradient checks).
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + Default + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("batch norm needs at least 2 values per channel, got {0}")]
    DegenerateBatch(usize),
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph node {node} consumes later node {input}")]
    GraphCycle { node: usize, input: usize },
    #[error("binary targets must be 0 or 1")]
    NonBinaryTarget,
}

fn mismatch(op: &'static str, detail: impl Into<String>) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Row-major dense buffer with an optional gradient of the same length.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
    grad: Option<Vec<R>>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(mismatch("tensor", format!("dimensions must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(mismatch("tensor", format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![R::zero(); n]).expect("positive dims")
    }

    pub fn full(shape: Vec<usize>, v: R) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![v; n]).expect("positive dims")
    }

    pub fn scalar(v: R) -> Self {
        Tensor::new(vec![1], vec![v]).expect("scalar")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn grad(&self) -> Option<&[R]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| S::of(x.f64())).collect(),
            grad: self.grad.as_ref().map(|g| g.iter().map(|&x| S::of(x.f64())).collect()),
        }
    }

    fn from_parts(shape: Vec<usize>, data: Vec<R>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Counter-based dropout mask key: masks depend only on these three values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    fn rng(self) -> ChaCha8Rng {
        let mixed = self.seed ^ self.layer.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(mixed);
        rng.set_stream(self.step);
        rng
    }
}

/// Running statistics of one batch-norm layer, updated in train mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<R> {
    pub running_mean: Vec<R>,
    pub running_var: Vec<R>,
    pub momentum: R,
    pub eps: R,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<R: Real> BatchNormStats<R> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            running_mean: vec![R::zero(); channels],
            running_var: vec![R::one(); channels],
            momentum: R::of(BN_MOMENTUM),
            eps: R::of(BN_EPS),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Conv1d { x: usize, w: usize, b: usize, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<R>, inv_std: Vec<R>, train: bool },
    Relu(usize),
    Sigmoid(usize),
    Dropout { x: usize, mask: Vec<R> },
    MaxPool { x: usize, argmax: Vec<usize> },
    Dense { x: usize, w: usize, b: usize },
    Concat { a: usize, b: usize },
    Reshape(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Bce { z: usize, targets: Vec<R> },
}

impl<R> Op<R> {
    fn inputs(&self) -> Vec<usize> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv1d { x, w, b, .. } | Op::Dense { x, w, b } => vec![x, w, b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Relu(x) | Op::Sigmoid(x) | Op::Reshape(x) | Op::Sum(x) => vec![x],
            Op::Dropout { x, .. } | Op::MaxPool { x, .. } | Op::Bce { z: x, .. } => vec![x],
            Op::Concat { a, b } | Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batchnorm1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::MaxPool { .. } => "maxpool1d",
            Op::Dense { .. } => "dense",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "flatten",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Sum(_) => "sum",
            Op::Bce { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Recorded computation. Nodes are appended in execution order, so every
/// input index is smaller than its consumer's.
#[derive(Debug, Default)]
pub struct Graph<R = f32> {
    nodes: Vec<Node<R>>,
}

/// Samples per parallel work item. Fixed so reductions happen in the same
/// order whatever the thread count.
const CHUNK: usize = 4;

fn sigmoid<R: Real>(z: R) -> R {
    if z >= R::zero() {
        R::one() / (R::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (R::one() + e)
    }
}

/// Output range `[lo, hi)` of positions whose input tap `to*stride + k - pad` lies in `[0, t)`.
fn valid_range(k: usize, t: usize, t_out: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if t + pad > k { ((t - 1 + pad - k) / stride + 1).min(t_out) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv1d_out_len(t: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > t + 2 * pad {
        return None;
    }
    Some((t + 2 * pad - k) / stride + 1)
}

/// Ceil-mode pooling length: a trailing partial window is kept as long as
/// it starts inside the input.
pub fn maxpool1d_out_len(t: usize, k: usize, stride: usize) -> usize {
    if t <= k {
        return 1;
    }
    let n = (t - k).div_ceil(stride) + 1;
    if (n - 1) * stride >= t {
        n - 1
    } else {
        n
    }
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    t: usize,
    k: usize,
    t_out: usize,
    stride: usize,
    pad: usize,
}

fn conv_forward_sample<R: Real>(d: &ConvDims, x: &[R], w: &[R], b: &[R], out: &mut [R]) {
    for co in 0..d.c_out {
        let row = &mut out[co * d.t_out..(co + 1) * d.t_out];
        row.fill(b[co]);
        for ci in 0..d.c_in {
            let xrow = &x[ci * d.t..(ci + 1) * d.t];
            let wrow = &w[(co * d.c_in + ci) * d.k..(co * d.c_in + ci + 1) * d.k];
            for (kk, &wv) in wrow.iter().enumerate() {
                let (lo, hi) = valid_range(kk, d.t, d.t_out, d.stride, d.pad);
                if lo >= hi {
                    continue;
                }
                let start = lo * d.stride + kk - d.pad;
                if d.stride == 1 {
                    for (o, &xv) in row[lo..hi].iter_mut().zip(&xrow[start..start + (hi - lo)]) {
                        *o += wv * xv;
                    }
                } else {
                    for (o, &xv) in row[lo..hi].iter_mut().zip(xrow[start..].iter().step_by(d.stride)) {
                        *o += wv * xv;
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients of one sample.
fn conv_backward_sample<R: Real>(
    d: &ConvDims,
    x: &[R],
    w: &[R],
    gy: &[R],
    gx: Option<&mut [R]>,
    gw: &mut [R],
    gb: &mut [R],
) {
    let mut gx = gx;
    for co in 0..d.c_out {
        let grow = &gy[co * d.t_out..(co + 1) * d.t_out];
        gb[co] += grow.iter().copied().sum::<R>();
        for ci in 0..d.c_in {
            let xrow = &x[ci * d.t..(ci + 1) * d.t];
            let base = (co * d.c_in + ci) * d.k;
            for kk in 0..d.k {
                let (lo, hi) = valid_range(kk, d.t, d.t_out, d.stride, d.pad);
                if lo >= hi {
                    continue;
                }
                let start = lo * d.stride + kk - d.pad;
                let g = &grow[lo..hi];
                let wv = w[base + kk];
                if d.stride == 1 {
                    let xs = &xrow[start..start + g.len()];
                    gw[base + kk] += g.iter().zip(xs).map(|(&a, &b)| a * b).sum::<R>();
                    if let Some(gx) = gx.as_deref_mut() {
                        let dst = &mut gx[ci * d.t + start..ci * d.t + start + g.len()];
                        for (o, &gv) in dst.iter_mut().zip(g) {
                            *o += wv * gv;
                        }
                    }
                } else {
                    gw[base + kk] += g
                        .iter()
                        .zip(xrow[start..].iter().step_by(d.stride))
                        .map(|(&a, &b)| a * b)
                        .sum::<R>();
                    if let Some(gx) = gx.as_deref_mut() {
                        for (i, &gv) in g.iter().enumerate() {
                            gx[ci * d.t + start + i * d.stride] += wv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn check_finite<R: Real>(op: &'static str, data: &[R]) -> Result<(), AutodiffError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite(op))
    }
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Result<Var, AutodiffError> {
        check_finite(op.name(), &value.data)?;
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Tensor<R>, requires_grad: bool) -> Var {
        let mut value = t;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is kept for it.
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.leaf(t, false)
    }

    /// Input that receives a gradient on backward.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<R>> {
        self.nodes[v.0].value.grad.take()
    }

    fn data(&self, v: Var) -> &[R] {
        &self.nodes[v.0].value.data
    }

    /// Batched cross-correlation: `x` is N×C_in×T, `w` is C_out×C_in×K, `b` is C_out.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(mismatch("conv1d", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, c_in, t, c_out, k) = (xs[0], xs[1], xs[2], ws[0], ws[2]);
        let t_out = conv1d_out_len(t, k, stride, pad)
            .ok_or_else(|| mismatch("conv1d", format!("kernel {k} stride {stride} pad {pad} on length {t}")))?;
        let d = ConvDims { c_in, c_out, t, k, t_out, stride, pad };
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![R::zero(); n * c_out * t_out];
        out.par_chunks_mut(c_out * t_out)
            .enumerate()
            .for_each(|(i, o)| conv_forward_sample(&d, &xd[i * c_in * t..(i + 1) * c_in * t], wd, bd, o));
        self.push(
            Tensor::from_parts(vec![n, c_out, t_out], out),
            Op::Conv1d { x: x.0, w: w.0, b: b.0, stride, pad },
        )
    }

    /// Per-channel normalization of an N×C×T tensor over (N, T).
    pub fn batchnorm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<R>,
        mode: Mode,
    ) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        let c = *xs.get(1).unwrap_or(&0);
        if xs.len() != 3
            || self.shape(gamma) != [c]
            || self.shape(beta) != [c]
            || stats.running_mean.len() != c
            || stats.running_var.len() != c
        {
            return Err(mismatch("batchnorm1d", format!("x {xs:?} with {} channel params", self.shape(gamma)[0])));
        }
        let (n, t) = (xs[0], xs[2]);
        let m = n * t;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(AutodiffError::DegenerateBatch(m));
        }
        let xd = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut inv_std = vec![R::zero(); c];
        let mut mean = vec![R::zero(); c];
        for ch in 0..c {
            if train {
                let vals = (0..n).flat_map(|i| xd[(i * c + ch) * t..(i * c + ch + 1) * t].iter());
                let mu = vals.clone().map(|v| v.f64()).sum::<f64>() / m as f64;
                let var = vals.map(|v| (v.f64() - mu).powi(2)).sum::<f64>() / m as f64;
                mean[ch] = R::of(mu);
                inv_std[ch] = R::of(1.0 / (var + stats.eps.f64()).sqrt());
                let mo = stats.momentum;
                stats.running_mean[ch] = (R::one() - mo) * stats.running_mean[ch] + mo * R::of(mu);
                stats.running_var[ch] = (R::one() - mo) * stats.running_var[ch] + mo * R::of(var);
            } else {
                mean[ch] = stats.running_mean[ch];
                inv_std[ch] = R::one() / (stats.running_var[ch] + stats.eps).sqrt();
            }
        }
        let mut xhat = vec![R::zero(); xd.len()];
        let mut out = vec![R::zero(); xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * t;
                for j in off..off + t {
                    xhat[j] = (xd[j] - mean[ch]) * inv_std[ch];
                    out[j] = g[ch] * xhat[j] + bt[ch];
                }
            }
        }
        self.push(
            Tensor::from_parts(xs, out),
            Op::BatchNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std, train },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let out = v.data.iter().map(|&a| a.max(R::zero())).collect();
        let shape = v.shape.clone();
        self.push(Tensor::from_parts(shape, out), Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let out = v.data.iter().map(|&a| sigmoid(a)).collect();
        let shape = v.shape.clone();
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(x.0))
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-rate)` in
    /// train mode; eval mode and `rate == 0` are the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, key: DropoutKey) -> Result<Var, AutodiffError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidRate(rate));
        }
        let v = self.value(x);
        let mask: Vec<R> = if mode == Mode::Eval || rate == 0.0 {
            vec![R::one(); v.len()]
        } else {
            let scale = R::of(1.0 / (1.0 - rate));
            let mut rng = key.rng();
            (0..v.len())
                .map(|_| if rng.random::<f64>() < rate { R::zero() } else { scale })
                .collect()
        };
        let out = v.data.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = v.shape.clone();
        self.push(Tensor::from_parts(shape, out), Op::Dropout { x: x.0, mask })
    }

    /// Max over windows of `k` with step `stride` along the last axis of N×C×T.
    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, AutodiffError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || k == 0 || stride == 0 {
            return Err(mismatch("maxpool1d", format!("x {xs:?}, k {k}, stride {stride}")));
        }
        let (rows, t) = (xs[0] * xs[1], xs[2]);
        let t_out = maxpool1d_out_len(t, k, stride);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows * t_out);
        let mut argmax = Vec::with_capacity(rows * t_out);
        for r in 0..rows {
            for o in 0..t_out {
                let start = r * t + o * stride;
                let end = r * t + (o * stride + k).min(t);
                let mut best = start;
                for j in start + 1..end {
                    if xd[j] > xd[best] {
                        best = j;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
        self.push(Tensor::from_parts(vec![xs[0], xs[1], t_out], out), Op::MaxPool { x: x.0, argmax })
    }

    /// `x` N×F, `w` O×F, `b` O; returns N×O.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[1] || bs[0] != ws[0] {
            return Err(mismatch("dense", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(n * o);
        for i in 0..n {
            let xr = &xd[i * f..(i + 1) * f];
            for j in 0..o {
                let wr = &wd[j * f..(j + 1) * f];
                out.push(bd[j] + xr.iter().zip(wr).map(|(&a, &b)| a * b).sum::<R>());
            }
        }
        self.push(Tensor::from_parts(vec![n, o], out), Op::Dense { x: x.0, w: w.0, b: b.0 })
    }

    /// Column concatenation of two N×F matrices.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (as_, bs) = (self.shape(a), self.shape(b));
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(mismatch("concat", format!("{as_:?} with {bs:?}")));
        }
        let (n, fa, fb) = (as_[0], as_[1], bs[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n * (fa + fb));
        for i in 0..n {
            out.extend_from_slice(&ad[i * fa..(i + 1) * fa]);
            out.extend_from_slice(&bd[i * fb..(i + 1) * fb]);
        }
        self.push(Tensor::from_parts(vec![n, fa + fb], out), Op::Concat { a: a.0, b: b.0 })
    }

    /// N×... to N×prod(...).
    pub fn flatten(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let v = self.value(x);
        let n = v.shape[0];
        let shape = vec![n, v.len() / n];
        let data = v.data.clone();
        self.push(Tensor::from_parts(shape, data), Op::Reshape(x.0))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Mul(a.0, b.0))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.data(x).iter().copied().sum::<R>();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    /// Mean binary cross-entropy on logits,
    /// `max(z,0) - z*y + ln(1 + exp(-|z|))`, averaged over all N×L entries.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[R]) -> Result<Var, AutodiffError> {
        let zs = self.shape(z);
        if zs.len() != 2 || targets.len() != self.value(z).len() {
            return Err(mismatch("bce_with_logits", format!("logits {zs:?} with {} targets", targets.len())));
        }
        if targets.iter().any(|&y| y != R::zero() && y != R::one()) {
            return Err(AutodiffError::NonBinaryTarget);
        }
        let zd = self.data(z);
        let total: f64 = zd
            .iter()
            .zip(targets)
            .map(|(&zv, &y)| {
                let (zv, y) = (zv.f64(), y.f64());
                zv.max(0.0) - zv * y + (-zv.abs()).exp().ln_1p()
            })
            .sum();
        let loss = R::of(total / zd.len() as f64);
        self.push(Tensor::scalar(loss), Op::Bce { z: z.0, targets: targets.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`. Gradients of leaves created with
    /// [`Graph::param`] are available afterwards through [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.nodes[i].value.grad.take() else {
                continue;
            };
            if let Some(&bad) = self.nodes[i].op.inputs().iter().find(|&&j| j >= i) {
                return Err(AutodiffError::GraphCycle { node: i, input: bad });
            }
            let contributions = self.local_grads(i, &gy);
            for (j, g) in contributions {
                let node = &mut self.nodes[j];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.value.grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.grad = Some(gy);
            }
        }
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Gradient contributions of node `i` to each of its inputs.
    fn local_grads(&self, i: usize, gy: &[R]) -> Vec<(usize, Vec<R>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => vec![],
            &Op::Conv1d { x, w, b, stride, pad } => {
                let (xs, ws) = (&val(x).shape, &val(w).shape);
                let d = ConvDims {
                    c_in: xs[1],
                    c_out: ws[0],
                    t: xs[2],
                    k: ws[2],
                    t_out: node.value.shape[2],
                    stride,
                    pad,
                };
                let n = xs[0];
                let (xd, wd) = (&val(x).data, &val(w).data);
                let in_len = d.c_in * d.t;
                let out_len = d.c_out * d.t_out;
                let need_gx = self.wants(x);
                let mut gx = vec![R::zero(); if need_gx { xd.len() } else { 0 }];
                let chunk_in = if need_gx { CHUNK * in_len } else { 0 };
                let mut slots: Vec<&mut [R]> = if need_gx {
                    gx.chunks_mut(chunk_in).collect()
                } else {
                    Vec::new()
                };
                let mut empty: Vec<&mut [R]> = (0..n.div_ceil(CHUNK)).map(|_| -> &mut [R] { &mut [] }).collect();
                let gx_chunks = if need_gx { &mut slots } else { &mut empty };
                let partials: Vec<(Vec<R>, Vec<R>)> = gx_chunks
                    .par_iter_mut()
                    .enumerate()
                    .map(|(ci, gxc)| {
                        let mut gw = vec![R::zero(); wd.len()];
                        let mut gb = vec![R::zero(); d.c_out];
                        for s in ci * CHUNK..((ci + 1) * CHUNK).min(n) {
                            let local = s - ci * CHUNK;
                            let gx_s = if need_gx {
                                Some(&mut gxc[local * in_len..(local + 1) * in_len])
                            } else {
                                None
                            };
                            conv_backward_sample(
                                &d,
                                &xd[s * in_len..(s + 1) * in_len],
                                wd,
                                &gy[s * out_len..(s + 1) * out_len],
                                gx_s,
                                &mut gw,
                                &mut gb,
                            );
                        }
                        (gw, gb)
                    })
                    .collect();
                let mut gw = vec![R::zero(); wd.len()];
                let mut gb = vec![R::zero(); d.c_out];
                for (pw, pb) in &partials {
                    add_into(&mut gw, pw);
                    add_into(&mut gb, pb);
                }
                let mut out = vec![(w, gw), (b, gb)];
                if need_gx {
                    out.push((x, gx));
                }
                out
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = &val(*x).shape;
                let (n, c, t) = (s[0], s[1], s[2]);
                let g = &val(*gamma).data;
                let mut ggamma = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                let mut gx = vec![R::zero(); gy.len()];
                let m = R::of((n * t) as f64);
                for ch in 0..c {
                    let idx = || (0..n).flat_map(move |i| (i * c + ch) * t..(i * c + ch + 1) * t);
                    let (mut sdy, mut sdyx) = (R::zero(), R::zero());
                    for j in idx() {
                        sdy += gy[j];
                        sdyx += gy[j] * xhat[j];
                    }
                    gbeta[ch] = sdy;
                    ggamma[ch] = sdyx;
                    let k = g[ch] * inv_std[ch];
                    if *train {
                        // dx = γ/σ · (dy - mean(dy) - x̂ · mean(dy · x̂))
                        for j in idx() {
                            gx[j] = k * (gy[j] - sdy / m - xhat[j] * sdyx / m);
                        }
                    } else {
                        for j in idx() {
                            gx[j] = k * gy[j];
                        }
                    }
                }
                vec![(*x, gx), (*gamma, ggamma), (*beta, gbeta)]
            }
            Op::Relu(x) => {
                let xd = &val(*x).data;
                let gx = xd
                    .iter()
                    .zip(gy)
                    .map(|(&a, &g)| if a > R::zero() { g } else { R::zero() })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let yd = &node.value.data;
                let gx = yd.iter().zip(gy).map(|(&y, &g)| g * y * (R::one() - y)).collect();
                vec![(*x, gx)]
            }
            Op::Dropout { x, mask } => {
                vec![(*x, mask.iter().zip(gy).map(|(&m, &g)| m * g).collect())]
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![R::zero(); val(*x).len()];
                for (&j, &g) in argmax.iter().zip(gy) {
                    gx[j] += g;
                }
                vec![(*x, gx)]
            }
            &Op::Dense { x, w, b } => {
                let (xd, wd) = (&val(x).data, &val(w).data);
                let (n, f) = (val(x).shape[0], val(x).shape[1]);
                let o = val(w).shape[0];
                let mut gx = vec![R::zero(); n * f];
                let mut gw = vec![R::zero(); o * f];
                let mut gb = vec![R::zero(); o];
                for i in 0..n {
                    let xr = &xd[i * f..(i + 1) * f];
                    for j in 0..o {
                        let g = gy[i * o + j];
                        gb[j] += g;
                        let wr = &wd[j * f..(j + 1) * f];
                        for ((gxv, gwv), (&xv, &wv)) in gx[i * f..(i + 1) * f]
                            .iter_mut()
                            .zip(&mut gw[j * f..(j + 1) * f])
                            .zip(xr.iter().zip(wr))
                        {
                            *gxv += g * wv;
                            *gwv += g * xv;
                        }
                    }
                }
                vec![(x, gx), (w, gw), (b, gb)]
            }
            &Op::Concat { a, b } => {
                let (fa, fb) = (val(a).shape[1], val(b).shape[1]);
                let n = val(a).shape[0];
                let mut ga = Vec::with_capacity(n * fa);
                let mut gb = Vec::with_capacity(n * fb);
                for row in gy.chunks(fa + fb) {
                    ga.extend_from_slice(&row[..fa]);
                    gb.extend_from_slice(&row[fa..]);
                }
                vec![(a, ga), (b, gb)]
            }
            Op::Reshape(x) => vec![(*x, gy.to_vec())],
            &Op::Add(a, b) => vec![(a, gy.to_vec()), (b, gy.to_vec())],
            &Op::Mul(a, b) => {
                let (ad, bd) = (&val(a).data, &val(b).data);
                let ga = bd.iter().zip(gy).map(|(&y, &g)| y * g).collect();
                let gb = ad.iter().zip(gy).map(|(&x, &g)| x * g).collect();
                vec![(a, ga), (b, gb)]
            }
            Op::Sum(x) => vec![(*x, vec![gy[0]; val(*x).len()])],
            Op::Bce { z, targets } => {
                let zd = &val(*z).data;
                let scale = gy[0] / R::of(zd.len() as f64);
                let gz = zd
                    .iter()
                    .zip(targets)
                    .map(|(&zv, &y)| (sigmoid(zv) - y) * scale)
                    .collect();
                vec![(*z, gz)]
            }
        }
    }
}

/// Adam hyperparameters; defaults are the canonical constants with `lr = 1e-3`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<R = f32> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<R>>,
    pub v: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = sizes
            .into_iter()
            .map(|n| (vec![R::zero(); n], vec![R::zero(); n]))
            .unzip();
        AdamState { config, t: 0, m, v }
    }
}

/// One bias-corrected Adam update; the step counter is incremented first.
pub fn adam_step<R: Real>(
    params: &mut [Tensor<R>],
    grads: &[&[R]],
    state: &mut AdamState<R>,
) -> Result<(), AutodiffError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(mismatch(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(mismatch("adam_step", format!("parameter {i}: {} values, grad {}", p.len(), g.len())));
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
    let corr1 = R::of(1.0 - c.beta1.powi(t));
    let corr2 = R::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (R::of(c.lr), R::of(c.eps));
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((pv, &gv), mv), vv) in p.data.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (R::one() - b1) * gv;
            *vv = b2 * *vv + (R::one() - b2) * gv * gv;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    for p in params.iter() {
        check_finite("adam_step", &p.data)?;
    }
    Ok(())
}
