//! Layer vocabulary: parameters, dropout masks, and the kernels behind dense,
//! batch-norm, dropout and softmax cross-entropy.
//!
//! Dropout is inverted: kept activations are scaled by `1/(1-p)` in training
//! and inference is the identity. Masks are explicit values so a caller can
//! replay or inject them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::rng::MaskKey;
use crate::tensor::{self, Conv2dGeometry, Tensor};

pub use crate::tensor::maxpool2d;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Owns every trainable tensor of a network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Keep/drop bitmap for one dropout sample over a whole activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    keep: Vec<bool>,
    ratio: f64,
    seed_tag: Option<MaskKey>,
}

impl DropoutMask {
    /// An injected mask with no RNG provenance.
    pub fn from_keep(keep: Vec<bool>, ratio: f64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(DropoutMask { keep, ratio, seed_tag: None })
    }

    pub fn all_keep(len: usize, ratio: f64) -> Result<Self> {
        Self::from_keep(vec![true; len], ratio)
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn seed_tag(&self) -> Option<MaskKey> {
        self.seed_tag
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Multiplier applied to kept activations.
    pub fn scale(&self) -> f64 {
        1.0 / (1.0 - self.ratio)
    }

    /// Repeats each row `times` times consecutively, matching a duplicated
    /// minibatch.
    pub fn repeat_rows(&self, rows: usize, times: usize) -> Result<Self> {
        let width = self.row_width(rows)?;
        let mut keep = Vec::with_capacity(self.keep.len() * times);
        for row in self.keep.chunks_exact(width) {
            for _ in 0..times {
                keep.extend_from_slice(row);
            }
        }
        Ok(DropoutMask { keep, ratio: self.ratio, seed_tag: None })
    }

    /// Interleaves per-branch masks row by row: row `i·M + j` of the result is
    /// row `i` of `branches[j]`.
    pub fn interleave_rows(branches: &[&DropoutMask], rows: usize) -> Result<Self> {
        let first = branches.first().ok_or_else(|| Error::contract("no masks to interleave"))?;
        let width = first.row_width(rows)?;
        let mut keep = Vec::with_capacity(first.len() * branches.len());
        for i in 0..rows {
            for m in branches {
                if m.len() != first.len() || m.ratio != first.ratio {
                    return Err(Error::contract("interleaved masks disagree in size or ratio"));
                }
                keep.extend_from_slice(&m.keep[i * width..(i + 1) * width]);
            }
        }
        Ok(DropoutMask { keep, ratio: first.ratio, seed_tag: None })
    }

    fn row_width(&self, rows: usize) -> Result<usize> {
        if rows == 0 || !self.keep.len().is_multiple_of(rows) {
            return Err(Error::dim(format!("mask of {} entries over {rows} rows", self.keep.len())));
        }
        Ok(self.keep.len() / rows)
    }
}

fn check_ratio(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout ratio must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Draws a mask over `dim` positions, keeping each with probability `1 - p`.
pub fn mask_sample(key: MaskKey, dim: usize, p: f64) -> Result<DropoutMask> {
    check_ratio(p)?;
    let mut rng = key.rng();
    let keep = (0..dim).map(|_| rng.random::<f64>() >= p).collect();
    Ok(DropoutMask { keep, ratio: p, seed_tag: Some(key) })
}

pub(crate) fn dropout_kernel(x: &Tensor, keep: &[bool], scale: f64) -> Tensor {
    let data = x.data().iter().zip(keep).map(|(&v, &k)| if k { v * scale } else { 0.0 }).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn dropout_apply(x: &Tensor, mask: &DropoutMask, mode: Mode) -> Result<Tensor> {
    if mask.len() != x.numel() {
        return Err(Error::dim(format!("dropout mask covers {} positions, activation has {}", mask.len(), x.numel())));
    }
    Ok(match mode {
        Mode::Train => dropout_kernel(x, mask.keep(), mask.scale()),
        Mode::Infer => x.clone(),
    })
}

pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    tensor::add_bias(&tensor::matmul(x, w)?, b)
}

pub fn activation_relu(x: &Tensor) -> Tensor {
    tensor::relu(x)
}

/// Per-channel statistics kept by a batch-norm node for its backward pass.
#[derive(Clone, Debug, Default)]
pub struct NormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    x_hat: Vec<f64>,
}

/// (batch, channels, positions per channel) for `[N, C]` or `[N, C, H, W]`.
fn norm_layout(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() != 2 && x.rank() != 4 {
        return Err(Error::dim(format!("batchnorm expects [N,F] or [N,C,H,W], got {:?}", x.shape())));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!("batchnorm scale/shift must have {c} entries")));
    }
    Ok((n, c, x.shape()[2..].iter().product()))
}

fn normalize(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: Vec<f64>,
    var: Vec<f64>,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    let (n, c, s) = norm_layout(x, gamma, beta)?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = vec![0.0; x.numel()];
    let mut y = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }
    let cache = NormCache { mean, var, inv_std, x_hat };
    Ok((Tensor::from_parts(x.shape().to_vec(), y), cache))
}

/// Population mean and variance (denominator `N·H·W`) per channel.
pub fn batch_statistics(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rank() < 2 {
        return Err(Error::dim("batch statistics need a channel axis"));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    for b in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (b * c + ch) * s;
            *m += x.data()[base..base + s].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            var[ch] += x.data()[base..base + s].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

pub(crate) fn batchnorm_train_kernel(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    if x.shape()[0] < 2 {
        return Err(Error::contract("batchnorm in train mode needs at least 2 rows"));
    }
    norm_layout(x, gamma, beta)?;
    let (mean, var) = batch_statistics(x)?;
    normalize(x, gamma, beta, mean, var, eps)
}

pub(crate) fn batchnorm_frozen_kernel(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    normalize(x, gamma, beta, mean.to_vec(), var.to_vec(), eps)
}

/// Gradients w.r.t. input, scale and shift. With `frozen` the statistics are
/// constants; otherwise they depend on the batch.
pub(crate) fn batchnorm_backward_kernel(
    x: &Tensor,
    gamma: &Tensor,
    cache: &NormCache,
    g: &Tensor,
    frozen: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let count = (n * s) as f64;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            for i in base..base + s {
                g_gamma[ch] += g.data()[i] * cache.x_hat[i];
                g_beta[ch] += g.data()[i];
            }
        }
    }
    let mut gx = vec![0.0; x.numel()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * s;
            let k = gamma.data()[ch] * cache.inv_std[ch];
            for i in base..base + s {
                gx[i] = if frozen {
                    k * g.data()[i]
                } else {
                    // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂))
                    k * (g.data()[i] - g_beta[ch] / count - cache.x_hat[i] * g_gamma[ch] / count)
                };
            }
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(vec![c], g_gamma),
        Tensor::from_parts(vec![c], g_beta),
    ))
}

/// Mean over the batch of `-log softmax(logits)[label]`, plus the softmax
/// probabilities.
pub(crate) fn softmax_xent_kernel(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::dim(format!("{} labels for {b} rows", labels.len())));
    }
    let mut probs = vec![0.0; b * k];
    let mut total = 0.0;
    for ((row, p), &label) in logits.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
        if label >= k {
            return Err(Error::contract(format!("label {label} outside [0, {k})")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (pi, &v) in p.iter_mut().zip(row) {
            *pi = (v - max).exp();
            z += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= z;
        }
        total += (max - row[label]) + z.ln();
    }
    Ok((total / b as f64, Tensor::from_parts(vec![b, k], probs)))
}

pub fn softmax_xent_loss(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    softmax_xent_kernel(logits, labels).map(|(l, _)| l)
}

/// Row-wise argmax, ties to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Number of rows whose argmax differs from the label.
pub fn count_errors(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(argmax_rows(logits)?.iter().zip(labels).filter(|(p, l)| p != l).count())
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Fully connected layer `y = x·w + b`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl DenseLayer {
    pub fn init(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(&[inputs, outputs], inputs, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        DenseLayer { w, b, inputs, outputs }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w, store.get(self.w));
        let b = g.param(self.b, store.get(self.b));
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Bias-free convolution; the following batch-norm supplies the shift.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub w: ParamId,
    pub geometry: Conv2dGeometry,
}

impl ConvLayer {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geometry: Conv2dGeometry,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let w = store.add(format!("{name}.w"), he_normal(&[out_channels, in_channels, kernel, kernel], fan_in, rng));
        ConvLayer { w, geometry }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.w, store.get(self.w));
        g.conv2d(x, w, self.geometry)
    }
}

/// Batch normalization over the channel axis with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormLayer {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]));
        BatchNormLayer {
            gamma,
            beta,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, x: NodeId, mode: Mode) -> Result<NodeId> {
        let gamma = g.param(self.gamma, store.get(self.gamma));
        let beta = g.param(self.beta, store.get(self.beta));
        match mode {
            Mode::Train => g.batchnorm(x, gamma, beta, self.eps),
            Mode::Infer => {
                g.batchnorm_frozen(x, gamma, beta, self.running_mean.clone(), self.running_var.clone(), self.eps)
            }
        }
    }

    /// Exponential moving average update from one batch's statistics.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Standalone batch-norm forward: batch statistics (and a running-stat
/// update) in train mode, running statistics in infer mode.
pub fn batchnorm_forward(x: &Tensor, layer: &mut BatchNormLayer, store: &ParamStore, mode: Mode) -> Result<Tensor> {
    let gamma = store.get(layer.gamma);
    let beta = store.get(layer.beta);
    match mode {
        Mode::Train => {
            let (y, cache) = batchnorm_train_kernel(x, gamma, beta, layer.eps)?;
            layer.update_running(&cache.mean, &cache.var);
            Ok(y)
        }
        Mode::Infer => {
            batchnorm_frozen_kernel(x, gamma, beta, &layer.running_mean, &layer.running_var, layer.eps).map(|(y, _)| y)
        }
    }
}
