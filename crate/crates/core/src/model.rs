//! Networks: a feature-extracting trunk followed by a multi-sample head.
//!
//! The trunk may contain its own (single-sample) dropout layers; the head
//! starts at the multi-sampled dropout layer. Dropout masks are drawn up front
//! into a [`MaskSet`] and handed to the forward pass, so every run is a pure
//! function of parameters, data and masks.

use rand::Rng;

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::{mask_sample, BatchNormLayer, ConvLayer, DenseLayer, DropoutMask, Mode, ParamStore};
use crate::msd::{head_build, BranchMasks, Head, HeadOutput, HeadParams, MsdConfig};
use crate::rng::{keyed_rng, MaskKey, Purpose};
use crate::tensor::{Conv2dGeometry, Tensor};

#[derive(Clone, Debug)]
pub enum TrunkLayer {
    Conv(ConvLayer),
    BatchNorm(BatchNormLayer),
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense(DenseLayer),
    Dropout { ratio: f64 },
}

/// Every dropout mask one training iteration needs.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    /// One mask per trunk dropout layer, shared by all branches.
    pub trunk: Vec<DropoutMask>,
    /// `branches[j][i]`: branch `j`, head layer `i`.
    pub branches: Vec<BranchMasks>,
}

impl MaskSet {
    /// Masks for the `M`-fold duplicated batch of `rows` samples: trunk rows
    /// repeated, head rows interleaved so duplicate `j` of sample `i` sees
    /// row `i` of branch `j`.
    pub fn duplicated(&self, rows: usize) -> Result<(Vec<DropoutMask>, BranchMasks)> {
        let m = self.branches.len();
        if m == 0 {
            return Err(Error::contract("mask pairing incomplete: no branch masks"));
        }
        let trunk = self.trunk.iter().map(|t| t.repeat_rows(rows, m)).collect::<Result<_>>()?;
        let layers = self.branches[0].len();
        if self.branches.iter().any(|b| b.len() != layers) {
            return Err(Error::contract("mask pairing incomplete: branches disagree in layer count"));
        }
        let head = (0..layers)
            .map(|i| {
                let per: Vec<&DropoutMask> = self.branches.iter().map(|b| &b[i]).collect();
                DropoutMask::interleave_rows(&per, rows)
            })
            .collect::<Result<_>>()?;
        Ok((trunk, head))
    }
}

/// Batch statistics from one train-mode batch-norm node, keyed by trunk position.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MsdStep {
    pub head: HeadOutput,
    pub bn_stats: Vec<BnStats>,
}

#[derive(Clone, Debug)]
pub struct PlainStep {
    pub loss: NodeId,
    pub logits: NodeId,
    pub bn_stats: Vec<BnStats>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub store: ParamStore,
    trunk: Vec<TrunkLayer>,
    head: Head,
    /// Per-sample `[C, H, W]`.
    input_shape: Vec<usize>,
}

/// Layer-by-layer network construction with per-sample shape tracking.
pub struct NetworkBuilder<R: Rng> {
    store: ParamStore,
    trunk: Vec<TrunkLayer>,
    input_shape: Vec<usize>,
    shape: Vec<usize>,
    rng: R,
}

impl NetworkBuilder<rand_chacha::ChaCha8Rng> {
    /// Parameters are initialized from the `(seed, Init)` stream in layer order.
    pub fn new(input_shape: &[usize], seed: u64) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.contains(&0) {
            return Err(Error::config(format!("input shape must be [C,H,W], got {input_shape:?}")));
        }
        Ok(NetworkBuilder {
            store: ParamStore::new(),
            trunk: Vec::new(),
            input_shape: input_shape.to_vec(),
            shape: input_shape.to_vec(),
            rng: keyed_rng(seed, Purpose::Init, &[]),
        })
    }
}

impl<R: Rng> NetworkBuilder<R> {
    fn name(&self) -> String {
        format!("trunk.{}", self.trunk.len())
    }

    fn spatial(&self, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::config(format!("{what} needs spatial input, have {:?}", self.shape))),
        }
    }

    pub fn conv(mut self, out: usize, kernel: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = self.spatial("conv")?;
        if kernel == 0 || kernel > h + 2 * pad || kernel > w + 2 * pad {
            return Err(Error::config(format!("{kernel}x{kernel} kernel does not fit {h}x{w}")));
        }
        let geo = Conv2dGeometry { pad, stride: 1 };
        let name = self.name();
        let layer = ConvLayer::init(&mut self.store, &name, c, out, kernel, geo, &mut self.rng);
        self.trunk.push(TrunkLayer::Conv(layer));
        self.shape = vec![out, h + 2 * pad - kernel + 1, w + 2 * pad - kernel + 1];
        Ok(self)
    }

    pub fn batchnorm(mut self) -> Self {
        let name = self.name();
        let layer = BatchNormLayer::init(&mut self.store, &name, self.shape[0]);
        self.trunk.push(TrunkLayer::BatchNorm(layer));
        self
    }

    pub fn relu(mut self) -> Self {
        self.trunk.push(TrunkLayer::Relu);
        self
    }

    pub fn maxpool(mut self, window: usize) -> Result<Self> {
        let (c, h, w) = self.spatial("maxpool")?;
        if window == 0 || window > h || window > w {
            return Err(Error::config(format!("pool window {window} does not fit {h}x{w}")));
        }
        self.trunk.push(TrunkLayer::MaxPool { window, stride: window });
        self.shape = vec![c, (h - window) / window + 1, (w - window) / window + 1];
        Ok(self)
    }

    pub fn flatten(mut self) -> Self {
        if self.shape.len() != 1 {
            self.trunk.push(TrunkLayer::Flatten);
            self.shape = vec![self.shape.iter().product()];
        }
        self
    }

    pub fn dense(self, out: usize) -> Self {
        let mut b = self.flatten();
        let name = b.name();
        let layer = DenseLayer::init(&mut b.store, &name, b.shape[0], out, &mut b.rng);
        b.trunk.push(TrunkLayer::Dense(layer));
        b.shape = vec![out];
        b
    }

    pub fn dropout(mut self, ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::config(format!("dropout ratio must lie in [0, 1), got {ratio}")));
        }
        self.trunk.push(TrunkLayer::Dropout { ratio });
        Ok(self)
    }

    /// Closes the trunk with a multi-sample head.
    pub fn head(mut self, cfg: MsdConfig) -> Result<Network> {
        cfg.validate()?;
        let features: usize = self.shape.iter().product();
        let shared = HeadParams::init(&mut self.store, features, &cfg.head_layout, &mut self.rng);
        let head = head_build(cfg, shared, &self.shape)?;
        Ok(Network { store: self.store, trunk: self.trunk, head, input_shape: self.input_shape })
    }
}

impl Network {
    /// Four hidden dense layers of `width` units with dropout after each; the
    /// last hidden layer and the classifier form the multi-sample head.
    pub fn mlp(input_shape: &[usize], classes: usize, width: usize, samples: usize, p: f64, seed: u64) -> Result<Self> {
        NetworkBuilder::new(input_shape, seed)?
            .dense(width)
            .relu()
            .dropout(p)?
            .dense(width)
            .relu()
            .dropout(p)?
            .dense(width)
            .relu()
            .head(MsdConfig::new(samples, p, vec![width, classes]))
    }

    /// Six 3×3 conv layers (32/32/64/64/128/128) with batch-norm and relu, a
    /// 2×2 max-pool after every second conv, then a two-layer head with
    /// dropout before each dense layer.
    pub fn cnn8(input_shape: &[usize], classes: usize, samples: usize, p: f64, flip: bool, seed: u64) -> Result<Self> {
        Self::cnn8_with_widths(input_shape, classes, CNN8_WIDTHS, CNN8_HIDDEN, samples, p, flip, seed)
    }

    /// The cnn8 layout with custom conv widths and head hidden width.
    #[allow(clippy::too_many_arguments)]
    pub fn cnn8_with_widths(
        input_shape: &[usize],
        classes: usize,
        widths: [usize; 6],
        hidden: usize,
        samples: usize,
        p: f64,
        flip: bool,
        seed: u64,
    ) -> Result<Self> {
        let mut b = NetworkBuilder::new(input_shape, seed)?;
        for (i, &c) in widths.iter().enumerate() {
            b = b.conv(c, 3, 1)?.batchnorm().relu();
            if i % 2 == 1 {
                b = b.maxpool(2)?;
            }
        }
        b.head(MsdConfig::new(samples, p, vec![hidden, classes]).with_flip(flip))
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn trunk(&self) -> &[TrunkLayer] {
        &self.trunk
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Rebuilds the head for a different number of dropout samples, keeping
    /// every parameter.
    pub fn with_samples(&self, samples: usize) -> Result<Network> {
        let cfg = MsdConfig { num_samples: samples, ..self.head.config().clone() };
        let head = head_build(cfg, self.head.shared().clone(), self.head.feature_shape())?;
        Ok(Network { head, ..self.clone() })
    }

    pub fn trunk_dropout_count(&self) -> usize {
        self.trunk.iter().filter(|l| matches!(l, TrunkLayer::Dropout { .. })).count()
    }

    /// Activation size per sample at each trunk dropout layer, with its ratio.
    fn trunk_dropout_sites(&self) -> Vec<(usize, f64)> {
        let mut shape = self.input_shape.clone();
        let mut sites = Vec::new();
        for layer in &self.trunk {
            match layer {
                TrunkLayer::Conv(c) => {
                    let w = self.store.get(c.w).shape();
                    let pad = c.geometry.pad;
                    shape = vec![w[0], shape[1] + 2 * pad - w[2] + 1, shape[2] + 2 * pad - w[3] + 1];
                }
                TrunkLayer::MaxPool { window, stride } => {
                    shape = vec![shape[0], (shape[1] - window) / stride + 1, (shape[2] - window) / stride + 1];
                }
                TrunkLayer::Flatten => shape = vec![shape.iter().product()],
                TrunkLayer::Dense(d) => shape = vec![d.outputs],
                TrunkLayer::Dropout { ratio } => sites.push((shape.iter().product(), *ratio)),
                TrunkLayer::BatchNorm(_) | TrunkLayer::Relu => {}
            }
        }
        sites
    }

    /// Trunk masks keyed `(seed, iteration, 0, k)`; head masks for branch `j`
    /// keyed `(seed, iteration, j, trunk_dropouts + i)`.
    pub fn sample_masks(&self, seed: u64, iteration: u64, rows: usize, branches: usize) -> Result<MaskSet> {
        let trunk = self
            .trunk_dropout_sites()
            .into_iter()
            .enumerate()
            .map(|(k, (dim, p))| mask_sample(MaskKey::new(seed, iteration, 0, k), rows * dim, p))
            .collect::<Result<_>>()?;
        let branches = self.head.sample_masks(seed, iteration, rows, branches, self.trunk_dropout_count())?;
        Ok(MaskSet { trunk, branches })
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        if images.rank() != 4 || images.shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "network expects [N,{},{},{}] images, got {:?}",
                self.input_shape[0],
                self.input_shape[1],
                self.input_shape[2],
                images.shape()
            )));
        }
        Ok(())
    }

    /// Runs the trunk. In train mode `masks == None` disables trunk dropout;
    /// in infer mode dropout is always the identity.
    pub fn forward_trunk<'p>(
        &'p self,
        g: &mut Graph<'p>,
        images: &Tensor,
        mode: Mode,
        masks: Option<&[DropoutMask]>,
    ) -> Result<(NodeId, Vec<BnStats>)> {
        self.check_images(images)?;
        if let Some(m) = masks {
            if m.len() != self.trunk_dropout_count() {
                return Err(Error::contract(format!(
                    "{} trunk masks for {} trunk dropout layers",
                    m.len(),
                    self.trunk_dropout_count()
                )));
            }
        }
        let store = &self.store;
        let mut x = g.input(images.clone());
        let mut stats = Vec::new();
        let mut k = 0;
        for (idx, layer) in self.trunk.iter().enumerate() {
            x = match layer {
                TrunkLayer::Conv(c) => c.forward(g, store, x)?,
                TrunkLayer::BatchNorm(bn) => {
                    let y = bn.forward(g, store, x, mode)?;
                    if let Some((mean, var)) = g.batch_stats(y) {
                        stats.push(BnStats { layer: idx, mean: mean.to_vec(), var: var.to_vec() });
                    }
                    y
                }
                TrunkLayer::Relu => g.relu(x)?,
                TrunkLayer::MaxPool { window, stride } => g.maxpool2d(x, *window, *stride)?,
                TrunkLayer::Flatten => g.flatten(x)?,
                TrunkLayer::Dense(d) => d.forward(g, store, x)?,
                TrunkLayer::Dropout { .. } => {
                    let y = match (mode, masks) {
                        (Mode::Train, Some(m)) => g.dropout(x, &m[k])?,
                        _ => x,
                    };
                    k += 1;
                    y
                }
            };
        }
        Ok((x, stats))
    }

    /// Multi-sample training forward: shared trunk, `M` head branches.
    pub fn msd_forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        images: &Tensor,
        labels: &[usize],
        masks: &MaskSet,
    ) -> Result<MsdStep> {
        let (features, bn_stats) = self.forward_trunk(g, images, Mode::Train, Some(&masks.trunk))?;
        let head = self.head.forward_train(g, &self.store, features, labels, &masks.branches)?;
        Ok(MsdStep { head, bn_stats })
    }

    /// Ordinary single-sample training forward. `None` masks disable dropout
    /// in that part of the network.
    pub fn plain_forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        images: &Tensor,
        labels: &[usize],
        trunk_masks: Option<&[DropoutMask]>,
        head_masks: Option<&BranchMasks>,
    ) -> Result<PlainStep> {
        let (features, bn_stats) = self.forward_trunk(g, images, Mode::Train, trunk_masks)?;
        if let Some(h) = head_masks {
            let rows = g.value(features).shape()[0];
            let dims = self.head.mask_dims(rows);
            if h.len() != dims.len() || h.iter().zip(&dims).any(|(m, &d)| m.len() != d) {
                return Err(Error::dim("head masks do not match head activation sizes"));
            }
        }
        let flat = g.flatten(features)?;
        let logits = self.head.branch(g, &self.store, flat, head_masks)?;
        let loss = g.softmax_xent(logits, labels)?;
        Ok(PlainStep { loss, logits, bn_stats })
    }

    /// Inference logits: running batch-norm statistics, no dropout, one branch.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (features, _) = self.forward_trunk(&mut g, images, Mode::Infer, None)?;
        let out = self.head.forward_infer(&mut g, &self.store, features)?;
        Ok(g.value(out).clone())
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BnStats]) -> Result<()> {
        for s in stats {
            match self.trunk.get_mut(s.layer) {
                Some(TrunkLayer::BatchNorm(bn)) => bn.update_running(&s.mean, &s.var),
                _ => return Err(Error::contract(format!("layer {} is not batch-norm", s.layer))),
            }
        }
        Ok(())
    }

    /// Running statistics of every batch-norm layer, in trunk order.
    pub fn running_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.trunk
            .iter()
            .filter_map(|l| match l {
                TrunkLayer::BatchNorm(bn) => Some((&bn.running_mean[..], &bn.running_var[..])),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn running_stats_mut(&mut self) -> Vec<(&mut Vec<f64>, &mut Vec<f64>)> {
        self.trunk
            .iter_mut()
            .filter_map(|l| match l {
                TrunkLayer::BatchNorm(bn) => Some((&mut bn.running_mean, &mut bn.running_var)),
                _ => None,
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.store.is_finite()
            && self.running_stats().iter().all(|(m, v)| m.iter().chain(v.iter()).all(|x| x.is_finite()))
    }
}

pub const CNN8_WIDTHS: [usize; 6] = [32, 32, 64, 64, 128, 128];
/// Hidden width of the cnn8 head.
pub const CNN8_HIDDEN: usize = 128;

/// A small random network for equivalence checks: dense trunk with optional
/// batch-norm and trunk dropout, then a one- or two-layer head.
pub fn random_mlp(
    rng: &mut impl Rng,
    input_dim: usize,
    classes: usize,
    samples: usize,
    batchnorm: bool,
    seed: u64,
) -> Result<Network> {
    let mut b = NetworkBuilder::new(&[input_dim, 1, 1], seed)?;
    for _ in 0..rng.random_range(1..=2) {
        b = b.dense(rng.random_range(3..=8));
        if batchnorm {
            b = b.batchnorm();
        }
        b = b.relu();
        if rng.random_bool(0.5) {
            b = b.dropout(rng.random_range(0.1..0.6))?;
        }
    }
    let mut layout = Vec::new();
    if rng.random_bool(0.5) {
        layout.push(rng.random_range(3..=8));
    }
    layout.push(classes);
    let mut cfg = MsdConfig::new(samples, 0.0, layout);
    for p in &mut cfg.dropout_ratios {
        *p = rng.random_range(0.1..0.6);
    }
    b.head(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Minibatch};
    use crate::msd::equivalence_oracle;

    fn batch(n: usize, shape: &[usize], classes: usize, seed: u64) -> Minibatch {
        let mut rng = keyed_rng(seed, Purpose::Draw, &[]);
        let numel = n * shape.iter().product::<usize>();
        let mut full = vec![n];
        full.extend(shape);
        let images = Tensor::new(full, (0..numel).map(|_| rng.random::<f64>()).collect()).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let ds = Dataset::new(images, labels, classes).unwrap();
        ds.gather(&(0..n).collect::<Vec<_>>())
    }

    #[test]
    fn presets_have_expected_shapes() {
        let mlp = Network::mlp(&[12, 1, 1], 4, 16, 3, 0.3, 1).unwrap();
        assert_eq!(mlp.trunk_dropout_count(), 2);
        assert_eq!(mlp.head().feature_shape(), &[16]);
        assert_eq!(mlp.classes(), 4);
        let cnn = Network::cnn8(&[3, 8, 8], 10, 2, 0.3, true, 1).unwrap();
        assert_eq!(cnn.head().feature_shape(), &[128, 1, 1]);
        assert_eq!(cnn.trunk_dropout_count(), 0);
        let b = batch(3, &[3, 8, 8], 10, 1);
        assert_eq!(cnn.logits(&b.images).unwrap().shape(), &[3, 10]);
    }

    #[test]
    fn parameters_do_not_depend_on_samples() {
        let a = Network::mlp(&[6, 1, 1], 3, 8, 1, 0.3, 5).unwrap();
        let b = Network::mlp(&[6, 1, 1], 3, 8, 8, 0.3, 5).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.with_samples(8).unwrap().head().num_samples(), 8);
    }

    #[test]
    fn single_sample_equals_plain_dropout_bitwise() {
        let net = Network::mlp(&[6, 1, 1], 3, 8, 1, 0.4, 2).unwrap();
        let b = batch(5, &[6, 1, 1], 3, 2);
        let masks = net.sample_masks(7, 3, 5, 1).unwrap();
        let mut g = Graph::new();
        let step = net.msd_forward(&mut g, &b.images, &b.labels, &masks).unwrap();
        let ga = g.backward(step.head.loss_node).unwrap();
        let mut h = Graph::new();
        let plain =
            net.plain_forward(&mut h, &b.images, &b.labels, Some(&masks.trunk), Some(&masks.branches[0])).unwrap();
        let gb = h.backward(plain.loss).unwrap();
        assert_eq!(step.head.mean_loss.to_bits(), h.value(plain.loss).data()[0].to_bits());
        assert_eq!(ga.max_abs_diff(&gb), 0.0);
    }

    #[test]
    fn duplication_equivalence_with_batchnorm() {
        let mut rng = keyed_rng(1, Purpose::Draw, &[9]);
        for (i, bn) in [(0, false), (1, true), (2, true)] {
            let net = random_mlp(&mut rng, 5, 3, 4, bn, i).unwrap();
            let b = batch(3, &[5, 1, 1], 3, i);
            let masks = net.sample_masks(i, 0, 3, 4).unwrap();
            let r = equivalence_oracle(&net, &b, 4, &masks).unwrap();
            assert!(r.loss_gap() < 1e-10, "{}", r.loss_gap());
            assert!(r.grad_gap() < 1e-9, "{}", r.grad_gap());
        }
    }

    #[test]
    fn incomplete_pairing_is_rejected() {
        let net = Network::mlp(&[4, 1, 1], 2, 5, 3, 0.3, 1).unwrap();
        let b = batch(2, &[4, 1, 1], 2, 1);
        let masks = net.sample_masks(1, 0, 2, 2).unwrap();
        assert!(matches!(equivalence_oracle(&net, &b, 3, &masks), Err(Error::Contract(_))));
    }

    #[test]
    fn running_stats_update_from_batches() {
        let mut net = Network::cnn8(&[3, 8, 8], 2, 1, 0.3, false, 1).unwrap();
        let b = batch(4, &[3, 8, 8], 2, 3);
        let masks = net.sample_masks(1, 0, 4, 1).unwrap();
        let stats = {
            let mut g = Graph::new();
            net.msd_forward(&mut g, &b.images, &b.labels, &masks).unwrap().bn_stats
        };
        assert_eq!(stats.len(), 6);
        net.update_running_stats(&stats).unwrap();
        let (mean, _) = net.running_stats()[0];
        for (r, s) in mean.iter().zip(&stats[0].mean) {
            assert!((r - 0.1 * s).abs() < 1e-15);
        }
        assert!(net.is_finite());
    }

    #[test]
    fn wrong_image_shape_is_a_dimension_error() {
        let net = Network::mlp(&[4, 1, 1], 2, 5, 1, 0.3, 1).unwrap();
        let bad = Tensor::zeros(&[2, 5, 1, 1]);
        assert!(matches!(net.logits(&bad), Err(Error::Dimension(_))));
    }
}
