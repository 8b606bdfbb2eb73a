//! Multi-sample dropout head.
//!
//! The head is the tail of a classifier starting at a dropout layer: for each
//! dense layer in `head_layout` it applies dropout, the dense map, and (between
//! layers) a relu. Training evaluates `M` copies of that tail on the same
//! features. Each copy gets its own dropout masks, but all copies read the
//! same parameter nodes. The objective is the plain average of the `M`
//! cross-entropy losses, so backward sums `1/M`-weighted contributions into
//! one set of weights. Inference runs a single copy with dropout disabled.
//!
//! [`equivalence_oracle`] compares this against ordinary dropout on a
//! minibatch in which every sample is repeated `M` times.

use rand::Rng;

use crate::autograd::{GradientMap, Graph, NodeId};
use crate::data::{duplicate_minibatch, Minibatch};
use crate::error::{Error, Result};
use crate::layers::{count_errors, mask_sample, DenseLayer, DropoutMask, ParamStore};
use crate::model::{MaskSet, Network};
use crate::rng::MaskKey;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MsdConfig {
    /// Number of dropout samples `M`.
    pub num_samples: usize,
    /// Dropout ratio applied before each head layer.
    pub dropout_ratios: Vec<f64>,
    /// Reverse the width axis of the features for the upper half of branches.
    pub flip_diversity: bool,
    /// Widths of the head's dense layers; the last one is the class count.
    pub head_layout: Vec<usize>,
}

impl MsdConfig {
    /// Uniform dropout ratio `p` before every head layer.
    pub fn new(num_samples: usize, p: f64, head_layout: Vec<usize>) -> Self {
        let dropout_ratios = vec![p; head_layout.len()];
        MsdConfig { num_samples, dropout_ratios, flip_diversity: false, head_layout }
    }

    pub fn with_flip(mut self, flip: bool) -> Self {
        self.flip_diversity = flip;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples < 1 {
            return Err(Error::config("number of dropout samples must be at least 1"));
        }
        if self.head_layout.is_empty() || self.head_layout.contains(&0) {
            return Err(Error::config("head layout needs at least one positive width"));
        }
        if self.dropout_ratios.len() != self.head_layout.len() {
            return Err(Error::config("one dropout ratio per head layer is required"));
        }
        if let Some(p) = self.dropout_ratios.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::config(format!("dropout ratio must lie in [0, 1), got {p}")));
        }
        Ok(())
    }
}

/// The head's parameters. Exactly one set exists regardless of `M`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub layers: Vec<DenseLayer>,
}

impl HeadParams {
    pub fn init(store: &mut ParamStore, in_features: usize, layout: &[usize], rng: &mut impl Rng) -> Self {
        let mut width = in_features;
        let layers = layout
            .iter()
            .enumerate()
            .map(|(i, &out)| {
                let layer = DenseLayer::init(store, &format!("head.{i}"), width, out, rng);
                width = out;
                layer
            })
            .collect();
        HeadParams { layers }
    }
}

/// Dropout masks for one branch, one per head layer.
pub type BranchMasks = Vec<DropoutMask>;

#[derive(Clone, Debug)]
pub struct Head {
    cfg: MsdConfig,
    shared: HeadParams,
    /// Per-sample shape of the features entering the head.
    feature_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub per_branch_logits: Vec<Tensor>,
    pub per_branch_loss: Vec<f64>,
    pub mean_loss: f64,
    pub mean_logits: Tensor,
    /// Scalar node holding `mean_loss`; the training objective.
    pub loss_node: NodeId,
    /// Graph nodes created by each branch.
    pub branch_node_counts: Vec<usize>,
}

impl HeadOutput {
    /// Misclassified rows under the ensemble prediction (argmax of mean logits).
    pub fn ensemble_errors(&self, labels: &[usize]) -> Result<usize> {
        count_errors(&self.mean_logits, labels)
    }

    pub fn branch_errors(&self, labels: &[usize]) -> Result<Vec<usize>> {
        self.per_branch_logits.iter().map(|l| count_errors(l, labels)).collect()
    }
}

/// Assembles a head over features of per-sample shape `feature_shape`.
pub fn head_build(cfg: MsdConfig, shared: HeadParams, feature_shape: &[usize]) -> Result<Head> {
    cfg.validate()?;
    if cfg.flip_diversity && feature_shape.len() != 3 {
        return Err(Error::config("flip diversity needs spatial [C,H,W] features before the head"));
    }
    if shared.layers.len() != cfg.head_layout.len() {
        return Err(Error::config("shared parameters do not match the head layout"));
    }
    let mut width: usize = feature_shape.iter().product();
    for (layer, &out) in shared.layers.iter().zip(&cfg.head_layout) {
        if layer.inputs != width || layer.outputs != out {
            return Err(Error::config(format!(
                "head layer {}x{} does not fit {width}->{out}",
                layer.inputs, layer.outputs
            )));
        }
        width = out;
    }
    Ok(Head { cfg, shared, feature_shape: feature_shape.to_vec() })
}

/// Width-reverses features for branches in the upper half (`2·branch ≥ M`).
pub fn branch_flip_transform(features: &Tensor, branch: usize, num_samples: usize) -> Result<Tensor> {
    if features.rank() != 4 {
        return Err(Error::config("flip diversity needs [B,C,H,W] features"));
    }
    if flips(branch, num_samples) {
        tensor::flip_width(features)
    } else {
        Ok(features.clone())
    }
}

fn flips(branch: usize, num_samples: usize) -> bool {
    2 * branch >= num_samples
}

impl Head {
    pub fn config(&self) -> &MsdConfig {
        &self.cfg
    }

    pub fn num_samples(&self) -> usize {
        self.cfg.num_samples
    }

    pub fn shared(&self) -> &HeadParams {
        &self.shared
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn classes(&self) -> usize {
        *self.cfg.head_layout.last().expect("validated layout")
    }

    /// Activation sizes seen by each head dropout layer for a batch of `rows`.
    pub fn mask_dims(&self, rows: usize) -> Vec<usize> {
        self.shared.layers.iter().map(|l| rows * l.inputs).collect()
    }

    /// Masks for `branches` branches, keyed `(seed, iteration, branch, layer_offset + i)`.
    pub fn sample_masks(
        &self,
        seed: u64,
        iteration: u64,
        rows: usize,
        branches: usize,
        layer_offset: usize,
    ) -> Result<Vec<BranchMasks>> {
        (0..branches)
            .map(|j| {
                self.mask_dims(rows)
                    .into_iter()
                    .zip(&self.cfg.dropout_ratios)
                    .enumerate()
                    .map(|(i, (dim, &p))| mask_sample(MaskKey::new(seed, iteration, j, layer_offset + i), dim, p))
                    .collect()
            })
            .collect()
    }

    fn register_params<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore) {
        for layer in &self.shared.layers {
            g.param(layer.w, store.get(layer.w));
            g.param(layer.b, store.get(layer.b));
        }
    }

    /// One branch from flat features to logits; `masks == None` disables dropout.
    pub(crate) fn branch<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        mut x: NodeId,
        masks: Option<&BranchMasks>,
    ) -> Result<NodeId> {
        let last = self.shared.layers.len() - 1;
        for (i, layer) in self.shared.layers.iter().enumerate() {
            if let Some(m) = masks {
                x = g.dropout(x, &m[i])?;
            }
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }

    fn check_features(&self, g: &Graph<'_>, features: NodeId) -> Result<usize> {
        let shape = g.value(features).shape();
        if shape[1..] != self.feature_shape[..] {
            return Err(Error::dim(format!(
                "head expects per-sample features {:?}, got {:?}",
                self.feature_shape,
                &shape[1..]
            )));
        }
        Ok(shape[0])
    }

    /// Training forward over all `M` branches. `masks[j]` drives branch `j`.
    pub fn forward_train<'p>(
        &self,
        g: &mut Graph<'p>,
        store: &'p ParamStore,
        features: NodeId,
        labels: &[usize],
        masks: &[BranchMasks],
    ) -> Result<HeadOutput> {
        let m = self.cfg.num_samples;
        if masks.len() != m {
            return Err(Error::contract(format!("{} mask sets supplied for {m} dropout samples", masks.len())));
        }
        let rows = self.check_features(g, features)?;
        let dims = self.mask_dims(rows);
        for set in masks {
            if set.len() != dims.len() || set.iter().zip(&dims).any(|(mask, &d)| mask.len() != d) {
                return Err(Error::dim("branch masks do not match head activation sizes"));
            }
        }
        self.register_params(g, store);
        let shared_flat = if self.cfg.flip_diversity { None } else { Some(g.flatten(features)?) };

        let mut losses = Vec::with_capacity(m);
        let mut logits = Vec::with_capacity(m);
        let mut counts = Vec::with_capacity(m);
        for (j, set) in masks.iter().enumerate() {
            let before = g.len();
            let flat = match shared_flat {
                Some(f) => f,
                None => {
                    let x = if flips(j, m) { g.flip_width(features)? } else { features };
                    g.flatten(x)?
                }
            };
            let out = self.branch(g, store, flat, Some(set))?;
            let loss = g.softmax_xent(out, labels)?;
            counts.push(g.len() - before);
            logits.push(out);
            losses.push(loss);
        }
        let loss_node = g.mean(&losses)?;

        let per_branch_logits: Vec<Tensor> = logits.iter().map(|&l| g.value(l).clone()).collect();
        let per_branch_loss: Vec<f64> = losses.iter().map(|&l| g.value(l).data()[0]).collect();
        let mut mean_logits = per_branch_logits[0].clone();
        for t in &per_branch_logits[1..] {
            mean_logits.add_assign(t)?;
        }
        let mean_logits = mean_logits.scale(1.0 / m as f64);
        Ok(HeadOutput {
            per_branch_logits,
            per_branch_loss,
            mean_loss: g.value(loss_node).data()[0],
            mean_logits,
            loss_node,
            branch_node_counts: counts,
        })
    }

    /// Inference: one branch, no dropout, no flip.
    pub fn forward_infer<'p>(&self, g: &mut Graph<'p>, store: &'p ParamStore, features: NodeId) -> Result<NodeId> {
        self.check_features(g, features)?;
        self.register_params(g, store);
        let flat = g.flatten(features)?;
        self.branch(g, store, flat, None)
    }

    /// Logits for a batch of features outside of any training graph.
    pub fn infer_logits(&self, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(features.clone());
        let out = self.forward_infer(&mut g, store, x)?;
        Ok(g.value(out).clone())
    }
}

/// Result of running the multi-sample head and the duplicated-minibatch
/// baseline on the same batch with paired masks.
#[derive(Clone, Debug)]
pub struct EquivalenceReport {
    pub loss_msd: f64,
    pub loss_dup: f64,
    pub grads_msd: GradientMap,
    pub grads_dup: GradientMap,
}

impl EquivalenceReport {
    pub fn loss_gap(&self) -> f64 {
        (self.loss_msd - self.loss_dup).abs()
    }

    pub fn grad_gap(&self) -> f64 {
        self.grads_msd.max_abs_diff(&self.grads_dup)
    }
}

/// Loss and gradients of `M`-sample dropout versus ordinary dropout on the
/// `M`-fold duplicated batch. Duplicate `j` of sample `i` receives branch
/// `j`'s head mask row `i`; trunk masks are repeated with their rows.
pub fn equivalence_oracle(
    net: &Network,
    batch: &Minibatch,
    num_samples: usize,
    masks: &MaskSet,
) -> Result<EquivalenceReport> {
    if net.head().num_samples() != num_samples {
        return Err(Error::contract(format!(
            "network head has {} samples, oracle asked for {num_samples}",
            net.head().num_samples()
        )));
    }
    if masks.branches.len() != num_samples {
        return Err(Error::contract(format!(
            "mask pairing incomplete: {} branch mask sets for {num_samples} samples",
            masks.branches.len()
        )));
    }

    let (loss_msd, grads_msd) = {
        let mut g = Graph::new();
        let step = net.msd_forward(&mut g, &batch.images, &batch.labels, masks)?;
        (step.head.mean_loss, g.backward(step.head.loss_node)?)
    };

    let dup = duplicate_minibatch(batch, num_samples)?;
    let (trunk, head) = masks.duplicated(batch.len())?;
    let (loss_dup, grads_dup) = {
        let mut g = Graph::new();
        let step = net.plain_forward(&mut g, &dup.images, &dup.labels, Some(&trunk), Some(&head))?;
        (g.value(step.loss).data()[0], g.backward(step.loss)?)
    };
    Ok(EquivalenceReport { loss_msd, loss_dup, grads_msd, grads_dup })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::rng::{keyed_rng, Purpose};

    fn setup(m: usize, layout: Vec<usize>, d: usize) -> (ParamStore, Head) {
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(3, Purpose::Init, &[]);
        let shared = HeadParams::init(&mut store, d, &layout, &mut rng);
        let head = head_build(MsdConfig::new(m, 0.4, layout), shared, &[d]).unwrap();
        (store, head)
    }

    fn features(rows: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = keyed_rng(seed, Purpose::Draw, &[]);
        Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_samples_is_a_config_error() {
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(0, Purpose::Init, &[]);
        let shared = HeadParams::init(&mut store, 4, &[3], &mut rng);
        let err = head_build(MsdConfig::new(0, 0.3, vec![3]), shared, &[4]);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn flip_on_flat_features_is_a_config_error() {
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(0, Purpose::Init, &[]);
        let shared = HeadParams::init(&mut store, 4, &[3], &mut rng);
        let err = head_build(MsdConfig::new(2, 0.3, vec![3]).with_flip(true), shared, &[4]);
        assert!(matches!(err, Err(Error::Config(_))));
        let flat = Tensor::zeros(&[2, 4]);
        assert!(matches!(branch_flip_transform(&flat, 1, 2), Err(Error::Config(_))));
    }

    #[test]
    fn parameter_count_is_independent_of_m() {
        let (s1, _) = setup(1, vec![6, 3], 5);
        let (s8, _) = setup(8, vec![6, 3], 5);
        assert_eq!(s1.scalar_count(), s8.scalar_count());
        assert_eq!(s1.len(), s8.len());
    }

    #[test]
    fn branch_nodes_double_from_one_to_two_samples() {
        let x = features(3, 5, 1);
        let labels = [0, 2, 1];
        let count = |m: usize| {
            let (store, head) = setup(m, vec![6, 3], 5);
            let masks = head.sample_masks(1, 0, 3, m, 0).unwrap();
            let mut g = Graph::new();
            let f = g.input(x.clone());
            let out = head.forward_train(&mut g, &store, f, &labels, &masks).unwrap();
            (out.branch_node_counts.iter().sum::<usize>(), g.parameters().count())
        };
        let (n1, p1) = count(1);
        let (n2, p2) = count(2);
        assert_eq!(n2, 2 * n1);
        assert_eq!(p1, p2);
    }

    #[test]
    fn identical_masks_give_branch_loss() {
        let (store, head) = setup(4, vec![6, 3], 5);
        let x = features(4, 5, 2);
        let labels = [0, 1, 2, 1];
        let one = head.sample_masks(9, 0, 4, 1, 0).unwrap().remove(0);
        let masks = vec![one; 4];
        let mut g = Graph::new();
        let f = g.input(x);
        let out = head.forward_train(&mut g, &store, f, &labels, &masks).unwrap();
        for l in &out.per_branch_loss {
            assert_eq!(*l, out.per_branch_loss[0]);
        }
        assert!((out.mean_loss - out.per_branch_loss[0]).abs() < 1e-15);
    }

    #[test]
    fn mean_loss_matches_isolated_branches() {
        let (store, head) = setup(4, vec![7, 3], 5);
        let x = features(6, 5, 3);
        let labels = [0, 1, 2, 1, 0, 2];
        let masks = head.sample_masks(5, 2, 6, 4, 0).unwrap();
        let mut g = Graph::new();
        let f = g.input(x.clone());
        let out = head.forward_train(&mut g, &store, f, &labels, &masks).unwrap();

        // oracle: each branch evaluated alone with the pure layer functions
        let mut isolated = Vec::new();
        for set in &masks {
            let mut h = x.clone();
            for (i, layer) in head.shared().layers.iter().enumerate() {
                h = crate::layers::dropout_apply(&h, &set[i], crate::layers::Mode::Train).unwrap();
                h = crate::layers::dense_forward(&h, store.get(layer.w), store.get(layer.b)).unwrap();
                if i + 1 < head.shared().layers.len() {
                    h = crate::layers::activation_relu(&h);
                }
            }
            isolated.push(crate::layers::softmax_xent_loss(&h, &labels).unwrap());
        }
        let oracle = isolated.iter().sum::<f64>() / 4.0;
        assert!((out.mean_loss - oracle).abs() < 1e-12);
        let arith = out.per_branch_loss.iter().sum::<f64>() / 4.0;
        assert!((out.mean_loss - arith).abs() < 1e-12);
    }

    #[test]
    fn all_keep_zero_ratio_matches_plain_forward() {
        let mut store = ParamStore::new();
        let mut rng = keyed_rng(4, Purpose::Init, &[]);
        let shared = HeadParams::init(&mut store, 5, &[6, 3], &mut rng);
        let head = head_build(MsdConfig::new(2, 0.0, vec![6, 3]), shared, &[5]).unwrap();
        let x = features(3, 5, 4);
        let labels = [2, 0, 1];
        let masks = head.sample_masks(1, 0, 3, 2, 0).unwrap();
        let mut g = Graph::new();
        let f = g.input(x.clone());
        let out = head.forward_train(&mut g, &store, f, &labels, &masks).unwrap();
        let logits = head.infer_logits(&store, &x).unwrap();
        let plain = crate::layers::softmax_xent_loss(&logits, &labels).unwrap();
        assert!((out.mean_loss - plain).abs() < 1e-15);
    }

    #[test]
    fn mask_count_mismatch_is_rejected() {
        let (store, head) = setup(3, vec![3], 5);
        let masks = head.sample_masks(1, 0, 2, 2, 0).unwrap();
        let mut g = Graph::new();
        let f = g.input(features(2, 5, 5));
        assert!(matches!(head.forward_train(&mut g, &store, f, &[0, 1], &masks), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_is_branch_zero_with_all_keep() {
        let (store, head) = setup(3, vec![6, 3], 5);
        let x = features(4, 5, 6);
        let infer = head.infer_logits(&store, &x).unwrap();
        // an all-keep mask is the identity only at ratio 0; at p > 0 it still scales by 1/(1-p)
        let identity: BranchMasks =
            head.mask_dims(4).into_iter().map(|d| DropoutMask::all_keep(d, 0.0).unwrap()).collect();
        let mut g = Graph::new();
        let f = g.input(x.clone());
        let flat = g.flatten(f).unwrap();
        let out = head.branch(&mut g, &store, flat, Some(&identity)).unwrap();
        assert_eq!(g.value(out), &infer);
        // every branch agrees in infer mode, and M plays no role
        let (store1, head1) = setup(1, vec![6, 3], 5);
        assert_eq!(store1, store);
        assert_eq!(head1.infer_logits(&store1, &x).unwrap(), infer);
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        for m in [1, 2, 4, 8] {
            let (mut store, head) = setup(m, vec![4, 3], 3);
            // zero biases put fully dropped rows exactly on the relu kink
            let mut rng = keyed_rng(m as u64, Purpose::Draw, &[1]);
            for layer in &head.shared().layers {
                store.get_mut(layer.b).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            }
            let x = features(4, 3, 7 + m as u64);
            let labels = [0, 2, 1, 1];
            let masks = head.sample_masks(11, 0, 4, m, 0).unwrap();
            let mut g = Graph::new();
            let f = g.input(x);
            let out = head.forward_train(&mut g, &store, f, &labels, &masks).unwrap();
            let err = grad_check(&g, out.loss_node, 1e-5).unwrap();
            assert!(err < 1e-6, "M={m}: {err}");
        }
    }

    #[test]
    fn shared_gradient_is_mean_of_branch_gradients() {
        let m = 4;
        let (store, head) = setup(m, vec![5, 3], 4);
        let x = features(5, 4, 8);
        let labels = [0, 1, 2, 0, 1];
        let masks = head.sample_masks(2, 1, 5, m, 0).unwrap();
        let mut g = Graph::new();
        let f = g.input(x.clone());
        let out = head.forward_train(&mut g, &store, f, &labels, &masks).unwrap();
        let joint = g.backward(out.loss_node).unwrap();

        let single = MsdConfig::new(1, 0.4, vec![5, 3]);
        let one = head_build(single, head.shared().clone(), &[4]).unwrap();
        let mut sum = GradientMap::default();
        for set in &masks {
            let mut g = Graph::new();
            let f = g.input(x.clone());
            let o = one.forward_train(&mut g, &store, f, &labels, std::slice::from_ref(set)).unwrap();
            sum = sum.add(&g.backward(o.loss_node).unwrap()).unwrap();
        }
        assert!(joint.max_abs_diff(&sum.scale(1.0 / m as f64)) < 1e-12);
    }

    #[test]
    fn flip_assignment_follows_half_split() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(branch_flip_transform(&x, 0, 2).unwrap(), x);
        assert_eq!(branch_flip_transform(&x, 1, 2).unwrap().data(), &[2., 1., 4., 3.]);
        assert_eq!(branch_flip_transform(&x, 0, 1).unwrap(), x);
        assert!(flips(2, 4) && flips(3, 4) && !flips(1, 4));
    }
}
