//! Self-checks shared by the `gradcheck` and `equiv` commands and the test
//! suites: finite-difference checks for every layer type and preset, and
//! randomized duplication-equivalence draws.
//!
//! Biases are drawn away from zero throughout. With zero biases a fully
//! dropped row feeds an exact 0 into relu, where the one-sided derivatives
//! differ and central differences are meaningless.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, Graph, NodeId};
use crate::data::{Dataset, Minibatch};
use crate::error::Result;
use crate::layers::{mask_sample, DropoutMask, ParamStore};
use crate::model::{random_mlp, Network};
use crate::msd::{equivalence_oracle, head_build, EquivalenceReport, HeadParams, MsdConfig};
use crate::rng::{keyed_rng, MaskKey, Purpose};
use crate::tensor::{Conv2dGeometry, Tensor};
use crate::trainer::Preset;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

/// Nudges every bias away from zero, in store order.
pub fn randomize_biases(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> =
        store.ids().filter(|&id| store.name(id).ends_with(".b") || store.name(id).ends_with(".beta")).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
}

/// A single layer under test between a parameterized producer and a dense
/// softmax readout.
#[derive(Clone, Copy, Debug)]
enum Case {
    Dense,
    Relu,
    Conv { pad: usize, stride: usize },
    BatchNormFlat,
    BatchNormSpatial,
    BatchNormFrozen,
    MaxPool,
    Dropout,
    FlipWidth,
}

fn run_case(case: Case, seed: u64, tag: u64) -> Result<f64> {
    let mut rng = keyed_rng(seed, Purpose::Draw, &[tag]);
    let mut store = ParamStore::new();
    let spatial = !matches!(case, Case::Dense | Case::Relu | Case::BatchNormFlat | Case::Dropout);
    let x = if spatial { uniform(&mut rng, &[3, 2, 5, 5], -1.0, 1.0) } else { uniform(&mut rng, &[4, 5], -1.0, 1.0) };
    let (geo, kernel) = match case {
        Case::Conv { pad, stride } => (Conv2dGeometry { pad, stride }, 3),
        _ => (Conv2dGeometry { pad: 1, stride: 1 }, 3),
    };
    let w = if spatial {
        store.add("conv.w", uniform(&mut rng, &[3, 2, kernel, kernel], -0.5, 0.5))
    } else {
        store.add("dense.w", uniform(&mut rng, &[5, 6], -0.5, 0.5))
    };
    let b = store.add("dense.b", uniform(&mut rng, &[6], -0.5, 0.5));
    let gamma = store.add("bn.gamma", uniform(&mut rng, &[if spatial { 3 } else { 6 }], 0.5, 1.5));
    let beta = store.add("bn.beta", uniform(&mut rng, &[if spatial { 3 } else { 6 }], -0.5, 0.5));
    let stats_len = if spatial { 3 } else { 6 };
    let run_mean: Vec<f64> = (0..stats_len).map(|_| rng.random_range(-0.2..0.2)).collect();
    let run_var: Vec<f64> = (0..stats_len).map(|_| rng.random_range(0.5..1.5)).collect();

    let (rows, width) = match case {
        Case::Conv { pad: 0, stride: 2 } | Case::MaxPool => (3, 12),
        _ if spatial => (3, 75),
        _ => (4, 6),
    };
    let rw = store.add("readout.w", uniform(&mut rng, &[width, 3], -0.5, 0.5));
    let rb = store.add("readout.b", uniform(&mut rng, &[3], -0.5, 0.5));
    let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();

    let mut g = Graph::new();
    let xin = g.input(x);
    let wn = g.param(w, store.get(w));
    let mut h: NodeId = if spatial {
        g.conv2d(xin, wn, geo)?
    } else {
        let bn = g.param(b, store.get(b));
        let y = g.matmul(xin, wn)?;
        g.add_bias(y, bn)?
    };
    h = match case {
        Case::Dense | Case::Conv { .. } => h,
        Case::Relu => g.relu(h)?,
        Case::BatchNormFlat | Case::BatchNormSpatial => {
            let (gn, bn) = (g.param(gamma, store.get(gamma)), g.param(beta, store.get(beta)));
            g.batchnorm(h, gn, bn, 1e-5)?
        }
        Case::BatchNormFrozen => {
            let (gn, bn) = (g.param(gamma, store.get(gamma)), g.param(beta, store.get(beta)));
            g.batchnorm_frozen(h, gn, bn, run_mean, run_var, 1e-5)?
        }
        Case::MaxPool => g.maxpool2d(h, 2, 2)?,
        Case::Dropout => {
            let mask = mask_sample(MaskKey::new(seed, 0, 0, 0), g.value(h).numel(), 0.4)?;
            g.dropout(h, &mask)?
        }
        Case::FlipWidth => g.flip_width(h)?,
    };
    let flat = g.flatten(h)?;
    let rwn = g.param(rw, store.get(rw));
    let rbn = g.param(rb, store.get(rb));
    let z = g.matmul(flat, rwn)?;
    let z = g.add_bias(z, rbn)?;
    let loss = g.softmax_xent(z, &labels)?;
    grad_check(&g, loss, FD_STEP)
}

/// Central-difference checks for each layer type in isolation.
pub fn layer_gradchecks(seed: u64) -> Result<Vec<CheckResult>> {
    let cases = [
        ("dense", Case::Dense),
        ("relu", Case::Relu),
        ("conv2d", Case::Conv { pad: 1, stride: 1 }),
        ("conv2d_stride2", Case::Conv { pad: 0, stride: 2 }),
        ("batchnorm_flat", Case::BatchNormFlat),
        ("batchnorm_spatial", Case::BatchNormSpatial),
        ("batchnorm_frozen", Case::BatchNormFrozen),
        ("maxpool2d", Case::MaxPool),
        ("dropout", Case::Dropout),
        ("flip_width", Case::FlipWidth),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, &(name, case))| Ok(CheckResult { name: name.to_string(), error: run_case(case, seed, i as u64)? }))
        .collect()
}

/// The multi-sample head alone, flat and flipped spatial features.
pub fn head_gradchecks(seed: u64, samples: &[usize]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &m in samples {
        for flip in [false, true] {
            let mut rng = keyed_rng(seed, Purpose::Draw, &[100 + m as u64, flip as u64]);
            let feature_shape: Vec<usize> = if flip { vec![2, 1, 3] } else { vec![6] };
            let mut store = ParamStore::new();
            let shared = HeadParams::init(&mut store, 6, &[5, 3], &mut rng);
            randomize_biases(&mut store, &mut rng);
            let head = head_build(MsdConfig::new(m, 0.4, vec![5, 3]).with_flip(flip), shared, &feature_shape)?;
            let mut shape = vec![4];
            shape.extend(&feature_shape);
            let x = uniform(&mut rng, &shape, -1.0, 1.0);
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
            let masks = head.sample_masks(seed, 0, 4, m, 0)?;
            let mut g = Graph::new();
            let f = g.input(x);
            let o = head.forward_train(&mut g, &store, f, &labels, &masks)?;
            let name = format!("msd_head_M{m}{}", if flip { "_flip" } else { "" });
            out.push(CheckResult { name, error: grad_check(&g, o.loss_node, FD_STEP)? });
        }
    }
    Ok(out)
}

/// A narrow network with the full layer set of `preset`, checked end to end
/// through the multi-sample objective.
pub fn preset_gradcheck(preset: Preset, samples: usize, seed: u64) -> Result<CheckResult> {
    let mut rng = keyed_rng(seed, Purpose::Draw, &[200]);
    let (mut net, shape) = match preset {
        Preset::Mlp => (Network::mlp(&[6, 1, 1], 3, 7, samples, 0.3, seed)?, vec![5, 6, 1, 1]),
        Preset::Cnn8 => (
            Network::cnn8_with_widths(&[2, 8, 8], 3, [2, 2, 3, 3, 4, 4], 5, samples, 0.3, false, seed)?,
            vec![5, 2, 8, 8],
        ),
    };
    randomize_biases(&mut net.store, &mut rng);
    let x = uniform(&mut rng, &shape, 0.0, 1.0);
    let labels: Vec<usize> = (0..shape[0]).map(|_| rng.random_range(0..3)).collect();
    let masks = net.sample_masks(seed, 0, shape[0], samples)?;
    let mut g = Graph::new();
    let step = net.msd_forward(&mut g, &x, &labels, &masks)?;
    Ok(CheckResult {
        name: format!("{}_M{samples}", preset.name()),
        error: grad_check(&g, step.head.loss_node, FD_STEP)?,
    })
}

fn random_batch(rng: &mut ChaCha8Rng, rows: usize, dim: usize, classes: usize) -> Result<Minibatch> {
    let images = uniform(rng, &[rows, dim, 1, 1], 0.0, 1.0);
    let labels = (0..rows).map(|_| rng.random_range(0..classes)).collect();
    Ok(Dataset::new(images, labels, classes)?.gather(&(0..rows).collect::<Vec<_>>()))
}

/// `draws` random (network, batch, masks) triples through the duplication
/// equivalence oracle.
pub fn equivalence_draws(draws: usize, samples: usize, batchnorm: bool, seed: u64) -> Result<Vec<EquivalenceReport>> {
    let mut rng = keyed_rng(seed, Purpose::Draw, &[300, batchnorm as u64, samples as u64]);
    (0..draws)
        .map(|i| {
            let dim = rng.random_range(2..=6);
            let classes = rng.random_range(2..=4);
            let rows = rng.random_range(2..=5);
            let mut net = random_mlp(&mut rng, dim, classes, samples, batchnorm, seed.wrapping_add(i as u64))?;
            randomize_biases(&mut net.store, &mut rng);
            let batch = random_batch(&mut rng, rows, dim, classes)?;
            let masks = net.sample_masks(seed, i as u64, rows, samples)?;
            equivalence_oracle(&net, &batch, samples, &masks)
        })
        .collect()
}

/// Masks with the same keep pattern in every branch, for the no-diversity checks.
pub fn identical_branches(masks: &crate::model::MaskSet) -> crate::model::MaskSet {
    let first: Vec<DropoutMask> = masks.branches[0].clone();
    crate::model::MaskSet { trunk: masks.trunk.clone(), branches: vec![first; masks.branches.len()] }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for r in layer_gradchecks(1).unwrap() {
            assert!(r.error < GRAD_TOLERANCE, "{}: {}", r.name, r.error);
        }
    }

    #[test]
    fn heads_and_presets_pass() {
        for r in head_gradchecks(2, &[1, 2, 4, 8]).unwrap() {
            assert!(r.error < GRAD_TOLERANCE, "{}: {}", r.name, r.error);
        }
        for preset in [Preset::Mlp, Preset::Cnn8] {
            let r = preset_gradcheck(preset, 2, 3).unwrap();
            assert!(r.error < GRAD_TOLERANCE, "{}: {}", r.name, r.error);
        }
    }

    #[test]
    fn equivalence_holds_on_a_few_draws() {
        for bn in [false, true] {
            for r in equivalence_draws(5, 3, bn, 4).unwrap() {
                assert!(r.loss_gap() < 1e-10 && r.grad_gap() < 1e-9, "bn={bn}: {} {}", r.loss_gap(), r.grad_gap());
            }
        }
    }
}
