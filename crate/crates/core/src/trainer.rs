//! Training and evaluation loops and the experiment arms.
//!
//! An arm decides how one minibatch becomes a loss:
//!
//! * `Msd { samples }` — shared trunk, `M` head branches, averaged loss.
//! * `Dropout` — ordinary single-sample dropout.
//! * `DupMinibatch { samples }` — ordinary dropout on the batch with every
//!   sample repeated `M` times, fed masks paired with the `Msd` arm's.
//! * `NoDropout` — dropout disabled everywhere.
//!
//! All arms of one experiment share the seed, so they see the same initial
//! weights, the same data order and, where applicable, the same masks.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use crate::autograd::{GradientMap, Graph};
use crate::data::{
    augment, batch_ranges, center_crop, duplicate_minibatch, epoch_order, load_cifar10_dir, synth_split, AugmentSpec,
    Dataset, Minibatch, SynthSpec,
};
use crate::error::{Error, Result};
use crate::layers::{argmax_rows, count_errors, softmax_xent_loss};
use crate::model::{BnStats, Network, TrunkLayer};
use crate::optim::{Optimizer, OptimizerKind};

pub const CSV_HEADER: &str = "epoch,iteration,arm,M,train_loss,train_error,val_error,wall_ms_per_iter,lr";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Mlp,
    Cnn8,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Mlp => "mlp",
            Preset::Cnn8 => "cnn8",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Preset::Mlp),
            "cnn8" => Ok(Preset::Cnn8),
            _ => Err(Error::config(format!("unknown preset {s:?} (expected mlp or cnn8)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth {
        spec: SynthSpec,
        val_per_class: usize,
    },
    /// A `cifar-10-batches-bin` directory.
    Cifar {
        dir: PathBuf,
        train_limit: Option<usize>,
        val_limit: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub samples: usize,
    pub dropout: f64,
    /// Hidden width of the mlp preset.
    pub width: usize,
    pub flip: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: u64,
    /// Stop after this many iterations in total, mid-epoch if need be.
    pub max_iterations: Option<u64>,
    /// Emit a record every this many iterations; 0 means once per epoch.
    pub log_every: u64,
    pub seed: u64,
    pub augment: Option<AugmentSpec>,
    pub data: DataSource,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 1 {
            return Err(Error::config("--samples must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("--dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.batch < 2 {
            return Err(Error::config("--batch must be at least 2"));
        }
        if self.width == 0 {
            return Err(Error::config("--width must be positive"));
        }
        Ok(())
    }

    pub fn build_network(&self, input_shape: &[usize], classes: usize, samples: usize) -> Result<Network> {
        match self.preset {
            Preset::Mlp => Network::mlp(input_shape, classes, self.width, samples, self.dropout, self.seed),
            Preset::Cnn8 => Network::cnn8(input_shape, classes, samples, self.dropout, self.flip, self.seed),
        }
    }

    /// Training and validation sets.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synth { spec, val_per_class } => synth_split(spec, *val_per_class),
            DataSource::Cifar { dir, train_limit, val_limit } => {
                let (train, test) = load_cifar10_dir(dir)?;
                let train = train_limit.map_or(train.clone(), |n| train.head(n));
                let test = val_limit.map_or(test.clone(), |n| test.head(n));
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Msd { samples: usize },
    Dropout,
    DupMinibatch { samples: usize },
    NoDropout,
}

impl Arm {
    pub fn label(&self) -> &'static str {
        match self {
            Arm::Msd { .. } => "msd",
            Arm::Dropout => "dropout",
            Arm::DupMinibatch { .. } => "dup",
            Arm::NoDropout => "nodrop",
        }
    }

    /// The `M` column.
    pub fn samples(&self) -> usize {
        match self {
            Arm::Msd { samples } | Arm::DupMinibatch { samples } => *samples,
            Arm::Dropout | Arm::NoDropout => 1,
        }
    }

    fn head_samples(&self) -> usize {
        match self {
            Arm::Msd { samples } => *samples,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub epoch: u64,
    /// Iterations completed so far.
    pub iteration: u64,
    pub arm: String,
    pub samples: usize,
    pub train_loss: f64,
    pub train_error: f64,
    pub val_error: f64,
    pub wall_ms_per_iter: f64,
    pub lr: f64,
}

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            self.arm,
            self.samples,
            self.train_loss,
            self.train_error,
            self.val_error,
            self.wall_ms_per_iter,
            self.lr
        )
    }
}

pub fn to_csv(records: &[RunRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Outcome of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Misclassified rows under the ensemble prediction.
    pub errors: usize,
    /// Misclassified rows per branch (multi-sample arm only).
    pub branch_errors: Option<Vec<usize>>,
    pub rows: usize,
    pub wall_ms: f64,
}

/// Mutable training state of one arm.
#[derive(Clone, Debug)]
pub struct Session {
    pub net: Network,
    pub opt: Optimizer,
    pub arm: Arm,
    pub label: String,
    pub iteration: u64,
    /// Training objective of every iteration so far.
    pub loss_trace: Vec<f64>,
    cfg: TrainConfig,
    has_bn: bool,
}

impl Session {
    pub fn new(cfg: &TrainConfig, arm: Arm, input_shape: &[usize], classes: usize) -> Result<Self> {
        cfg.validate()?;
        if arm.samples() < 1 {
            return Err(Error::config("arm needs at least one dropout sample"));
        }
        let net = cfg.build_network(input_shape, classes, arm.head_samples())?;
        let opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.lr_decay, cfg.weight_decay, &net.store)?;
        let has_bn = net.trunk().iter().any(|l| matches!(l, TrunkLayer::BatchNorm(_)));
        Ok(Session {
            net,
            opt,
            arm,
            label: arm.label().to_string(),
            iteration: 0,
            loss_trace: Vec::new(),
            cfg: cfg.clone(),
            has_bn,
        })
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Forward, backward, running-stat update and optimizer step on one batch.
    pub fn step(&mut self, batch: &Minibatch) -> Result<StepStats> {
        let rows = batch.len();
        if self.has_bn && rows < 2 {
            return Err(Error::contract("batch-norm needs at least 2 rows per training batch"));
        }
        let start = Instant::now();
        let it = self.iteration;
        let seed = self.cfg.seed;
        let net = &self.net;
        let (loss, errors, branch_errors, grads, stats): (f64, usize, Option<Vec<usize>>, GradientMap, Vec<BnStats>) =
            match self.arm {
                Arm::Msd { samples } => {
                    let masks = net.sample_masks(seed, it, rows, samples)?;
                    let mut g = Graph::new();
                    let step = net.msd_forward(&mut g, &batch.images, &batch.labels, &masks)?;
                    let grads = g.backward(step.head.loss_node)?;
                    let errors = step.head.ensemble_errors(&batch.labels)?;
                    let branch = step.head.branch_errors(&batch.labels)?;
                    (step.head.mean_loss, errors, Some(branch), grads, step.bn_stats)
                }
                Arm::Dropout | Arm::NoDropout => {
                    let masks = match self.arm {
                        Arm::Dropout => Some(net.sample_masks(seed, it, rows, 1)?),
                        _ => None,
                    };
                    let mut g = Graph::new();
                    let step = net.plain_forward(
                        &mut g,
                        &batch.images,
                        &batch.labels,
                        masks.as_ref().map(|m| &m.trunk[..]),
                        masks.as_ref().map(|m| &m.branches[0]),
                    )?;
                    let grads = g.backward(step.loss)?;
                    let errors = count_errors(g.value(step.logits), &batch.labels)?;
                    (g.value(step.loss).data()[0], errors, None, grads, step.bn_stats)
                }
                Arm::DupMinibatch { samples } => {
                    let masks = net.sample_masks(seed, it, rows, samples)?;
                    let (trunk, head) = masks.duplicated(rows)?;
                    let dup = duplicate_minibatch(batch, samples)?;
                    let mut g = Graph::new();
                    let step = net.plain_forward(&mut g, &dup.images, &dup.labels, Some(&trunk), Some(&head))?;
                    let grads = g.backward(step.loss)?;
                    let errors = count_errors(g.value(step.logits), &dup.labels)?;
                    (g.value(step.loss).data()[0], errors, None, grads, step.bn_stats)
                }
            };
        if !loss.is_finite() {
            return Err(Error::NonFinite { iteration: it, role: "loss".into() });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite { iteration: it, role: "gradient".into() });
        }
        self.net.update_running_stats(&stats)?;
        self.opt.step(&mut self.net.store, &grads)?;
        if !self.net.is_finite() {
            return Err(Error::NonFinite { iteration: it, role: "parameters".into() });
        }
        let wall_ms = (start.elapsed().as_secs_f64() * 1e3).max(f64::MIN_POSITIVE);
        self.iteration += 1;
        self.loss_trace.push(loss);
        // the duplicated arm counts errors over its M·B rows
        let rows = match self.arm {
            Arm::DupMinibatch { samples } => rows * samples,
            _ => rows,
        };
        Ok(StepStats { loss, errors, branch_errors, rows, wall_ms })
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_iterations.is_none_or(|max| self.iteration < max)
    }

    /// One pass over `train` in seeded order. Returns the records emitted at
    /// the configured cadence (at least one per epoch that ran an iteration).
    pub fn train_epoch(&mut self, epoch: u64, train: &Dataset, val: Option<&Dataset>) -> Result<Vec<RunRecord>> {
        if self.has_bn && train.len() % self.cfg.batch == 1 {
            return Err(Error::config(format!(
                "{} samples in batches of {} leave a final batch of 1, which batch-norm cannot train on",
                train.len(),
                self.cfg.batch
            )));
        }
        self.opt.set_epoch(epoch);
        let order = epoch_order(train.len(), self.cfg.seed, epoch);
        let mut records = Vec::new();
        let mut acc = Accumulator::default();
        for range in batch_ranges(train.len(), self.cfg.batch) {
            if !self.budget_left() {
                break;
            }
            let mut batch = train.gather(&order[range]);
            if let Some(spec) = &self.cfg.augment {
                batch = augment(&batch, spec, self.cfg.seed, epoch)?;
            }
            acc.add(&self.step(&batch)?);
            if self.cfg.log_every > 0 && self.iteration.is_multiple_of(self.cfg.log_every) {
                records.push(self.record(epoch, &acc, val)?);
                acc = Accumulator::default();
            }
        }
        if acc.iterations > 0 && (self.cfg.log_every == 0 || records.is_empty()) {
            records.push(self.record(epoch, &acc, val)?);
        }
        Ok(records)
    }

    fn record(&self, epoch: u64, acc: &Accumulator, val: Option<&Dataset>) -> Result<RunRecord> {
        let val_error = match val {
            Some(v) => evaluate(&self.net, v, self.cfg.batch, self.cfg.augment.as_ref())?.1,
            None => f64::NAN,
        };
        Ok(RunRecord {
            epoch,
            iteration: self.iteration,
            arm: self.label.clone(),
            samples: self.arm.samples(),
            train_loss: acc.loss / acc.iterations as f64,
            train_error: acc.errors as f64 / acc.rows as f64,
            val_error,
            wall_ms_per_iter: acc.wall_ms / acc.iterations as f64,
            lr: self.opt.lr(),
        })
    }

    /// Trains for the configured number of epochs (or iteration budget).
    pub fn run(&mut self, train: &Dataset, val: Option<&Dataset>) -> Result<Vec<RunRecord>> {
        let mut records = Vec::new();
        for epoch in 0..self.cfg.epochs {
            if !self.budget_left() {
                break;
            }
            records.extend(self.train_epoch(epoch, train, val)?);
        }
        Ok(records)
    }
}

#[derive(Default)]
struct Accumulator {
    iterations: u64,
    loss: f64,
    errors: usize,
    rows: usize,
    wall_ms: f64,
}

impl Accumulator {
    fn add(&mut self, s: &StepStats) {
        self.iterations += 1;
        self.loss += s.loss;
        self.errors += s.errors;
        self.rows += s.rows;
        self.wall_ms += s.wall_ms;
    }
}

/// Mean cross-entropy and error rate in inference mode (one branch, no
/// dropout, running batch-norm statistics, centered crop).
pub fn evaluate(net: &Network, data: &Dataset, batch: usize, crop: Option<&AugmentSpec>) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let mut loss = 0.0;
    let mut errors = 0;
    let row: usize = data.sample_shape().iter().product();
    for range in batch_ranges(data.len(), batch.max(1)) {
        let mut shape = data.images.shape().to_vec();
        shape[0] = range.len();
        let images =
            crate::tensor::Tensor::new(shape, data.images.data()[range.start * row..range.end * row].to_vec())?;
        let images = match crop {
            Some(spec) => center_crop(&images, spec)?,
            None => images,
        };
        let labels = &data.labels[range.clone()];
        let logits = net.logits(&images)?;
        loss += softmax_xent_loss(&logits, labels)? * range.len() as f64;
        errors += argmax_rows(&logits)?.iter().zip(labels).filter(|(p, l)| p != l).count();
    }
    Ok((loss / data.len() as f64, errors as f64 / data.len() as f64))
}

/// Runs every arm from the same seed and data; records come back in arm
/// order. With `parallel` the arms run on separate threads; results are
/// identical either way.
pub fn compare_experiment(
    cfg: &TrainConfig,
    arms: &[(Arm, String)],
    train: &Dataset,
    val: Option<&Dataset>,
    parallel: bool,
) -> Result<Vec<Vec<RunRecord>>> {
    let run_arm = |(arm, label): &(Arm, String)| -> Result<Vec<RunRecord>> {
        let mut s = Session::new(cfg, *arm, train.sample_shape(), train.classes)?.with_label(label.clone());
        s.run(train, val)
    };
    if parallel {
        std::thread::scope(|scope| {
            let handles: Vec<_> = arms.iter().map(|a| scope.spawn(move || run_arm(a))).collect();
            handles.into_iter().map(|h| h.join().expect("arm thread panicked")).collect()
        })
    } else {
        arms.iter().map(run_arm).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_cfg(preset: Preset, samples: usize) -> TrainConfig {
        TrainConfig {
            preset,
            samples,
            dropout: 0.3,
            width: 16,
            flip: false,
            optimizer: OptimizerKind::adam(),
            lr: 0.01,
            lr_decay: 0.92,
            weight_decay: 0.0,
            batch: 8,
            epochs: 2,
            max_iterations: None,
            log_every: 0,
            seed: 3,
            augment: None,
            data: DataSource::Synth {
                spec: SynthSpec { classes: 3, per_class: 10, shape: vec![4, 1, 1], spread: 0.2, seed: 3 },
                val_per_class: 5,
            },
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let mut cfg = small_cfg(Preset::Mlp, 2);
        cfg.max_iterations = Some(0);
        let (train, val) = cfg.load_data().unwrap();
        let mut s = Session::new(&cfg, Arm::Msd { samples: 2 }, train.sample_shape(), 3).unwrap();
        let before = s.net.store.clone();
        assert!(s.run(&train, Some(&val)).unwrap().is_empty());
        assert_eq!(s.net.store, before);
    }

    #[test]
    fn single_sample_arm_matches_dropout_arm_bitwise() {
        let mut cfg = small_cfg(Preset::Mlp, 1);
        cfg.epochs = 3;
        let (train, val) = cfg.load_data().unwrap();
        let arms = vec![(Arm::Msd { samples: 1 }, "msd".to_string()), (Arm::Dropout, "msd".to_string())];
        let out = compare_experiment(&cfg, &arms, &train, Some(&val), false).unwrap();
        let strip = |r: &RunRecord| RunRecord { wall_ms_per_iter: 0.0, ..r.clone() };
        let a: Vec<_> = out[0].iter().map(strip).collect();
        let b: Vec<_> = out[1].iter().map(strip).collect();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_error.to_bits(), y.val_error.to_bits());
        }
    }

    #[test]
    fn dup_arm_tracks_msd_arm_per_iteration() {
        let cfg = small_cfg(Preset::Mlp, 4);
        let (train, _) = cfg.load_data().unwrap();
        let mut msd = Session::new(&cfg, Arm::Msd { samples: 4 }, train.sample_shape(), 3).unwrap();
        let mut dup = Session::new(&cfg, Arm::DupMinibatch { samples: 4 }, train.sample_shape(), 3).unwrap();
        msd.run(&train, None).unwrap();
        dup.run(&train, None).unwrap();
        assert_eq!(msd.loss_trace.len(), 8);
        for (a, b) in msd.loss_trace.iter().zip(&dup.loss_trace) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn iterations_per_epoch_is_ceil() {
        let cfg = small_cfg(Preset::Mlp, 2);
        let (train, _) = cfg.load_data().unwrap();
        for arm in [Arm::Msd { samples: 2 }, Arm::DupMinibatch { samples: 2 }, Arm::NoDropout] {
            let mut s = Session::new(&cfg, arm, train.sample_shape(), 3).unwrap();
            let rec = s.train_epoch(0, &train, None).unwrap();
            assert_eq!(rec.len(), 1);
            assert_eq!(rec[0].iteration, 30u64.div_ceil(8));
            assert!(rec[0].wall_ms_per_iter > 0.0);
        }
    }

    #[test]
    fn log_cadence_in_iterations() {
        let mut cfg = small_cfg(Preset::Mlp, 1);
        cfg.log_every = 2;
        let (train, val) = cfg.load_data().unwrap();
        let mut s = Session::new(&cfg, Arm::Dropout, train.sample_shape(), 3).unwrap();
        let rec = s.run(&train, Some(&val)).unwrap();
        let its: Vec<u64> = rec.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![2, 4, 6, 8]);
    }

    #[test]
    fn evaluate_is_deterministic_and_near_chance_untrained() {
        let spec = SynthSpec { classes: 10, per_class: 200, shape: vec![8, 1, 1], spread: 0.3, seed: 9 };
        let data = crate::data::synth_blobs(&spec).unwrap();
        let mut errs = Vec::new();
        for seed in 0..5 {
            let net = Network::mlp(&[8, 1, 1], 10, 16, 1, 0.3, seed).unwrap();
            let a = evaluate(&net, &data, 64, None).unwrap();
            assert_eq!(a, evaluate(&net, &data, 64, None).unwrap());
            errs.push(a.1);
        }
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((mean - 0.9).abs() < 0.1, "{errs:?}");
    }

    #[test]
    fn singleton_final_batch_with_batchnorm_is_a_config_error() {
        let mut cfg = small_cfg(Preset::Cnn8, 1);
        cfg.data = DataSource::Synth {
            spec: SynthSpec { classes: 3, per_class: 3, shape: vec![3, 8, 8], spread: 0.2, seed: 1 },
            val_per_class: 1,
        };
        let (train, _) = cfg.load_data().unwrap();
        let mut s = Session::new(&cfg, Arm::Dropout, train.sample_shape(), 3).unwrap();
        assert!(matches!(s.train_epoch(0, &train, None), Err(Error::Config(_))));
    }

    #[test]
    fn csv_has_fixed_header() {
        let r = RunRecord {
            epoch: 1,
            iteration: 10,
            arm: "msd".into(),
            samples: 8,
            train_loss: 0.5,
            train_error: 0.25,
            val_error: 0.125,
            wall_ms_per_iter: 3.0,
            lr: 0.01,
        };
        assert_eq!(to_csv(&[r]), format!("{CSV_HEADER}\n1,10,msd,8,0.5,0.25,0.125,3,0.01\n"));
    }
}
