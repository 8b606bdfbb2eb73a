//! Command-line interface.
//!
//! Every run command prints its resolved settings to stderr as `key=value`
//! lines; saving them to a file and passing it back with `--config`
//! reproduces the run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};

use crate::bench::{bench_iteration_time, monotonicity_violation, render_table, BenchConfig};
use crate::checks::{
    equivalence_draws, head_gradchecks, layer_gradchecks, preset_gradcheck, CheckResult, GRAD_TOLERANCE,
};
use crate::config::splice_config;
use crate::data::{AugmentSpec, SynthSpec};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::trainer::{compare_experiment, to_csv, Arm, DataSource, Preset, RunRecord, Session, TrainConfig};
use crate::weights::save_network;

#[derive(Parser, Debug)]
#[command(name = "msdrop", version, about = "Multi-sample dropout training engine", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one multi-sample dropout model; writes CSV records and weights.
    Train(TrainArgs),
    /// Run several arms (msd, dropout, dup, nodrop) from the same seed.
    Compare(CompareArgs),
    /// One arm per sample count or per dropout ratio.
    Sweep(SweepArgs),
    /// Per-iteration timing against single-sample dropout.
    Bench(BenchArgs),
    /// Finite-difference checks of every layer, the head and both presets.
    Gradcheck(GradcheckArgs),
    /// Multi-sample head versus the duplicated minibatch on random draws.
    Equiv(EquivArgs),
}

/// Settings shared by the commands that train.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// key=value settings file; explicit flags override it.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// mlp or cnn8.
    #[arg(long, default_value = "cnn8")]
    pub preset: String,
    #[arg(long, default_value_t = 0.3)]
    pub dropout: f64,
    /// Hidden width of the mlp preset.
    #[arg(long, default_value_t = 2000)]
    pub width: usize,
    /// Width-flip the features of the upper half of the branches.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub flip: bool,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    /// Learning rate multiplier per epoch.
    #[arg(long = "lr-decay", default_value_t = 0.92)]
    pub lr_decay: f64,
    /// SGD momentum.
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long = "weight-decay", default_value_t = 5e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: u64,
    /// Stop after this many iterations in total.
    #[arg(long = "max-iterations")]
    pub max_iterations: Option<u64>,
    /// Emit a record every N iterations (0: once per epoch).
    #[arg(long = "log-every", default_value_t = 0)]
    pub log_every: u64,
    #[arg(long)]
    pub seed: u64,
    /// synth or cifar.
    #[arg(long, default_value = "synth")]
    pub data: String,
    /// Directory holding data_batch_1..5.bin and test_batch.bin.
    #[arg(long = "cifar-dir")]
    pub cifar_dir: Option<PathBuf>,
    #[arg(long = "train-limit")]
    pub train_limit: Option<usize>,
    #[arg(long = "val-limit")]
    pub val_limit: Option<usize>,
    /// Synthetic data: number of classes.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long = "per-class", default_value_t = 100)]
    pub per_class: usize,
    #[arg(long = "val-per-class", default_value_t = 50)]
    pub val_per_class: usize,
    /// Synthetic images are channels x size x size.
    #[arg(long = "image-size", default_value_t = 8)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Per-pixel noise around the class means.
    #[arg(long, default_value_t = 0.3)]
    pub spread: f64,
    /// Seed of the synthetic dataset (defaults to --seed).
    #[arg(long = "data-seed")]
    pub data_seed: Option<u64>,
    /// Random crop from the padded image and random horizontal flip.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub augment: bool,
    #[arg(long, default_value_t = 4)]
    pub pad: usize,
    #[arg(long, default_value_t = 0.5)]
    pub hflip: f64,
    /// CSV destination (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Number of dropout samples M.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Final weights destination.
    #[arg(long, default_value = "weights.msdw")]
    pub weights: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Comma-separated subset of msd,dropout,dup,nodrop.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "msd,dropout,dup,nodrop")]
    pub arms: Vec<String>,
    /// Run arms on separate threads (results are identical).
    #[arg(long = "parallel-arms", default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub parallel_arms: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Sample counts to sweep, or the fixed count of a ratio sweep.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "8")]
    pub samples: Vec<usize>,
    /// Dropout ratios to sweep at a single sample count.
    #[arg(long, action = ArgAction::Set, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long = "parallel-arms", default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub parallel_arms: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, action = ArgAction::Set, value_delimiter = ',', default_value = "1,2,4,8,16")]
    pub samples: Vec<usize>,
    /// Untimed iterations before measuring.
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    /// Timed iterations (at least 100).
    #[arg(long, default_value_t = 100)]
    pub iterations: usize,
    /// Skip the duplicated-minibatch baseline.
    #[arg(long = "no-dup", default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub no_dup: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Maximum tolerated relative error.
    #[arg(long, default_value_t = GRAD_TOLERANCE)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct EquivArgs {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Random (network, batch, masks) draws.
    #[arg(long, default_value_t = 50)]
    pub draws: usize,
    /// Put population-form batch-norm in the trunk.
    #[arg(long, default_value_t = false, action = ArgAction::Set, num_args = 0..=1, default_missing_value = "true")]
    pub batchnorm: bool,
    #[arg(long = "loss-tol", default_value_t = 1e-10)]
    pub loss_tol: f64,
    #[arg(long = "grad-tol", default_value_t = 1e-9)]
    pub grad_tol: f64,
}

impl RunArgs {
    /// The training configuration these flags describe, for `samples` dropout samples.
    pub fn train_config(&self, samples: usize) -> Result<TrainConfig> {
        let preset: Preset = self.preset.parse()?;
        let optimizer = match self.optimizer.as_str() {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::Sgd { momentum: self.momentum },
            other => return Err(Error::config(format!("unknown optimizer {other:?} (expected adam or sgd)"))),
        };
        let data = match self.data.as_str() {
            "synth" => DataSource::Synth {
                spec: SynthSpec {
                    classes: self.classes,
                    per_class: self.per_class,
                    shape: vec![self.channels, self.image_size, self.image_size],
                    spread: self.spread,
                    seed: self.data_seed.unwrap_or(self.seed),
                },
                val_per_class: self.val_per_class,
            },
            "cifar" => DataSource::Cifar {
                dir: self.cifar_dir.clone().ok_or_else(|| Error::config("--data cifar needs --cifar-dir"))?,
                train_limit: self.train_limit,
                val_limit: self.val_limit,
            },
            other => return Err(Error::config(format!("unknown data source {other:?} (expected synth or cifar)"))),
        };
        let (h, w) = match &data {
            DataSource::Cifar { .. } => (32, 32),
            DataSource::Synth { .. } => (self.image_size, self.image_size),
        };
        let augment = self.augment.then_some(AugmentSpec { pad: self.pad, crop: (h, w), hflip_prob: self.hflip });
        let cfg = TrainConfig {
            preset,
            samples,
            dropout: self.dropout,
            width: self.width,
            flip: self.flip,
            optimizer,
            lr: self.lr,
            lr_decay: self.lr_decay,
            weight_decay: self.weight_decay,
            batch: self.batch,
            epochs: self.epochs,
            max_iterations: self.max_iterations,
            log_every: self.log_every,
            seed: self.seed,
            augment,
            data,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `key=value` lines for every setting, loadable with `--config`.
    pub fn describe(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("preset", self.preset.clone()),
            ("dropout", self.dropout.to_string()),
            ("width", self.width.to_string()),
            ("flip", self.flip.to_string()),
            ("optimizer", self.optimizer.clone()),
            ("lr", self.lr.to_string()),
            ("lr-decay", self.lr_decay.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight-decay", self.weight_decay.to_string()),
            ("batch", self.batch.to_string()),
            ("epochs", self.epochs.to_string()),
            ("max-iterations", opt(self.max_iterations.map(|v| v.to_string()))),
            ("log-every", self.log_every.to_string()),
            ("seed", self.seed.to_string()),
            ("data", self.data.clone()),
            ("cifar-dir", opt(self.cifar_dir.as_ref().map(|p| p.display().to_string()))),
            ("train-limit", opt(self.train_limit.map(|v| v.to_string()))),
            ("val-limit", opt(self.val_limit.map(|v| v.to_string()))),
            ("classes", self.classes.to_string()),
            ("per-class", self.per_class.to_string()),
            ("val-per-class", self.val_per_class.to_string()),
            ("image-size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("spread", self.spread.to_string()),
            ("data-seed", self.data_seed.unwrap_or(self.seed).to_string()),
            ("augment", self.augment.to_string()),
            ("pad", self.pad.to_string()),
            ("hflip", self.hflip.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs.into_iter().filter(|(_, v)| !v.is_empty()) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn emit(&self, csv: &str) -> Result<()> {
        match &self.out {
            Some(p) => fs::write(p, csv)?,
            None => std::io::stdout().write_all(csv.as_bytes())?,
        }
        Ok(())
    }
}

fn print_resolved(command: &str, run: &RunArgs, extra: &[(&str, String)]) {
    let mut text = format!("# msdrop {command}\n");
    text.push_str(&run.describe());
    for (k, v) in extra {
        let _ = writeln!(text, "{k}={v}");
    }
    eprint!("{text}");
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_arm(name: &str, samples: usize) -> Result<Arm> {
    match name {
        "msd" => Ok(Arm::Msd { samples }),
        "dropout" => Ok(Arm::Dropout),
        "dup" => Ok(Arm::DupMinibatch { samples }),
        "nodrop" => Ok(Arm::NoDropout),
        other => Err(Error::config(format!("unknown arm {other:?} (expected msd, dropout, dup or nodrop)"))),
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    print_resolved(
        "train",
        &a.run,
        &[("samples", a.samples.to_string()), ("weights", a.weights.display().to_string())],
    );
    let cfg = a.run.train_config(a.samples)?;
    let (train, val) = cfg.load_data()?;
    let mut session = Session::new(&cfg, Arm::Msd { samples: a.samples }, train.sample_shape(), train.classes)?;
    let records = session.run(&train, Some(&val))?;
    a.run.emit(&to_csv(&records))?;
    save_network(&session.net, &a.weights)
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    print_resolved(
        "compare",
        &a.run,
        &[
            ("samples", a.samples.to_string()),
            ("arms", a.arms.join(",")),
            ("parallel-arms", a.parallel_arms.to_string()),
        ],
    );
    let cfg = a.run.train_config(a.samples)?;
    let arms = a.arms.iter().map(|n| Ok((parse_arm(n, a.samples)?, n.clone()))).collect::<Result<Vec<_>>>()?;
    if arms.is_empty() {
        return Err(Error::config("--arms must name at least one arm"));
    }
    let (train, val) = cfg.load_data()?;
    let runs = compare_experiment(&cfg, &arms, &train, Some(&val), a.parallel_arms)?;
    a.run.emit(&to_csv(&runs.concat()))
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let mut extra = vec![("samples", join(&a.samples)), ("parallel-arms", a.parallel_arms.to_string())];
    if let Some(r) = &a.ratios {
        extra.push(("ratios", join(r)));
    }
    print_resolved("sweep", &a.run, &extra);
    if a.samples.is_empty() {
        return Err(Error::config("--samples list is empty"));
    }
    let records: Vec<RunRecord> = match &a.ratios {
        None => {
            let cfg = a.run.train_config(a.samples[0])?;
            for &m in &a.samples {
                a.run.train_config(m)?;
            }
            let (train, val) = cfg.load_data()?;
            let arms: Vec<(Arm, String)> =
                a.samples.iter().map(|&m| (Arm::Msd { samples: m }, "msd".to_string())).collect();
            compare_experiment(&cfg, &arms, &train, Some(&val), a.parallel_arms)?.concat()
        }
        Some(ratios) => {
            if ratios.is_empty() {
                return Err(Error::config("--ratios list is empty"));
            }
            if a.samples.len() != 1 {
                return Err(Error::config("a ratio sweep takes a single --samples value"));
            }
            let m = a.samples[0];
            let mut out = Vec::new();
            for &p in ratios {
                let mut run = a.run.clone();
                run.dropout = p;
                let cfg = run.train_config(m)?;
                let (train, val) = cfg.load_data()?;
                let mut s = Session::new(&cfg, Arm::Msd { samples: m }, train.sample_shape(), train.classes)?
                    .with_label(format!("msd-p{p}"));
                out.extend(s.run(&train, Some(&val))?);
            }
            out
        }
    };
    a.run.emit(&to_csv(&records))
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    print_resolved(
        "bench",
        &a.run,
        &[
            ("samples", join(&a.samples)),
            ("warmup", a.warmup.to_string()),
            ("iterations", a.iterations.to_string()),
            ("no-dup", a.no_dup.to_string()),
        ],
    );
    let cfg = a.run.train_config(*a.samples.iter().max().unwrap_or(&1))?;
    let (train, _) = cfg.load_data()?;
    let bench = BenchConfig { warmup: a.warmup, iterations: a.iterations, dup: !a.no_dup };
    let rows = bench_iteration_time(&cfg, &a.samples, &bench, &train)?;
    a.run.emit(&render_table(&rows))?;
    if let Some(m) = monotonicity_violation(&rows) {
        return Err(Error::Invariant(format!(
            "per-iteration time is not monotone in M: M={m} ran faster than a smaller M"
        )));
    }
    Ok(())
}

fn report(results: &[CheckResult], threshold: f64) -> Result<()> {
    let mut failed = Vec::new();
    for r in results {
        let ok = r.error < threshold;
        println!("{:<22} {:.3e} {}", r.name, r.error, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(r.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invariant(format!("gradient check above {threshold:e}: {}", failed.join(", "))))
    }
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    eprintln!("# msdrop gradcheck\nseed={}\nthreshold={}", a.seed, a.threshold);
    let mut results = layer_gradchecks(a.seed)?;
    results.extend(head_gradchecks(a.seed, &[1, 2, 4, 8])?);
    for preset in [Preset::Mlp, Preset::Cnn8] {
        for m in [1, 4] {
            results.push(preset_gradcheck(preset, m, a.seed)?);
        }
    }
    report(&results, a.threshold)
}

fn cmd_equiv(a: &EquivArgs) -> Result<()> {
    eprintln!(
        "# msdrop equiv\nseed={}\nsamples={}\ndraws={}\nbatchnorm={}\nloss-tol={}\ngrad-tol={}",
        a.seed, a.samples, a.draws, a.batchnorm, a.loss_tol, a.grad_tol
    );
    if a.samples < 1 {
        return Err(Error::config("--samples must be at least 1"));
    }
    let reports = equivalence_draws(a.draws, a.samples, a.batchnorm, a.seed)?;
    let loss = reports.iter().map(|r| r.loss_gap()).fold(0.0, f64::max);
    let grad = reports.iter().map(|r| r.grad_gap()).fold(0.0, f64::max);
    let bad = reports.iter().filter(|r| !(r.loss_gap() < a.loss_tol && r.grad_gap() < a.grad_tol)).count();
    println!("draws={} max_loss_gap={loss:.3e} max_grad_gap={grad:.3e} failures={bad}", reports.len());
    if bad > 0 {
        return Err(Error::Invariant(format!(
            "duplication equivalence: {bad} of {} draws exceed |dloss| < {:e} or |dgrad| < {:e}",
            reports.len(),
            a.loss_tol,
            a.grad_tol
        )));
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Equiv(a) => cmd_equiv(a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let args = match splice_config(args, &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
