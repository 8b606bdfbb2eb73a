//! Per-iteration wall-clock timing of the multi-sample head against ordinary
//! dropout and the duplicated-minibatch baseline.

use std::fmt::Write as _;

use crate::data::{batch_ranges, epoch_order, Dataset};
use crate::error::{Error, Result};
use crate::trainer::{Arm, Session, TrainConfig};

pub const DEFAULT_WARMUP: usize = 10;
pub const MIN_TIMED: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iterations: usize,
    /// Also time the duplicated-minibatch baseline.
    pub dup: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup: DEFAULT_WARMUP, iterations: MIN_TIMED, dup: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub samples: usize,
    pub msd_ms: f64,
    /// `msd_ms` relative to single-sample dropout.
    pub msd_ratio: f64,
    pub dup_ms: Option<f64>,
    pub dup_ratio: Option<f64>,
}

/// Mean step time of `arm` over `timed` iterations after `warmup` untimed ones.
pub fn time_arm(cfg: &TrainConfig, arm: Arm, data: &Dataset, warmup: usize, timed: usize) -> Result<f64> {
    let mut session = Session::new(cfg, arm, data.sample_shape(), data.classes)?;
    let mut batches = Vec::new();
    let mut epoch = 0;
    while batches.len() < warmup + timed {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        batches.extend(
            batch_ranges(data.len(), cfg.batch)
                .filter(|r| r.len() == cfg.batch)
                .map(|r| data.gather(&order[r]))
                .take(warmup + timed - batches.len()),
        );
        epoch += 1;
        if batches.is_empty() {
            return Err(Error::config("dataset smaller than one batch"));
        }
    }
    let mut total = 0.0;
    for (i, b) in batches.iter().enumerate() {
        let s = session.step(b)?;
        if i >= warmup {
            total += s.wall_ms;
        }
    }
    Ok(total / timed as f64)
}

/// Mean per-iteration times for every `M`, with ratios against `M = 1`.
pub fn bench_iteration_time(
    cfg: &TrainConfig,
    samples: &[usize],
    bench: &BenchConfig,
    data: &Dataset,
) -> Result<Vec<BenchRow>> {
    if bench.iterations < MIN_TIMED {
        return Err(Error::config(format!("at least {MIN_TIMED} timed iterations are required")));
    }
    if samples.is_empty() || samples.contains(&0) {
        return Err(Error::config("sample list must be nonempty and positive"));
    }
    let base = time_arm(cfg, Arm::Msd { samples: 1 }, data, bench.warmup, bench.iterations)?;
    samples
        .iter()
        .map(|&m| {
            let msd_ms = if m == 1 {
                base
            } else {
                time_arm(cfg, Arm::Msd { samples: m }, data, bench.warmup, bench.iterations)?
            };
            let dup_ms = if !bench.dup {
                None
            } else if m == 1 {
                Some(base)
            } else {
                Some(time_arm(cfg, Arm::DupMinibatch { samples: m }, data, bench.warmup, bench.iterations)?)
            };
            Ok(BenchRow { samples: m, msd_ms, msd_ratio: msd_ms / base, dup_ms, dup_ratio: dup_ms.map(|d| d / base) })
        })
        .collect()
}

pub fn render_table(rows: &[BenchRow]) -> String {
    let mut out = String::from("M,msd_ms,msd_ratio,dup_ms,dup_ratio\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or(String::from("-"), |v| format!("{v:.4}"));
        let _ =
            writeln!(out, "{},{:.4},{:.4},{},{}", r.samples, r.msd_ms, r.msd_ratio, opt(r.dup_ms), opt(r.dup_ratio));
    }
    out
}

/// First `M` whose mean time is below that of the previous `M`, if any.
pub fn monotonicity_violation(rows: &[BenchRow]) -> Option<usize> {
    let mut sorted: Vec<&BenchRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.samples);
    sorted.windows(2).find(|w| w[1].msd_ms < w[0].msd_ms).map(|w| w[1].samples)
}
