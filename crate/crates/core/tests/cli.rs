//! The `msdrop` binary end to end: exit codes, CSV shape, config files.

use std::path::Path;
use std::process::{Command, Output};

use msdrop::trainer::CSV_HEADER;

fn msdrop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msdrop")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Small mlp run on a small synthetic set.
const QUICK: [&str; 10] = ["--preset", "mlp", "--width", "16", "--per-class", "10", "--batch", "20", "--seed", "1"];

fn rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn arms(csv: &str) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in rows(csv) {
        let key = format!("{}:{}", r[2], r[3]);
        if !seen.contains(&key) {
            seen.push(key);
        }
    }
    seen
}

#[test]
fn train_emits_one_row_per_epoch_and_writes_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(dir.path(), &[&["train", "--samples", "4", "--epochs", "3"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = stdout(&out);
    assert_eq!(csv.lines().next(), Some(CSV_HEADER));
    let r = rows(&csv);
    assert_eq!(r.len(), 3);
    assert_eq!(r.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1", "2"]);
    assert!(r.iter().all(|r| r[2] == "msd" && r[3] == "4"));
    assert!(dir.path().join("weights.msdw").exists());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("samples=4") && stderr.contains("lr-decay=0.92"), "resolved config not echoed: {stderr}");
}

#[test]
fn cnn8_train_row_count_follows_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(
        dir.path(),
        &[
            "train",
            "--preset",
            "cnn8",
            "--samples",
            "8",
            "--dropout",
            "0.3",
            "--epochs",
            "4",
            "--per-class",
            "4",
            "--batch",
            "20",
            "--seed",
            "1",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(rows(&stdout(&out)).len(), 4);
}

#[test]
fn out_flag_writes_csv_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(dir.path(), &[&["train", "--epochs", "1", "--out", "run.csv"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).is_empty());
    let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(rows(&csv).len(), 1);
}

#[test]
fn invalid_settings_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        &["train", "--samples", "0"][..],
        &["train", "--dropout", "1.0"],
        &["train", "--dropout=-0.1"],
        &["train", "--preset", "resnet"],
        &["train", "--lr", "0"],
        &["train", "--lr-decay", "0"],
        &["compare", "--arms", "msd,bogus"],
        &["sweep", "--samples", "1,2", "--ratios", "0.1,0.5"],
        &["bench", "--iterations", "10"],
        &["train", "--data", "cifar"],
    ] {
        // Bad flags go last so they win over the quick defaults.
        let out = msdrop(dir.path(), &[&bad[..1], &QUICK, &bad[1..]].concat());
        assert_eq!(out.status.code(), Some(3), "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [&["train"][..], &["train", "--seed", "1", "--bogus"], &["frobnicate"], &["train", "--seed", "x"]] {
        assert_eq!(msdrop(dir.path(), bad).status.code(), Some(2), "{bad:?}");
    }
}

#[test]
fn sample_sweep_has_one_arm_per_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(dir.path(), &[&["sweep", "--samples", "1,2,8,32", "--epochs", "1"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(arms(&stdout(&out)), ["msd:1", "msd:2", "msd:8", "msd:32"]);
}

#[test]
fn ratio_sweep_has_one_arm_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(
        dir.path(),
        &[&["sweep", "--samples", "2", "--ratios", "0.1,0.3,0.5,0.7,0.9", "--epochs", "1"][..], &QUICK].concat(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(arms(&stdout(&out)), ["msd-p0.1:2", "msd-p0.3:2", "msd-p0.5:2", "msd-p0.7:2", "msd-p0.9:2"]);
}

fn without_wall_ms(csv: &str) -> Vec<Vec<String>> {
    rows(csv)
        .into_iter()
        .map(|mut r| {
            r.remove(7);
            r
        })
        .collect()
}

#[test]
fn single_element_sweep_is_a_train_run() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = msdrop(dir.path(), &[&["sweep", "--samples", "4", "--epochs", "2"][..], &QUICK].concat());
    let train = msdrop(dir.path(), &[&["train", "--samples", "4", "--epochs", "2"][..], &QUICK].concat());
    assert_eq!(sweep.status.code(), Some(0));
    assert_eq!(train.status.code(), Some(0));
    assert_eq!(without_wall_ms(&stdout(&sweep)), without_wall_ms(&stdout(&train)));
}

#[test]
fn compare_runs_every_arm_with_dup_scaled_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(dir.path(), &[&["compare", "--samples", "3", "--epochs", "2"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = stdout(&out);
    assert_eq!(arms(&csv), ["msd:3", "dropout:1", "dup:3", "nodrop:1"]);
    assert_eq!(rows(&csv).len(), 8);
}

#[test]
fn config_file_sets_defaults_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.cfg"), "# quick run\nsamples=2\nepochs=3\nlr-decay = 0.5\n").unwrap();
    let out = msdrop(dir.path(), &[&["train", "--config", "run.cfg", "--epochs", "1"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&stdout(&out));
    assert_eq!(r.len(), 1, "explicit --epochs must win over the file");
    assert_eq!(r[0][3], "2");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lr-decay=0.5"));

    std::fs::write(dir.path().join("bad.cfg"), "nonsense-key=1\n").unwrap();
    let out = msdrop(dir.path(), &[&["train", "--config", "bad.cfg"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(3));
    let out = msdrop(dir.path(), &[&["train", "--config", "missing.cfg"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_cifar_directory_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let cifar = dir.path().join("cifar");
    std::fs::create_dir(&cifar).unwrap();
    for name in [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ] {
        std::fs::write(cifar.join(name), [3u8; 100]).unwrap();
    }
    let out = msdrop(dir.path(), &["train", "--data", "cifar", "--cifar-dir", "cifar", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).is_empty());
}

#[test]
fn weights_round_trip_through_train() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(dir.path(), &[&["train", "--epochs", "1", "--weights", "w.msdw"][..], &QUICK].concat());
    assert_eq!(out.status.code(), Some(0));
    let bytes = std::fs::read(dir.path().join("w.msdw")).unwrap();
    let mut net = msdrop::model::Network::mlp(&[3, 8, 8], 10, 16, 8, 0.3, 99).unwrap();
    msdrop::weights::load_into(&mut net, &bytes).unwrap();
    assert_eq!(msdrop::weights::encode_tensors(&msdrop::weights::network_tensors(&net)), bytes);
}

#[test]
fn gradcheck_and_equiv_pass() {
    let dir = tempfile::tempdir().unwrap();
    let g = msdrop(dir.path(), &["gradcheck"]);
    assert_eq!(g.status.code(), Some(0));
    assert!(!stdout(&g).contains("FAIL"));
    let e = msdrop(dir.path(), &["equiv", "--seed", "2", "--samples", "4", "--draws", "50"]);
    assert_eq!(e.status.code(), Some(0));
    assert!(stdout(&e).contains("failures=0"));
    let strict = msdrop(dir.path(), &["gradcheck", "--threshold", "1e-30"]);
    assert_eq!(strict.status.code(), Some(5));
}

#[test]
fn bench_prints_ratio_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = msdrop(
        dir.path(),
        &[&["bench", "--samples", "1", "--warmup", "1", "--iterations", "100", "--no-dup"][..], &QUICK].concat(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout(&out);
    assert!(table.starts_with("M,msd_ms,msd_ratio,dup_ms,dup_ratio\n1,"));
    assert!(table.contains(",1.0000,-,-"));
}
