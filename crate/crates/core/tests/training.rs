//! Training loop and CLI behaviour.

use std::path::Path;
use std::process::Command;

use fwdgrad::data::{default_mnist_dir, Dataset, Split};
use fwdgrad::losses::one_hot;
use fwdgrad::mixer::{InputShape, MixerConfig, MixerParams, Preset};
use fwdgrad::trainer::{train, Algo, Timing, TrainConfig, Trainer};
use fwdgrad::{RngStream, Tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fwdgrad"))
}

/// Ten random "digit" prototypes plus noise, as 28x28 images.
fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut proto_rng = RngStream::new(99, 0);
    let protos: Tensor<f32> = proto_rng.uniform_tensor([10, 784], 1.0);
    let mut rng = RngStream::new(seed, 1);
    let labels: Vec<u8> = (0..n).map(|_| rng.below(10) as u8).collect();
    let images = Tensor::from_fn([n, 28, 28, 1], |i| {
        let v = protos.data()[labels[i / 784] as usize * 784 + i % 784].abs() + 0.3 * rng.normal() as f32;
        v.clamp(0.0, 1.0)
    });
    Dataset { images, labels, classes: 10, split: Split::Train }
}

#[test]
fn single_loss_preset_gives_identical_trajectories_for_both_activity_algorithms() {
    let data = synthetic(64, 0);
    let mixer = MixerConfig::preset(Preset::S1_1, InputShape::MNIST);
    let images = data.images.map(|v| (v - 0.1307) / 0.3081);
    let labels = one_hot::<f32>(&data.labels, 10);
    let run = |algo| {
        let cfg = TrainConfig { algo, seed: 3, ..Default::default() };
        let mut t = Trainer::new(cfg, &mixer, 20).unwrap();
        for _ in 0..20 {
            t.train_step(&images, &labels).unwrap();
        }
        t.params
    };
    assert_eq!(run(Algo::FgA), run(Algo::LgFgA));
    assert_eq!(run(Algo::FgW), run(Algo::LgFgW));
}

#[test]
fn multi_group_preset_separates_global_and_local_estimators() {
    let data = synthetic(16, 0);
    let mixer = MixerConfig::preset(Preset::M1_16, InputShape::MNIST);
    let images = data.images.clone();
    let labels = one_hot::<f32>(&data.labels, 10);
    let step = |algo| {
        let mut t = Trainer::new(TrainConfig { algo, ..Default::default() }, &mixer, 1).unwrap();
        t.train_step(&images, &labels).unwrap();
        t.params
    };
    assert_ne!(step(Algo::FgA).blocks, step(Algo::LgFgA).blocks);
}

#[test]
fn training_is_reproducible() {
    let (tr, te) = (synthetic(256, 0), synthetic(128, 1));
    let cfg = TrainConfig { algo: Algo::LgFgA, epochs: 2, batch_size: 32, ..Default::default() };
    let a = train(&cfg, &tr, &te, InputShape::MNIST, Timing::Off, |_| {}).unwrap();
    let b = train(&cfg, &tr, &te, InputShape::MNIST, Timing::Off, |_| {}).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.params, b.params);
}

#[test]
fn every_algorithm_learns_the_synthetic_task() {
    let (tr, te) = (synthetic(512, 0), synthetic(256, 1));
    for algo in Algo::ALL {
        let cfg = TrainConfig { algo, epochs: 3, batch_size: 32, ..Default::default() };
        let out = train(&cfg, &tr, &te, InputShape::MNIST, Timing::Off, |_| {}).unwrap();
        assert!(out.final_test_err < 60.0, "{algo}: {}", out.final_test_err);
        assert_eq!(out.records.len(), 3);
    }
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, te) = (synthetic(64, 0), synthetic(32, 1));
    let cfg = TrainConfig {
        algo: Algo::Bp,
        epochs: 4,
        batch_size: 32,
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..Default::default()
    };
    let out = train(&cfg, &tr, &te, InputShape::MNIST, Timing::Off, |_| {}).unwrap();
    let last = MixerParams::<f32>::load(&dir.path().join("epoch0004.ckpt")).unwrap();
    assert_eq!(last, out.params);
    assert!(dir.path().join("epoch0002.ckpt").is_file());
    assert!(!dir.path().join("epoch0003.ckpt").exists());
}

fn mnist() -> Option<std::path::PathBuf> {
    let d = default_mnist_dir();
    if d.is_none() {
        eprintln!("MNIST not available; skipping");
    }
    d
}

fn cli_train(data: &Path, out: &Path, extra: &[&str]) -> std::process::Output {
    bin()
        .args(["train", "--model", "s1-1", "--train-limit", "2000", "--test-limit", "500", "--timing", "off", "--quiet"])
        .args(["--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn cli_train_writes_metrics_and_a_loadable_checkpoint() {
    let Some(data) = mnist() else { return };
    let dir = tempfile::tempdir().unwrap();
    let out = cli_train(&data, &dir.path().join("run"), &["--algo", "bp", "--epochs", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_err,test_err,loss,lr,seconds");
    assert_eq!(lines.len(), 6);
    let train_err: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(train_err.windows(2).all(|w| w[1] <= w[0]), "{train_err:?}");

    let eval = bin()
        .args(["eval", "--checkpoint", dir.path().join("run/final.ckpt").to_str().unwrap(), "--data-dir", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(eval.status.success());
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.starts_with("test error") && text.contains("10000 examples"), "{text}");
}

#[test]
fn cli_runs_with_the_same_seed_produce_identical_files() {
    let Some(data) = mnist() else { return };
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = cli_train(&data, &dir.path().join(name), &["--algo", "lg-fg-a", "--epochs", "2", "--seed", "7"]);
        assert!(out.status.success());
    }
    for file in ["metrics.csv", "final.ckpt"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs");
    }
}

#[test]
fn cli_exit_codes() {
    assert_eq!(bin().args(["train", "--algo", "unknown"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["eval", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(bin().args(["grad-check", "--trials", "3", "--inject-fault"]).output().unwrap().status.code(), Some(2));
    assert_eq!(bin().args(["grad-check", "--trials", "3", "--double"]).output().unwrap().status.code(), Some(0));
}

#[test]
fn variance_sim_batch_axis_has_thirteen_rows_per_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("v.csv");
    let out = bin()
        .args(["variance-sim", "--axis", "N", "--max", "4096", "--trials", "1000", "--work-budget", "0", "--oracle-samples", "2000"])
        .args(["--out", csv.to_str().unwrap()])
        .output()
        .unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 13 * 5);
    for est in ["g_w,shared", "g_w,independent", "g_a,shared", "g_a,independent", "bp,none"] {
        assert_eq!(text.lines().filter(|l| l.starts_with(est)).count(), 13, "{est}");
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("max relative error"));
}
