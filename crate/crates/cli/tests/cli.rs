use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use instdisc::checkpoint::{encode, load_checkpoint, FORMAT_VERSION, MAGIC};
use instdisc::data::BlobSpec;
use instdisc::encoder::{Activation, EncoderConfig};
use instdisc::trainer::{TrainConfig, TrainState, METRIC_LOG_HEADER};

fn instdisc(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_instdisc"))
        .args(args)
        .env("INSTDISC_OUT", out)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_dir(o: &Output) -> PathBuf {
    let text = stdout(o);
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .unwrap_or_else(|| panic!("no run directory in output:\n{text}\n{}", stderr(o)));
    PathBuf::from(line)
}

fn top1(report: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix("top1"))
        .expect("top1 line")
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn zero_epochs_writes_the_initial_state() {
    let tmp = tempfile::tempdir().unwrap();
    let o = instdisc(tmp.path(), &["pretrain", "--dataset", "blobs", "--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dir(&o);
    let bytes = std::fs::read(dir.join("checkpoint.ckpt")).unwrap();

    let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let data = BlobSpec::default().generate().unwrap();
    let enc = EncoderConfig::new(vec![16, 32, 16], Activation::Relu, config.seed);
    let init = TrainState::new(&config, enc, data.instances()).unwrap();
    assert_eq!(bytes, encode(&init, &config));
    assert!(dir.join("resolved.cfg").exists());
}

#[test]
fn missing_dataset_path_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    for dataset in ["cifar10", "idx"] {
        let o = instdisc(tmp.path(), &["pretrain", "--dataset", dataset]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains("--dataset_path"), "{}", stderr(&o));
    }
}

#[test]
fn unknown_keys_and_bad_values_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["pretrain", "--epoch", "3"][..],
        &["pretrain", "--mode", "fast"][..],
        &["pretrain", "--epochs"][..],
        &["probe"][..],
    ] {
        let o = instdisc(tmp.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let o = instdisc(tmp.path(), &["pretrain", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn default_run_logs_every_epoch_and_probes_well() {
    let tmp = tempfile::tempdir().unwrap();
    let o = instdisc(tmp.path(), &["pretrain"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dir(&o);
    let log = std::fs::read_to_string(dir.join("metrics.log")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(METRIC_LOG_HEADER));
    let records: Vec<&str> = lines.collect();
    assert_eq!(records.len(), TrainConfig::default().epochs);

    let ckpt = dir.join("checkpoint.ckpt");
    let trained = instdisc(tmp.path(), &["probe", "--checkpoint", ckpt.to_str().unwrap(), "--knn", "5"]);
    assert!(trained.status.success(), "{}", stderr(&trained));
    let report = stdout(&trained);
    assert!(top1(&report) >= 0.95, "{report}");
    assert!(report.contains("knn k=5"), "{report}");
    let log = std::fs::read_to_string(dir.join("metrics.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("# top1")));
}

fn probe_top1(out: &Path, pretrain_args: &[&str]) -> f64 {
    let run = instdisc(out, pretrain_args);
    assert!(run.status.success(), "{}", stderr(&run));
    let ckpt = run_dir(&run).join("checkpoint.ckpt");
    let probe = instdisc(out, &["probe", "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(probe.status.success(), "{}", stderr(&probe));
    top1(&stdout(&probe))
}

/// Paired seeded runs: the untrained checkpoint probes strictly worse in at
/// least two of three seeds, and never better.
#[test]
fn fresh_checkpoint_probes_below_trained() {
    let tmp = tempfile::tempdir().unwrap();
    let mut strict = 0;
    for seed in ["0", "1", "2"] {
        let trained = probe_top1(tmp.path(), &["pretrain", "--seed", seed]);
        let fresh = probe_top1(tmp.path(), &["pretrain", "--seed", seed, "--epochs", "0"]);
        println!("seed {seed}: fresh {fresh:.4} trained {trained:.4}");
        assert!(fresh <= trained, "seed {seed}: fresh {fresh} above trained {trained}");
        strict += usize::from(fresh < trained);
    }
    assert!(strict >= 2, "fresh strictly below trained in only {strict} of 3 seeds");
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = instdisc(tmp.path(), &["pretrain", "--epochs", "3", "--lambda", "5", "--seed", "4"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let dir = run_dir(&first);
    let cfg = dir.join("resolved.cfg");
    let second = instdisc(tmp.path(), &["pretrain", "--config", cfg.to_str().unwrap()]);
    assert!(second.status.success(), "{}", stderr(&second));
    let dir2 = run_dir(&second);
    assert_ne!(dir, dir2);
    assert_eq!(
        std::fs::read(dir.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(dir2.join("checkpoint.ckpt")).unwrap()
    );
    let loaded = load_checkpoint(&dir2.join("checkpoint.ckpt")).unwrap();
    assert_eq!(loaded.config.lambda, 5.0);
    assert_eq!(loaded.config.seed, 4);
}

#[test]
fn command_line_beats_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "epochs = 2\nbank_momentum = 0.7\n").unwrap();
    let o = instdisc(tmp.path(), &["pretrain", "--config", cfg.to_str().unwrap(), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = std::fs::read_to_string(run_dir(&o).join("resolved.cfg")).unwrap();
    assert!(resolved.contains("epochs = 1\n"));
    assert!(resolved.contains("bank_momentum = 0.7\n"));
}

#[test]
fn probe_rejects_mismatched_or_foreign_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let o = instdisc(tmp.path(), &["pretrain", "--epochs", "0"]);
    let ckpt = run_dir(&o).join("checkpoint.ckpt");
    let ckpt_arg = ckpt.to_str().unwrap();
    let mismatch = instdisc(tmp.path(), &["probe", "--checkpoint", ckpt_arg, "--blobs_dim", "8"]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(stderr(&mismatch).contains("dim 8"), "{}", stderr(&mismatch));

    let mut bytes = std::fs::read(&ckpt).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let future = tmp.path().join("future.ckpt");
    std::fs::write(&future, &bytes).unwrap();
    let o = instdisc(tmp.path(), &["probe", "--checkpoint", future.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_the_negative_control_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = instdisc(tmp.path(), &["gradcheck"]);
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let text = stdout(&ok);
    let max: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("max relative error: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(max <= 1e-6);
    assert!(text.contains("u = {0.5145, 0.0539"), "{text}");

    let broken = instdisc(tmp.path(), &["gradcheck", "--break-sqrtkl"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stderr(&broken).contains("sqrtkl"), "{}", stderr(&broken));
}

#[test]
fn ablate_emits_grid_and_sweeps() {
    let tmp = tempfile::tempdir().unwrap();
    let o = instdisc(tmp.path(), &["ablate", "--epochs", "2", "--probe_epochs", "3", "--activation", "tanh"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let count = |block: &str| text.lines().filter(|l| l.starts_with(block)).count();
    assert_eq!(count("grid "), 8);
    assert_eq!(count("m "), 6);
    assert_eq!(count("lambda "), 6);

    let base = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let hash = base.npid_baseline().config_hash();
    let all_off = text
        .lines()
        .find(|l| l.contains("calibrate=off grad_update=off sqrtkl=off"))
        .unwrap();
    assert!(all_off.ends_with(&hash[..12]), "{all_off} vs {hash}");
    assert!(run_dir(&o).join("ablation.txt").exists());
}
