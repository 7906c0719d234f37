use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mrsr::experiment::{ExperimentConfig, Subset};
use mrsr::model::SuperResolver;
use mrsr::training::{load_generator, read_log};
use mrsr::{Provenance, SliceImage};
use ndarray::Array2;

fn mrsr(out: &Path, args: &[&str]) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_mrsr"))
        .arg("--output-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs");
    eprintln!(
        "$ mrsr {}\n{}{}",
        args.join(" "),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = mrsr(out, args);
    assert!(
        o.status.success(),
        "mrsr {args:?} failed with {:?}",
        o.status
    );
    String::from_utf8(o.stdout).unwrap()
}

fn dir_snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.clone(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn toy_config(out: &Path, extra: &[&str]) -> ExperimentConfig {
    let json = ok(out, &[extra, &["config"]].concat());
    let path = out.with_extension("config.json");
    fs::write(&path, json).unwrap();
    ExperimentConfig::load(&path).unwrap()
}

#[test]
fn prepare_is_idempotent_and_splits_by_patient() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&out, &["prepare"]);
    let prepared = out.join("prepared");
    let first = dir_snapshot(&prepared);
    assert!(!first.is_empty());
    ok(&out, &["prepare"]);
    assert_eq!(dir_snapshot(&prepared), first);

    let cfg = toy_config(&out, &[]);
    let train = mrsr::experiment::load_slices(&cfg, Subset::Train).unwrap();
    let test = mrsr::experiment::load_slices(&cfg, Subset::Test).unwrap();
    assert!(!train.is_empty() && !test.is_empty());
    let patients = |s: &[SliceImage]| {
        s.iter()
            .map(|x| x.provenance().volume_id.clone())
            .collect::<std::collections::BTreeSet<_>>()
    };
    assert!(patients(&train).is_disjoint(&patients(&test)));
    assert_eq!(patients(&train).len(), 2);
}

#[test]
fn zero_epoch_training_writes_checkpoint_and_header_only_log() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&out, &["prepare"]);
    ok(
        &out,
        &[
            "train",
            "--pretrain-epochs",
            "0",
            "--adversarial-epochs",
            "0",
        ],
    );
    let cfg = toy_config(&out, &[]);
    assert!(cfg.checkpoint_dir().join("latest.ckpt").exists());
    let (headers, records) = read_log(&cfg.log_path()).unwrap();
    assert_eq!(headers.len(), 1);
    assert!(records.is_empty());
}

#[test]
fn short_toy_training_logs_every_epoch() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&out, &["prepare"]);
    let stdout = ok(
        &out,
        &[
            "train",
            "--pretrain-epochs",
            "2",
            "--adversarial-epochs",
            "1",
        ],
    );
    assert!(stdout.contains("trained 2 pretrain + 1 adversarial epochs"));
    let cfg = toy_config(&out, &[]);
    let (_, records) = read_log(&cfg.log_path()).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.g_loss.is_finite()));
}

#[test]
fn paper_profile_echoes_published_hyperparameters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = toy_config(&out, &["--profile", "paper"]);
    assert_eq!(cfg.train.batch_size, 16);
    assert_eq!(cfg.train.learning_rate, 1e-4);
    assert_eq!(cfg.train.beta1, 0.9);
    assert_eq!(cfg.train.pretrain_epochs, 20);
    assert_eq!(cfg.train.adversarial_epochs, 50);
    assert_eq!(cfg.generator.base_channels, 64);
    assert_eq!(cfg.generator.num_residual_blocks, 16);
    assert_eq!(cfg.data.hr_height, 224);
}

#[test]
fn sr_enlarges_an_image_and_rejects_a_mismatched_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let iso8 = ["--experiment", "iso8"];
    ok(&out, &[&iso8[..], &["prepare"]].concat());
    ok(
        &out,
        &[
            &iso8[..],
            &[
                "train",
                "--pretrain-epochs",
                "0",
                "--adversarial-epochs",
                "0",
            ],
        ]
        .concat(),
    );
    let ckpt = out.join("checkpoints").join("latest.ckpt");
    assert_eq!(load_generator(&ckpt).unwrap().factors(), (8, 8));

    let lr = Array2::from_shape_fn((28, 28), |(y, x)| ((y + x) % 7) as f64 / 6.0);
    let input = tmp.path().join("lr.png");
    SliceImage::new(lr, Provenance::synthetic(0))
        .unwrap()
        .save_png(&input)
        .unwrap();
    let sr_path = tmp.path().join("sr.png");
    let args = [
        "sr",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        sr_path.to_str().unwrap(),
    ];
    ok(&out, &[&iso8[..], &args[..]].concat());
    assert_eq!(SliceImage::load_png(&sr_path).unwrap().dim(), (224, 224));

    let o = mrsr(&out, &[&["--experiment", "iso4"][..], &args[..]].concat());
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("checkpoint upscales"), "{stderr}");
}

#[test]
fn evaluate_reports_baselines_and_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    ok(&out, &["prepare"]);
    let table = ok(&out, &["evaluate"]);
    assert!(table.contains("4x Bicubic (Iso)"));
    assert!(table.contains("8x Bicubic (Aniso)"));
    assert!(out.join("evaluate").join("report.json").exists());

    let table = ok(&out, &["evaluate", "--identity"]);
    assert!(table.contains("Identity (HR)"));
    let json = fs::read_to_string(out.join("evaluate").join("report.json")).unwrap();
    let report: mrsr::metrics::MetricsReport = serde_json::from_str(&json).unwrap();
    let row = report.row("Identity (HR)").unwrap();
    assert_eq!(row.mean_ssim, 1.0);
    assert_eq!(row.mean_psnr_db, None);
}

#[test]
fn invalid_config_exits_with_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut cfg = toy_config(&out, &[]);
    cfg.train.batch_size = 0;
    let path = tmp.path().join("bad.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let o = mrsr(&out, &["--config", path.to_str().unwrap(), "config"]);
    assert_eq!(o.status.code(), Some(1));

    fs::write(&path, "{ not json").unwrap();
    let o = mrsr(&out, &["--config", path.to_str().unwrap(), "prepare"]);
    assert_eq!(o.status.code(), Some(1));

    let o = mrsr(&out, &["--experiment", "iso3", "config"]);
    assert_eq!(o.status.code(), Some(1));
}
