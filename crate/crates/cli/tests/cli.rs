use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use acpc_core::data::read_dataset;
use acpc_core::eval::{read_similarity, EvalReport};

fn acpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acpc")).args(args).output().expect("spawn acpc")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY_DATA: &str = "\
channels = 2
sequences_per_channel = 8
length = 512
template_scale = 0.5
data_seed = 4
";

fn tiny_run(dir: &Path, data: &Path) -> String {
    format!(
        "loss = acpc\npredictions = 2\nwindow = 4\nnegatives = 4\ndim = 8\nhidden = 8\n\
         batch_size = 4\ngroups = 2\nepochs = 2\neval_every = 1\neval_sequences = 2\n\
         data = {}\nout_dir = {}\n",
        data.display(),
        dir.join("run").display()
    )
}

/// Generates a tiny dataset and trains on it; returns (dataset, checkpoint).
fn trained(dir: &Path) -> (String, String) {
    let spec = dir.join("gen.cfg");
    fs::write(&spec, TINY_DATA).unwrap();
    let data = dir.join("data.bin");
    ok(&acpc(&["gen", "--spec", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]));
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, tiny_run(dir, &data)).unwrap();
    let stdout = ok(&acpc(&["train", "--config", cfg.to_str().unwrap()]));
    assert!(stdout.contains("8 steps over 2 epochs"), "{stdout}");
    let ckpt = dir.join("run").join("checkpoint.bin");
    (data.to_str().unwrap().to_string(), ckpt.to_str().unwrap().to_string())
}

#[test]
fn gen_writes_a_readable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("gen.cfg");
    fs::write(&spec, TINY_DATA).unwrap();
    let out = dir.path().join("d.bin");
    ok(&acpc(&["gen", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let data = read_dataset(&out).unwrap();
    assert_eq!(data.len(), 16);
    assert_eq!(fs::metadata(&out).unwrap().len() as usize, data.encoded_len());
    assert_eq!(&fs::read(&out).unwrap()[..8], b"ACPCDS01");
}

#[test]
fn gen_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("gen.cfg");
    fs::write(&spec, "alphabett = 3\n").unwrap();
    let out = acpc(&["gen", "--spec", spec.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alphabett"));
}

#[test]
fn train_eval_and_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let metrics = fs::read_to_string(dir.path().join("run").join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,wall_ms,loss,metric,value\n"));
    assert_eq!(metrics.lines().filter(|l| l.contains("probe_accuracy_val")).count(), 2);

    let csv = dir.path().join("eval.csv");
    let hist = dir.path().join("hist");
    let stdout = ok(&acpc(&[
        "eval", "--ckpt", &ckpt, "--data", &data, "--out", csv.to_str().unwrap(),
        "--histograms", hist.to_str().unwrap(),
    ]));
    assert!(stdout.contains("probe_accuracy"));
    let report = EvalReport::from_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    for (name, split) in [("probe_accuracy", "val"), ("nmi_k16", "latent"), ("abx_error", "across"), ("stride_periodicity", "latent")] {
        assert!(report.get(name, split).is_some(), "missing {name}/{split}");
    }
    assert!(fs::read_dir(&hist).unwrap().count() >= 2);

    let sim = dir.path().join("sim.bin");
    ok(&acpc(&["export-sim", "--ckpt", &ckpt, "--data", &data, "--out", sim.to_str().unwrap(), "--count", "3"]));
    let mats = read_similarity(&sim).unwrap();
    assert_eq!(mats.len(), 3);
    assert_ne!(mats[0].channel, mats[1].channel);
    assert!(mats.iter().all(|m| m.values.len() == m.size * m.size && !m.boundaries.is_empty()));
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let out = acpc(&[
        "eval", "--ckpt", missing.to_str().unwrap(), "--data", "also-missing.bin",
        "--out", dir.path().join("e.csv").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: checkpoint"), "{err}");
    assert!(!err.contains("panicked"));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.bin");
    fs::write(&bad, b"NOTACKPTxxxxxxxx").unwrap();
    let out = acpc(&["eval", "--ckpt", bad.to_str().unwrap(), "--data", "d", "--out", "e"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn oracle_suite_passes() {
    let stdout = ok(&acpc(&["oracle"]));
    assert!(!stdout.contains("FAIL"), "{stdout}");
    assert!(stdout.contains("oracles passed"));
}

#[test]
fn bench_reports_both_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.cfg");
    fs::write(&cfg, "negatives = 16\nlatents = 40\nrepeats = 1\nbatch_size = 2\n").unwrap();
    let stdout = ok(&acpc(&["bench", "--config", cfg.to_str().unwrap()]));
    assert!(stdout.contains("acpc") && stdout.contains("cpc"), "{stdout}");
}
