//! End-to-end checks of the `hvae-ood` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hvae_cli::checkpoint::{file_sha256, Checkpoint};
use hvae_cli::commands::{LogRecord, MiRecord, PlanRecord};
use hvae_cli::report::{read_json, read_report_csv, Heatmap, Report, CSV_HEADER};
use hvae_core::datasets::{load_idx, synthesize, write_idx, Generator};
use hvae_core::hvae::HvaeParams;
use hvae_core::numerics::SeededRng;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hvae-ood")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    o
}

const RUN_TOML: &str = r#"
[allocation]
budget = 16
depth = 3
ratio = 0.5

[model]
hidden_width = 16

[train]
epochs = EPOCHS
batch = 64
seed = 4

[data.train]
synthetic = { generator = "blobs", n = 256, shape = [8, 8, 1], seed = 1 }

[data.id]
synthetic = { generator = "blobs", n = 64, shape = [8, 8, 1], seed = 2 }
"#;

fn write_config(dir: &Path, epochs: usize) -> PathBuf {
    let path = dir.join(format!("run-{epochs}.toml"));
    fs::write(&path, RUN_TOML.replace("EPOCHS", &epochs.to_string())).unwrap();
    path
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, 2);
    let out = dir.join("model.hvck");
    ok(run(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--log", dir.join("log").to_str().unwrap()]));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn allocate_prints_plans_and_records() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stdout(&ok(run(&["allocate", "--budget", "32", "--depth", "3", "--ratio", "0.75"]))).trim(), "14 10 8");
    assert_eq!(stdout(&ok(run(&["allocate", "--control", "grayscale:Stable"]))).trim(), "10 11 11");
    let record = dir.path().join("plan.json");
    let o = ok(run(&["allocate", "--budget", "224", "--depth", "3", "--ratio", "0.5", "--record", s(&record)]));
    assert_eq!(stdout(&o).trim(), "128 64 32");
    let plan: PlanRecord = read_json(&record).unwrap();
    assert_eq!((plan.dims, plan.label.as_str(), plan.budget), (vec![128, 64, 32], "128-64-32", 224));

    assert_eq!(run(&["allocate", "--budget", "32"]).status.code(), Some(2));
    assert_eq!(run(&["allocate", "--budget", "2", "--depth", "3", "--ratio", "0.5"]).status.code(), Some(2));
    assert_eq!(run(&["allocate", "--control", "nope:Nothing"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_logs_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2);
    let (a, b) = (dir.path().join("a.hvck"), dir.path().join("b.hvck"));
    let log = dir.path().join("train.log");
    ok(run(&["train", "--config", s(&cfg), "--out", s(&a), "--log", s(&log)]));
    ok(run(&["train", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let lines: Vec<LogRecord> = fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, rec) in lines.iter().enumerate() {
        assert_eq!(rec.epoch, i + 1);
        assert_eq!(rec.kl.len(), 3);
        assert!(rec.elbo.is_finite());
    }
    let ck = Checkpoint::load(&a).unwrap();
    assert_eq!(ck.header.epoch, 2);
    assert_eq!(ck.header.allocation.as_ref().unwrap().label, "9-5-2");
}

#[test]
fn zero_epochs_checkpoints_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0);
    let out = dir.path().join("init.hvck");
    let o = ok(run(&["train", "--config", s(&cfg), "--out", s(&out)]));
    assert!(stdout(&o).is_empty());
    let ck = Checkpoint::load(&out).unwrap();
    let fresh = HvaeParams::build(&ck.header.model, &mut SeededRng::new(4)).unwrap();
    assert_eq!(ck.params().unwrap(), fresh);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full.hvck");
    ok(run(&["train", "--config", s(&write_config(dir.path(), 3)), "--out", s(&full)]));
    let part = dir.path().join("part.hvck");
    ok(run(&["train", "--config", s(&write_config(dir.path(), 1)), "--out", s(&part)]));
    // same seed, longer schedule: continue from epoch 1
    ok(run(&["train", "--config", s(&write_config(dir.path(), 3)), "--out", s(&part), "--resume"]));
    let (a, b) = (Checkpoint::load(&full).unwrap(), Checkpoint::load(&part).unwrap());
    assert_eq!(a.tensors, b.tensors);
    assert_eq!(a.header.history, b.header.history);
}

#[test]
fn bad_configs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, RUN_TOML.replace("EPOCHS", "1").replace("batch = 64", "batch = 64\nlearning_rate = 0.1")).unwrap();
    let o = run(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("x.hvck"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = run(&["train", "--config", s(&dir.path().join("missing.toml")), "--out", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_emits_matching_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let out = dir.path().join("report");
    let o = ok(run(&[
        "eval",
        "--checkpoint",
        s(&model),
        "--id",
        "synth:blobs:40:8x8x1:7",
        "--ood",
        "synth:stripes:30:8x8x1:8",
        "--ood",
        "synth:noise:30:8x8x1:9",
        "--samples",
        "4",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]));
    let text = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(text.lines().next().unwrap(), "config,ood,auroc,auprc,fpr80,fpr95,mean,n_id,n_ood,seed");
    assert_eq!(stdout(&o), text);

    let rows = read_report_csv(&out.join("report.csv")).unwrap();
    let report: Report = read_json(&out.join("report.json")).unwrap();
    assert_eq!(rows, report.rows);
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0].ood.as_str(), rows[1].ood.as_str()), ("stripes", "noise"));
    assert!(rows.iter().all(|r| r.config == "9-5-2" && r.n_id == 40 && r.n_ood == 30 && r.seed == 3));
    assert_eq!(report.provenance.checkpoint_sha256, file_sha256(&model).unwrap());
    assert_eq!(report.provenance.k, 2);
}

#[test]
fn identical_id_and_ood_files_do_not_separate() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let data = synthesize(Generator::Blobs, [8, 8, 1], 500, 11).unwrap();
    let (a, b) = (dir.path().join("a-idx3-ubyte"), dir.path().join("b-idx3-ubyte"));
    write_idx(&data, &a, false).unwrap();
    fs::copy(&a, &b).unwrap();
    let out = dir.path().join("null");
    ok(run(&["eval", "--checkpoint", s(&model), "--id", s(&a), "--ood", s(&b), "--samples", "4", "--out", s(&out)]));
    let rows = read_report_csv(&out.join("report.csv")).unwrap();
    assert!((0.45..=0.55).contains(&rows[0].auroc), "{}", rows[0].auroc);
    let report: Report = read_json(&out.join("report.json")).unwrap();
    assert_eq!(report.provenance.id.sha256, report.provenance.ood[0].sha256);
    assert_eq!(report.provenance.id.sha256, hvae_cli::checkpoint::file_sha256(&a).unwrap());
}

#[test]
fn eval_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let base = ["eval", "--checkpoint", s(&model), "--id", "synth:blobs:10:8x8x1:1", "--ood", "synth:noise:10:8x8x1:2"];
    let with = |extra: &[&str]| run(&[&base[..], extra].concat());
    assert_eq!(with(&["--k", "4"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--checkpoint", s(&model), "--id", "synth:blobs:10:8x8x1:1"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--checkpoint", s(&model), "--id", "synth:blobs:10:4x4x1:1", "--ood", "synth:noise:10:4x4x1:2"]).status.code(), Some(1));

    let mut bytes = fs::read(&model).unwrap();
    bytes.truncate(bytes.len() - 8);
    fs::write(&model, bytes).unwrap();
    let o = with(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("payload length mismatch"));
}

#[test]
fn mi_records_and_sample_scaling() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let mi = |samples: &str| -> MiRecord {
        let o = ok(run(&["mi", "--checkpoint", s(&model), "--data", "synth:blobs:200:8x8x1:5", "--layer", "3", "--samples", samples, "--inputs", "200"]));
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let (small, large) = (mi("4"), mi("8"));
    assert_eq!((small.estimate.layer, small.estimate.samples_per_input, small.estimate.inputs_used), (3, 4, 200));
    assert!(large.estimate.std_error < small.estimate.std_error);
    assert_eq!(small.checkpoint_sha256, file_sha256(&model).unwrap());

    for layer in ["0", "4"] {
        let o = run(&["mi", "--checkpoint", s(&model), "--data", "synth:blobs:10:8x8x1:5", "--layer", layer]);
        assert_eq!(o.status.code(), Some(2), "layer {layer}");
    }
}

#[test]
fn recon_writes_idx() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let out = dir.path().join("recon-idx3-ubyte");
    let o = ok(run(&["recon", "--checkpoint", s(&model), "--data", "synth:blobs:20:8x8x1:5", "--k", "1", "--n", "6", "--out", s(&out)]));
    let rec: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(rec["n"], 6);
    assert!(rec["mse"].as_f64().unwrap() >= 0.0);
    let ds = load_idx(&out, None).unwrap();
    assert_eq!((ds.len(), ds.image_shape()), (6, [8, 8, 1]));
    assert_eq!(run(&["recon", "--checkpoint", s(&model), "--data", "synth:blobs:20:8x8x1:5", "--k", "4"]).status.code(), Some(2));
}

const SWEEP_TOML: &str = r#"
[sweep]
budget = 32
depth = 3
seeds = 1
controls = ["grayscale:Stable"]

[model]
hidden_width = 8

[train]
epochs = 1
batch = 64

[eval]
importance_samples = 2
eval_samples = 30

[data.train]
synthetic = { generator = "blobs", n = 128, shape = [8, 8, 1], seed = 1 }

[data.id]
synthetic = { generator = "blobs", n = 30, shape = [8, 8, 1], seed = 2 }

[[data.ood]]
OOD
"#;

#[test]
fn sweep_aggregates_grid_and_controls() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(&cfg, SWEEP_TOML.replace("OOD", r#"synthetic = { generator = "stripes", n = 30, shape = [8, 8, 1], seed = 3 }"#)).unwrap();
    let out = dir.path().join("out");
    let o = ok(run(&["sweep", "--config", s(&cfg), "--out", s(&out), "--jobs", "2"]));
    let h: Heatmap = read_json(&out.join("heatmap.json")).unwrap();
    let names: Vec<&str> = h.rows.iter().map(|r| r.config.as_str()).collect();
    assert_eq!(names, ["28-3-1", "24-6-2", "18-9-5", "14-10-8", "10-11-11"]);
    assert_eq!(h.rows[4].ratio, None);
    assert!(h.r_star.is_some() && h.failures.is_empty());
    let csv = fs::read_to_string(out.join("heatmap.csv")).unwrap();
    assert!(stdout(&o).starts_with(&csv));
    assert!(out.join("18-9-5/seed-0/model.hvck").exists());
    assert!(out.join("18-9-5/seed-0/report.csv").exists());
}

#[test]
fn sweep_records_failed_cells_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    fs::write(&cfg, SWEEP_TOML.replace("OOD", r#"images = "missing-idx3-ubyte""#)).unwrap();
    let out = dir.path().join("out");
    let o = run(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("5 of 5 sweep cells failed"));
    let h: Heatmap = read_json(&out.join("heatmap.json")).unwrap();
    assert_eq!(h.failures.len(), 5);
    assert!(h.rows.is_empty() && h.r_star.is_none());
}
