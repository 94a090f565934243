use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use kpred_core::storage::{load_checkpoint, read_blob, write_blob, BlobData};
use kpred_core::{ArchConfig, NetBundle};
use tempfile::TempDir;

fn kpred(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kpred"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = kpred(dir, args);
    assert!(out.status.success(), "kpred {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, name: &str, value: serde_json::Value) {
    fs::write(dir.join(name), serde_json::to_string_pretty(&value).unwrap()).unwrap();
}

fn toy() -> serde_json::Value {
    serde_json::to_value(ArchConfig::toy()).unwrap()
}

fn gen_data(dir: &Path) {
    ok(
        dir,
        &["gen-data", "--family", "table", "--db", "5", "--train", "6", "--test", "3", "--points", "64", "--out", "data"],
    );
}

/// Dataset, one-epoch deformation and retrieval checkpoints, and a database.
fn pipeline() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        gen_data(root);
        let train = serde_json::json!({ "epochs": 1, "batch_size": 3 });
        write_config(root, "deform.json", serde_json::json!({ "data": "data", "out": "deform", "arch": toy(), "train": train }));
        write_config(
            root,
            "retrieval.json",
            serde_json::json!({ "data": "data", "out": "retrieval", "checkpoint": "deform/checkpoint", "train": train }),
        );
        ok(root, &["train-deform", "--config", "deform.json"]);
        ok(root, &["train-retrieval", "--config", "retrieval.json"]);
        ok(root, &["build-db", "--shapes", "data", "--bundle", "retrieval/checkpoint", "--out", "db"]);
        dir
    })
    .path()
}

#[test]
fn gen_data_counts_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    gen_data(dir.path());
    let first = fs::read(dir.path().join("data/manifest.json")).unwrap();
    gen_data(dir.path());
    assert_eq!(first, fs::read(dir.path().join("data/manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&first).unwrap();
    let shapes = manifest["shapes"].as_array().unwrap();
    assert_eq!(shapes.len(), 14);
    for (split, n) in [("database", 5), ("train", 6), ("test", 3)] {
        assert_eq!(shapes.iter().filter(|s| s["split"] == split).count(), n);
    }
    assert!(dir.path().join("data/config.lock.json").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let out = kpred(root, &["gen-data", "--family", "sofa", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    write_config(root, "typo.json", serde_json::json!({ "data": "d", "out": "o", "epochz": 3 }));
    assert_eq!(kpred(root, &["train-deform", "--config", "typo.json"]).status.code(), Some(2));

    write_config(root, "ret.json", serde_json::json!({ "data": "d", "out": "o" }));
    assert_eq!(kpred(root, &["train-retrieval", "--config", "ret.json"]).status.code(), Some(2));
    write_config(root, "part.json", serde_json::json!({ "data": "d", "out": "o", "checkpoint": "missing" }));
    assert_eq!(kpred(root, &["train-partial", "--config", "part.json"]).status.code(), Some(2));

    assert_eq!(kpred(root, &["red", "--target", "t.ply", "--db", "db", "--bundle", "b", "--out", "r"]).status.code(), Some(2));
}

#[test]
fn zero_epochs_write_initial_checkpoint_only() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    gen_data(root);
    write_config(root, "c.json", serde_json::json!({ "data": "data", "out": "run", "arch": toy(), "train": { "epochs": 0 } }));
    ok(root, &["train-deform", "--config", "c.json"]);
    let loaded = load_checkpoint(&root.join("run/checkpoint")).unwrap();
    assert_eq!(loaded, NetBundle::new(ArchConfig::toy()).unwrap());
    assert_eq!(fs::read_to_string(root.join("run/loss_deform.csv")).unwrap(), "epoch,step,L_sim,L_kpt,L_def\n");
    let lock: serde_json::Value = serde_json::from_slice(&fs::read(root.join("run/config.lock.json")).unwrap()).unwrap();
    assert_eq!(lock["command"], "train-deform");
    assert_eq!(lock["config"]["train"]["epochs"], 0);
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let root = pipeline();
    // 6 training shapes in batches of 3: two steps per epoch.
    let csv = fs::read_to_string(root.join("deform/loss_deform.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
    let csv = fs::read_to_string(root.join("retrieval/loss_retrieval.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,L_rec,L_defrec,L_ret\n"));
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn ablation_flags_must_match_checkpoint() {
    let root = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let cfg = serde_json::json!({
        "data": root.join("data"), "out": dir.path().join("o"),
        "checkpoint": root.join("deform/checkpoint"), "gsa": false,
    });
    write_config(dir.path(), "c.json", cfg);
    let out = kpred(dir.path(), &["train-retrieval", "--config", "c.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

fn result_json(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("result.json")).unwrap()).unwrap()
}

#[test]
fn red_on_database_shape_finds_itself() {
    let root = pipeline();
    let out = tempfile::tempdir().unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(root.join("data/manifest.json")).unwrap()).unwrap();
    let shape = manifest["shapes"].as_array().unwrap().iter().find(|s| s["split"] == "database").unwrap();
    let target = root.join("data").join(shape["points"].as_str().unwrap());
    let args = |k: &str, o: &Path| {
        vec![
            "red".to_string(),
            "--target".into(),
            target.display().to_string(),
            "--db".into(),
            "db".into(),
            "--bundle".into(),
            "retrieval/checkpoint".into(),
            "--topk".into(),
            k.into(),
            "--out".into(),
            o.display().to_string(),
        ]
    };
    let a = args("3", &out.path().join("k3"));
    ok(root, &a.iter().map(String::as_str).collect::<Vec<_>>());
    let r = result_json(&out.path().join("k3"));
    assert_eq!(r["best_id"], shape["id"]);
    assert!(r["best_metric"].as_f64().unwrap() < 1e-4, "{r}");
    let candidates = r["candidates"].as_array().unwrap();
    assert_eq!(candidates.len(), 3);
    for c in candidates {
        assert!(out.path().join("k3").join(c["obj"].as_str().unwrap()).is_file());
    }
    let best_of_k = candidates.iter().map(|c| c["metric"].as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    assert!(best_of_k <= candidates[0]["metric"].as_f64().unwrap());

    let a = args("1", &out.path().join("k1"));
    ok(root, &a.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(result_json(&out.path().join("k1"))["candidates"].as_array().unwrap().len(), 1);
}

fn read_eval(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn eval_summary_and_occlusion_sweep() {
    let root = pipeline();
    let out = tempfile::tempdir().unwrap();
    let plain = out.path().join("plain.csv");
    let sweep = out.path().join("sweep.csv");
    let common = ["eval", "--data", "data", "--db", "db", "--bundle", "retrieval/checkpoint", "--topk", "3"];
    ok(root, &[&common[..], &["--out", plain.to_str().unwrap()]].concat());
    ok(root, &[&common[..], &["--occlusion", "0", "0.5", "--out", sweep.to_str().unwrap()]].concat());

    let rows = read_eval(&plain);
    let best: Vec<f64> = rows.iter().filter(|r| r[5] == "1").map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(best.len(), 3);
    let summary: f64 = rows.last().unwrap()[4].parse().unwrap();
    assert_eq!(rows.last().unwrap()[0], "summary");
    assert!((summary - best.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert_eq!(rows.len(), 3 * 3 + 1);

    let swept = read_eval(&sweep);
    let summaries: Vec<_> = swept.iter().filter(|r| r[0].starts_with("summary")).map(|r| r[0].clone()).collect();
    assert_eq!(summaries, ["summary@g0", "summary@g0.5"]);
    // Occlusion 0 reproduces the plain evaluation row for row.
    for (a, b) in rows.iter().zip(&swept) {
        assert_eq!(format!("{}@g0", a[0]), b[0]);
        assert_eq!(a[1..], b[1..]);
    }
}

#[test]
fn build_db_verify_detects_tampering() {
    let root = pipeline();
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("db");
    ok(root, &["build-db", "--shapes", "data", "--bundle", "retrieval/checkpoint", "--out", db.to_str().unwrap(), "--verify"]);
    ok(root, &["build-db", "--bundle", "retrieval/checkpoint", "--out", db.to_str().unwrap(), "--verify"]);

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(db.join("manifest.json")).unwrap()).unwrap();
    let tokens = db.join(manifest["records"][0]["files"]["tokens"].as_str().unwrap());
    let mut blob = read_blob(&tokens).unwrap();
    if let BlobData::F64(v) = &mut blob.data {
        v[0] += 1e-6;
    }
    write_blob(&blob, &tokens).unwrap();
    let out = kpred(root, &["build-db", "--bundle", "retrieval/checkpoint", "--out", db.to_str().unwrap(), "--verify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("do not regenerate"));

    let other = kpred(root, &["build-db", "--bundle", "deform/checkpoint", "--out", db.to_str().unwrap(), "--verify"]);
    assert_eq!(other.status.code(), Some(2));
}
