use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn mlsnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlsnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn experiment(dir: &Path, name: &str, topology: &str, epochs: usize, extra: Value) -> PathBuf {
    let mut cfg = json!({
        "model": {"topology": topology, "input_shape": [1, 8, 8], "classes": 4, "T": 2, "N": 2, "width": 4},
        "dataset": {"format": "synthetic", "samples": 48, "noise": 0.1},
        "validation": 16,
        "optimizer": {"kind": "adam", "lr": 0.01},
        "epochs": epochs,
        "batch_size": 16,
        "seed": 3,
        "out_dir": name,
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn avalanche_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&mlsnn(dir.path(), &["--out", "o", "avalanche", "--gamma", "100", "--depth", "3"]));
    assert_eq!(out, "depth,events\n0,100\n1,200\n2,400\n3,800\n");
    assert_eq!(fs::read_to_string(dir.path().join("o/avalanche.csv")).unwrap(), out);
    let zero = ok(&mlsnn(dir.path(), &["--out", "o", "avalanche", "--gamma", "0", "--depth", "2"]));
    assert_eq!(zero, "depth,events\n0,0\n1,0\n2,0\n");
}

#[test]
fn quantscan_staircase() {
    let dir = tempfile::tempdir().unwrap();
    ok(&mlsnn(dir.path(), &["--out", "q", "quantscan", "-n", "4", "-t", "2", "--from", "-0.5", "--to", "1.2"]));
    let rows = csv_rows(&dir.path().join("q/quantscan.csv"));
    assert_eq!(rows.len(), 500);
    let mut levels = Vec::new();
    for r in &rows {
        let (x, d): (f32, f32) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        if x < 0.0 {
            assert_eq!(d, 0.0);
        }
        if x >= 1.0 {
            assert_eq!(d, 1.0);
        }
        if !levels.contains(&d) {
            levels.push(d);
        }
    }
    assert_eq!(levels.len(), 9);

    let bad = mlsnn(dir.path(), &["--out", "q2", "quantscan", "--steps", "1"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("q2").exists());
}

#[test]
fn train_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let a = experiment(dir.path(), "a", "vgg-small", 3, json!({}));
    let b = experiment(dir.path(), "b", "vgg-small", 3, json!({}));
    ok(&mlsnn(dir.path(), &["--config", a.to_str().unwrap(), "train"]));
    ok(&mlsnn(dir.path(), &["--config", b.to_str().unwrap(), "train"]));
    let ma = fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    assert_eq!(ma, fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap());
    assert!(ma.starts_with("epoch,loss,train_acc,val_acc,total_events\n"));
    assert_eq!(ma.lines().count(), 4);

    // two epochs, then one more from the saved state
    let c2 = experiment(dir.path(), "c", "vgg-small", 2, json!({}));
    ok(&mlsnn(dir.path(), &["--config", c2.to_str().unwrap(), "train"]));
    let c3 = experiment(dir.path(), "c", "vgg-small", 3, json!({}));
    ok(&mlsnn(dir.path(), &["--config", c3.to_str().unwrap(), "train", "--resume"]));
    assert_eq!(fs::read_to_string(dir.path().join("c/metrics.csv")).unwrap(), ma);
}

#[test]
fn profile_and_energy_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "p", "vgg-small", 1, json!({}));
    let c = cfg.to_str().unwrap();
    ok(&mlsnn(dir.path(), &["--config", c, "train"]));
    ok(&mlsnn(dir.path(), &["--config", c, "profile"]));

    let summary: Value = serde_json::from_slice(&fs::read(dir.path().join("p/summary.json")).unwrap()).unwrap();
    let recount: u64 = csv_rows(&dir.path().join("p/trace.csv"))
        .iter()
        .map(|r| r[2].parse::<u64>().unwrap())
        .sum();
    assert_eq!(summary["total_events"].as_u64().unwrap(), recount);
    let per_layer: u64 = summary["layers"].as_array().unwrap().iter().map(|l| l["events"].as_u64().unwrap()).sum();
    assert_eq!(per_layer, recount);

    let eval: Value = serde_json::from_str(&ok(&mlsnn(dir.path(), &["--config", c, "eval"]))).unwrap();
    assert_eq!(eval["total_events"].as_u64().unwrap(), recount);
    assert_eq!(eval["samples"].as_u64().unwrap(), 16);

    ok(&mlsnn(dir.path(), &["--config", c, "energy", "--ann-baseline"]));
    let e: Value = serde_json::from_slice(&fs::read(dir.path().join("p/energy.json")).unwrap()).unwrap();
    for col in ["snn", "ann"] {
        let a = &e[col]["attojoules"];
        let parts: u128 = ["potentials", "weights", "bias", "io", "synaptic", "addressing"]
            .iter()
            .map(|k| a[k].as_u64().unwrap() as u128)
            .sum();
        assert_eq!(parts, a["total"].as_u64().unwrap() as u128);
    }
    assert_eq!(e["ann"]["potentials_nj"].as_f64().unwrap(), 0.0);
    assert!(e["snn_over_ann"]["total"].as_f64().unwrap() > 0.0);

    // the same numbers from the saved trace
    let from_trace = mlsnn(dir.path(), &["--out", "t", "energy", "--trace", "p/trace.json"]);
    let csv = ok(&from_trace);
    assert!(csv.starts_with("component,snn\n"));
    let t: Value = serde_json::from_slice(&fs::read(dir.path().join("t/energy.json")).unwrap()).unwrap();
    assert_eq!(t["snn"], e["snn"]);
}

#[test]
fn gradflow_rows_for_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = experiment(dir.path(), "g", "resnet-small", 1, json!({}));
    ok(&mlsnn(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "gradflow", "--batches", "2", "--seeds", "0,1"],
    ));
    let rows = csv_rows(&dir.path().join("g/gradflow.csv"));
    assert_eq!(rows.len(), 9);
    for r in rows.iter().filter(|r| r[0] == "sew" || r[0] == "sparse") {
        // the three tap gradients coincide for these variants
        assert_eq!(r[2], r[4]);
        assert_eq!(r[2], r[6]);
    }
    assert!(rows.iter().any(|r| r[0] == "sparse_no_ste"));

    let vgg = experiment(dir.path(), "v", "vgg-small", 1, json!({}));
    let out = mlsnn(dir.path(), &["--config", vgg.to_str().unwrap(), "gradflow"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = experiment(
        dir.path(),
        "m",
        "vgg-small",
        1,
        json!({"dataset": {"format": "images", "path": "nowhere", "classes": 4}}),
    );
    let out = mlsnn(dir.path(), &["--config", missing.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
    assert!(!dir.path().join("m").exists());

    let unknown = experiment(dir.path(), "u", "vgg-small", 1, json!({"epochz": 3}));
    let out = mlsnn(dir.path(), &["--config", unknown.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));

    let out = mlsnn(dir.path(), &["train"]);
    assert_eq!(out.status.code(), Some(2));

    let out = mlsnn(dir.path(), &["--config", "absent.json", "train"]);
    assert_eq!(out.status.code(), Some(3));

    let cfg = experiment(dir.path(), "n", "vgg-small", 1, json!({}));
    let out = mlsnn(dir.path(), &["--config", cfg.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(3), "no checkpoint yet");
}

#[test]
fn images_dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("imgs");
    fs::create_dir_all(&data).unwrap();
    let mut labels = String::from("file,label\n");
    let bars = mlsnn::training::synthetic_bars(12, 0, 0.0);
    for (i, (x, y)) in bars.samples().iter().zip(bars.labels()).enumerate() {
        let name = format!("s{i}.mltn");
        x.save(&data.join(&name)).unwrap();
        labels.push_str(&format!("{name},{y}\n"));
    }
    fs::write(data.join("labels.csv"), labels).unwrap();
    let cfg = experiment(
        dir.path(),
        "i",
        "vgg-small",
        1,
        json!({"dataset": {"format": "images", "path": "imgs", "classes": 4}, "validation": 4}),
    );
    ok(&mlsnn(dir.path(), &["--config", cfg.to_str().unwrap(), "train"]));
    assert_eq!(csv_rows(&dir.path().join("i/metrics.csv")).len(), 1);
}
