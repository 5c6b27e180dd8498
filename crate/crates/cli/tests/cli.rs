use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icbir_core::checkpoint::Checkpoint;
use icbir_core::volume::{read_manifest, read_volume};

fn icbir(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icbir"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("ICBIR_THREADS")
        .output()
        .expect("spawn icbir")
}

fn ok(args: &[&str]) -> String {
    let out = icbir(args);
    assert!(
        out.status.success(),
        "icbir {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn list(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(list(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn gen(dir: &Path, count: &str, test: &str, seed: &str) {
    ok(&[
        "gen-synthetic", "--out", s(dir), "--count", count, "--test-count", test, "--side", "16", "--seed", seed,
    ]);
}

fn train(data: &Path, out: &Path, epochs: &str, seed: &str) {
    ok(&[
        "train", "--manifest", s(&data.join("manifest.jsonl")), "--out", s(out), "--side", "16", "--hidden", "8",
        "--latent", "4", "--epochs", epochs, "--batch", "32", "--seed", seed, "--beta", "0.01",
    ]);
}

#[test]
fn gen_synthetic_writes_volumes_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    gen(&dir, "4", "0", "1");
    let records = read_manifest(dir.join("manifest.jsonl")).unwrap();
    assert_eq!(records.len(), 8);
    let volumes: Vec<_> = list(&dir).into_iter().filter(|p| p.extension().unwrap() == "svol").collect();
    assert_eq!(volumes.len(), records.len());
    assert_eq!(records.iter().filter(|r| r.label == 2).count(), 4);
}

#[test]
fn gen_synthetic_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a, "2", "1", "42");
    gen(&b, "2", "1", "42");
    let (fa, fb) = (list(&a), list(&b));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn gen_synthetic_refuses_non_empty_dir() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let out = icbir(&["gen-synthetic", "--out", s(tmp.path()), "--count", "1", "--side", "8"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_INPUT]"));
    ok(&["gen-synthetic", "--out", s(tmp.path()), "--count", "1", "--side", "8", "--force"]);
}

#[test]
fn zero_epochs_keeps_class_mean_prototypes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "2", "0", "3");
    let ck_path = tmp.path().join("m.icbs");
    train(&data, &ck_path, "0", "3");
    let ck = Checkpoint::read(&ck_path).unwrap();
    assert!(ck.loss_curve.is_empty());
    assert_eq!(ck.run_config["epochs"], 0);
    assert_eq!(ck.bank.class_names(), ["CN", "AD"]);
}

#[test]
fn training_reports_consistent_loss_breakdown() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "2", "0", "4");
    let ck_path = tmp.path().join("m.icbs");
    train(&data, &ck_path, "2", "4");
    let ck = Checkpoint::read(&ck_path).unwrap();
    assert_eq!(ck.loss_curve.len(), 2);
    let (beta, gamma) = (ck.model.beta as f64, ck.model.gamma as f64);
    for e in &ck.loss_curve {
        let m = e.mean;
        assert!((m.reconstruction + beta * m.kl + gamma * m.cross_entropy - m.total).abs() < 1e-6);
    }
}

struct Artifacts {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    ck: PathBuf,
    index: PathBuf,
}

fn artifacts(seed: &str) -> Artifacts {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "3", "1", seed);
    let ck = tmp.path().join("m.icbs");
    train(&data, &ck, "1", seed);
    let index = tmp.path().join("g.icbx");
    ok(&[
        "index", "--checkpoint", s(&ck), "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&index),
    ]);
    Artifacts { _tmp: tmp, data, ck, index }
}

#[test]
fn self_query_ranks_first() {
    let a = artifacts("5");
    let vol = a.data.join("train/train-c2-0001.svol");
    let out = ok(&["query", "--checkpoint", s(&a.ck), "--index", s(&a.index), "--volume", s(&vol), "--k", "1", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["hits"].as_array().unwrap().len(), 1);
    assert_eq!(v["hits"][0]["id"], "train-c2-0001");
    assert!((v["hits"][0]["score"].as_f64().unwrap() - 1.0).abs() < 1e-6);
    assert_eq!(v["hits"][0]["label"], "AD");
    assert!(v["run_config"].is_object());

    let mut rankings = Vec::new();
    for t in ["1", "2", "8"] {
        rankings.push(ok(&[
            "--threads", t, "query", "--checkpoint", s(&a.ck), "--index", s(&a.index), "--volume", s(&vol), "--k", "10",
        ]));
    }
    assert!(rankings.iter().all(|r| r == &rankings[0]));
    let truncated = ok(&["query", "--checkpoint", s(&a.ck), "--index", s(&a.index), "--volume", s(&vol), "--k", "50"]);
    assert_eq!(truncated.lines().count(), 1 + 6);
}

#[test]
fn fingerprint_mismatch_is_a_hard_error() {
    let a = artifacts("6");
    let other = a.data.parent().unwrap().join("other.icbs");
    train(&a.data, &other, "1", "99");
    let vol = a.data.join("test/test-c1-0000.svol");
    let out = icbir(&["query", "--checkpoint", s(&other), "--index", s(&a.index), "--volume", s(&vol)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error[E_INDEX]"), "{err}");
    let fp_a = Checkpoint::read(&a.ck).unwrap().fingerprint();
    let fp_b = Checkpoint::read(&other).unwrap().fingerprint();
    assert!(err.contains(&fp_a) && err.contains(&fp_b), "{err}");
}

#[test]
fn detect_prints_votes_and_label() {
    let a = artifacts("7");
    let vol = a.data.join("test/test-c1-0000.svol");
    let out = ok(&["detect", "--checkpoint", s(&a.ck), "--volume", s(&vol), "--r", "2", "--xi", "0.5"]);
    for o in ["axial", "coronal", "sagittal"] {
        assert!(out.lines().any(|l| l.starts_with(o) && l.contains("CN=") && l.contains("AD=")), "{out}");
    }
    assert!(out.lines().last().unwrap().starts_with("label: "));
    let json = ok(&["detect", "--checkpoint", s(&a.ck), "--volume", s(&vol), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["detection"]["orientations"].as_array().unwrap().len(), 3);
}

#[test]
fn probmap_writes_maps_overlays_and_sidecar() {
    let a = artifacts("8");
    let vol = a.data.join("test/test-c2-0000.svol");
    let out_dir = a.data.parent().unwrap().join("maps");
    ok(&["probmap", "--checkpoint", s(&a.ck), "--volume", s(&vol), "--out", s(&out_dir), "--threshold", "0"]);
    let files = list(&out_dir);
    let maps: Vec<_> = files.iter().filter(|p| p.extension().unwrap() == "svol").collect();
    assert_eq!(maps.len(), 2);
    assert_eq!(read_volume(maps[0]).unwrap().kind.as_deref(), Some("probmap"));
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "pgm").count(), 3);
    assert_eq!(files.iter().filter(|p| p.extension().unwrap() == "ppm").count(), 3);
    let sidecar = files.iter().find(|p| p.extension().unwrap() == "json").unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(sidecar).unwrap()).unwrap();
    assert_eq!(v["highlighted"], 16 * 16 * 16);
    assert_eq!(v["class"], 2);
    assert!(v["fingerprint"].is_string());

    let bad = icbir(&["probmap", "--checkpoint", s(&a.ck), "--volume", s(&vol), "--out", s(&out_dir), "--class", "3"]);
    assert!(!bad.status.success());
}

#[test]
fn eval_writes_all_report_blocks() {
    let a = artifacts("9");
    let report = a.data.parent().unwrap().join("report.json");
    let tsv = a.data.parent().unwrap().join("report.tsv");
    let manifest = a.data.join("manifest.jsonl");
    ok(&[
        "eval", "--checkpoint", s(&a.ck), "--index", s(&a.index), "--manifest", s(&manifest), "--out", s(&report),
        "--tsv", s(&tsv),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for block in ["axial", "coronal", "sagittal", "ensemble", "retrieval"] {
        assert!(v[block]["macro_f1"].is_number(), "{block}");
    }
    assert!(v["warnings"].as_array().unwrap().is_empty());
    assert_eq!(fs::read_to_string(&tsv).unwrap().lines().count(), 6);

    // gallery doubles as the test set: self-retrieval, flagged
    ok(&[
        "eval", "--checkpoint", s(&a.ck), "--index", s(&a.index), "--manifest", s(&manifest), "--split", "train",
        "--out", s(&report),
    ]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["retrieval"]["macro_f1"], 1.0);
    assert!(!v["warnings"].as_array().unwrap().is_empty());
}

#[test]
fn invalid_config_fails_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "1", "0", "1");
    let out = icbir(&[
        "train", "--manifest", s(&data.join("manifest.jsonl")), "--out", s(&tmp.path().join("m.icbs")), "--side", "16",
        "--block-n", "32",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[E_CONFIG]"));
    assert!(!tmp.path().join("m.icbs").exists());
}
