use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tueforge::synthvideo::load_dataset;

fn tueforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tueforge"))
        .args(args)
        .env_remove("TUEFORGE_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = tueforge(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 4] = ["--override", "n_videos=3", "--override", "n_frames=4"];

fn gen_data(out: &Path, seed: &str) {
    let mut args = vec!["gen-data", "--out", p(out), "--seed", seed];
    args.extend(SMALL);
    ok(&args);
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap() {
        let path = e.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if path.is_dir() {
            out.extend(tree(&path).into_iter().map(|(n, b)| (format!("{name}/{n}"), b)));
        } else if name != "run-meta.json" {
            out.push((name, fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_data(&a, "7");
    gen_data(&b, "7");
    assert_eq!(tree(&a), tree(&b));
    let meta = read_json(&a.join("run-meta.json"));
    assert_eq!(meta["verb"], "gen-data");
    assert_eq!(meta["config"]["seed"], 7);
    assert_eq!(meta["config"]["n_videos"], 3);
}

#[test]
fn protect_train_evaluate_round() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, gen, prot, vic, ev) = (d.join("data"), d.join("gen"), d.join("prot"), d.join("vic"), d.join("eval"));
    gen_data(&data, "1");
    ok(&["train-generator", "--dataset", p(&data), "--out", p(&gen), "--override", "epochs=1", "--override", "batch=2"]);
    assert!(gen.join("generator/params.bin").exists());
    assert!(gen.join("train-log.json").exists());
    ok(&["protect", "--generator", p(&gen), "--dataset", p(&data), "--out", p(&prot)]);
    assert_eq!(read_json(&prot.join("manifest.json"))["provenance"], "tue-protected");

    let text = ok(&["inspect", p(&prot), "--clean", p(&data)]);
    assert!(text.contains("provenance tue-protected"), "{text}");
    let line = text.lines().find(|l| l.starts_with("max linf deviation")).unwrap();
    let printed: f32 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    let (a, b) = (load_dataset(&prot).unwrap(), load_dataset(&data).unwrap());
    let oracle = a
        .videos
        .iter()
        .zip(&b.videos)
        .flat_map(|(x, y)| x.frames.iter().zip(&y.frames))
        .flat_map(|(f, g)| f.data().iter().zip(g.data()).map(|(u, v)| (u - v).abs()))
        .fold(0.0f32, f32::max);
    assert!((printed - oracle).abs() < 1e-6);
    assert!(oracle <= 9.0 / 255.0 + 1e-6);

    let out = tueforge(&["train-generator", "--dataset", p(&prot), "--out", p(&d.join("bad"))]);
    assert_eq!(out.status.code(), Some(1));

    ok(&["train-victim", "--dataset", p(&prot), "--out", p(&vic), "--override", "epochs=1", "--seed", "4"]);
    ok(&["evaluate", "--tracker", p(&vic), "--dataset", p(&data), "--out", p(&ev)]);
    let m = read_json(&ev.join("metrics.json"));
    assert_eq!(m["dataset_provenance"], "tue-protected");
    assert_eq!(m["arch"], "conv-siamese");
    assert_eq!(m["seed"], 4);
    for k in ["AO", "SR05", "SR075", "AUC", "Prec"] {
        assert!(m[k].as_f64().unwrap() >= 0.0, "{k}");
    }
    assert_eq!(m["train_loss_curve"].as_array().unwrap().len(), 1);
}

#[test]
fn em_protect_writes_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let (data, out) = (dir.path().join("data"), dir.path().join("em"));
    gen_data(&data, "2");
    ok(&["em-protect", "--dataset", p(&data), "--out", p(&out), "--override", "outer_epochs=1", "--override", "inner_steps=1"]);
    assert_eq!(read_json(&out.join("manifest.json"))["provenance"], "em-protected");
    let log = read_json(&out.join("em-log.json"));
    assert!(log["tile_bytes"].as_u64().unwrap() > 0);
    assert!(out.join("tiles/params.bin").exists());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tueforge(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tueforge(&["gen-data", "--out", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(tueforge(&["gen-data", "--out", "x", "--override", "nope=1", "--dry-run"]).status.code(), Some(1));
    assert_eq!(tueforge(&["gen-data", "--out", "x", "--override", "n_videos", "--dry-run"]).status.code(), Some(1));
    assert_eq!(tueforge(&["train-victim", "--out", "x", "--dataset", "/nonexistent"]).status.code(), Some(1));
    assert_eq!(tueforge(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let mut args = vec!["gen-data", "--out", p(&blocker)];
    args.extend(SMALL);
    assert_eq!(tueforge(&args).status.code(), Some(2));
}

#[test]
fn dry_run_matches_recorded_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let mut args = vec!["gen-data", "--out", p(&out), "--seed", "5", "--override", "accel=1.5"];
    args.extend(SMALL);
    let mut dry = args.clone();
    dry.push("--dry-run");
    let printed: Value = serde_json::from_str(&ok(&dry)).unwrap();
    assert!(!out.exists());
    ok(&args);
    assert_eq!(read_json(&out.join("run-meta.json"))["config"], printed);
    assert_eq!(printed["accel"], 1.5);
}

#[test]
fn config_file_and_nested_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    fs::write(&cfg, r#"{"methods": ["clean", "em"], "victim": {"epochs": 3}}"#).unwrap();
    let printed: Value = serde_json::from_str(&ok(&[
        "run-experiment",
        "--out",
        "x",
        "--config",
        p(&cfg),
        "--override",
        "victim.pairs.max_gap=4",
        "--seed",
        "9",
        "--dry-run",
    ]))
    .unwrap();
    assert_eq!(printed["methods"], serde_json::json!(["clean", "em"]));
    assert_eq!(printed["victim"]["epochs"], 3);
    assert_eq!(printed["victim"]["pairs"]["max_gap"], 4);
    assert_eq!(printed["victim"]["batch"], 8);
    assert_eq!(printed["seeds"], serde_json::json!([9]));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed_flag: Option<&str>| -> Value {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tueforge"));
        cmd.args(["gen-data", "--out", "x", "--dry-run"]).env("TUEFORGE_SEED", "31");
        if let Some(s) = seed_flag {
            cmd.args(["--seed", s]);
        }
        let out = cmd.current_dir(dir.path()).output().unwrap();
        assert!(out.status.success());
        serde_json::from_slice(&out.stdout).unwrap()
    };
    assert_eq!(run(None)["seed"], 31);
    assert_eq!(run(Some("3"))["seed"], 3);
    let bad = Command::new(env!("CARGO_BIN_EXE_tueforge"))
        .args(["gen-data", "--out", "x", "--dry-run"])
        .env("TUEFORGE_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}
