//! Drives the `fevpr` binary end to end on a tiny synthetic world.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fevpr::cli::compact_model;
use fevpr::config::RunConfig;

fn fevpr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fevpr"))
        .args(args)
        .arg("--log")
        .arg("warn")
        .output()
        .expect("spawn fevpr")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(root: &Path) -> PathBuf {
    let world = root.join("world");
    ok(&fevpr(&["synth", "--out", s(&world), "--places", "8", "--image-size", "32"]));
    let mut cfg = RunConfig::default();
    cfg.data.root = world;
    cfg.data.cache_dir = root.join("cache");
    cfg.train.model = compact_model();
    cfg.train.max_iterations = Some(3);
    cfg.train.eval_every = 2;
    cfg.train.cluster_init.images = 8;
    let path = root.join("run.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path
}

fn mtimes(paths: &[PathBuf]) -> Vec<std::time::SystemTime> {
    paths.iter().map(|p| std::fs::metadata(p).unwrap().modified().unwrap()).collect()
}

#[test]
fn prepare_train_evaluate_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());

    let first = ok(&fevpr(&["prepare", "-c", s(&cfg)]));
    assert_eq!(first.matches("-> ").count(), 6, "{first}");
    let caches: Vec<PathBuf> = std::fs::read_dir(tmp.path().join("cache"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(caches.len(), 6);
    let before = mtimes(&caches);
    let second = ok(&fevpr(&["prepare", "-c", s(&cfg)]));
    assert_eq!(second.matches("already cached").count(), 6, "{second}");
    assert_eq!(mtimes(&caches), before, "second prepare rewrote the cache");

    let train_dir = tmp.path().join("train");
    ok(&fevpr(&["train", "-c", s(&cfg), "-o", s(&train_dir)]));
    let last = train_dir.join("last.safetensors");
    assert!(last.exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(train_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["command"], "train");
    let log = std::fs::read_to_string(train_dir.join("train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 1);

    // Every database image retrieves itself.
    let eval_dir = tmp.path().join("eval");
    ok(&fevpr(&[
        "evaluate",
        "-c",
        s(&cfg),
        "-o",
        s(&eval_dir),
        "--checkpoint",
        s(&last),
        "--query",
        "database",
        "--query",
        "heldout",
    ]));
    let recalls: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("database/recalls.json")).unwrap()).unwrap();
    assert_eq!(recalls["recalls"]["1"], 1.0, "{recalls}");
    for f in ["pr.csv", "success_map.csv", "distances.f32"] {
        assert!(eval_dir.join("heldout").join(f).exists(), "missing {f}");
    }
}

#[test]
fn missing_pose_table_fails_with_a_named_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    std::fs::remove_file(tmp.path().join("world/heldout/poses.csv")).unwrap();
    let out = fevpr(&["prepare", "-c", s(&cfg), "heldout"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("poses.csv"), "{err}");
}

#[test]
fn failed_run_is_recorded_in_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out_dir = tmp.path().join("eval");
    let out = fevpr(&[
        "evaluate",
        "-c",
        s(&cfg),
        "-o",
        s(&out_dir),
        "--checkpoint",
        s(&tmp.path().join("nope.safetensors")),
    ]);
    assert!(!out.status.success());
    // The checkpoint is read before the run starts, so nothing is half written.
    assert!(!out_dir.join("manifest.json").exists() || {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
        m["status"] == "failed"
    });
}

#[test]
fn unknown_ablation_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let out = fevpr(&["train", "-c", s(&cfg), "-o", s(&tmp.path().join("t")), "--ablation", "frame_only,event_only"]);
    assert!(!out.status.success());
    assert!(!tmp.path().join("t/last.safetensors").exists());
}
