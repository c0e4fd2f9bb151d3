use std::path::Path;
use std::process::{Command, Output};

const PROFILE: &str = r#"
[dataset]
frames = 16
seed = 3
balance = { balanced = { per_class = 6 } }
"#;

const CONFIG: &str = r#"
[train]
epochs = 30
frames_per_sample = 8
steps_per_epoch = 4

[render]
width = 16
height = 16
sigma = 1.0

[model]
widths = [8, 16]
strides = [1, 2]
strips = 4
embed_dim = 16
"#;

fn drf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drf"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("profile.toml"), PROFILE).unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(drf(dir.path(), &["synth", "--out", "data", "--profile", "profile.toml"]));
    dir
}

#[test]
fn eval_on_empty_directory_is_a_data_error() {
    let dir = workspace();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    ok(drf(dir.path(), &["train", "--data", "data", "--config", "run.toml", "--epochs", "1", "--out", "m.ckpt"]));
    let out = drf(dir.path(), &["eval", "--ckpt", "m.ckpt", "--data", "empty"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no .jsonl sequences"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(drf(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let out = drf(dir.path(), &["train", "--data", "x", "--out", "m", "--set", "train.epochz=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
    let out = drf(dir.path(), &["train", "--data", "x", "--out", "m", "--set", "attention.guidance=sideways"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_inputs_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"subject_id\":\"a\"}\n").unwrap();
    std::fs::write(dir.path().join("m.ckpt"), "not a checkpoint").unwrap();
    let out = drf(dir.path(), &["pav", "--in", "bad.jsonl", "--out", "p.csv"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
    let out = drf(dir.path(), &["infer", "--ckpt", "m.ckpt", "--in", "bad.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn training_twice_gives_identical_checkpoints_and_a_converged_model() {
    let dir = workspace();
    for out in ["a.ckpt", "b.ckpt"] {
        ok(drf(dir.path(), &["train", "--data", "data", "--config", "run.toml", "--out", out]));
    }
    let a = std::fs::read(dir.path().join("a.ckpt")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.ckpt")).unwrap());

    let mut seen = 0;
    for entry in std::fs::read_dir(dir.path().join("data/train")).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        let out = ok(drf(dir.path(), &["infer", "--ckpt", "a.ckpt", "--in", path.to_str().unwrap()]));
        let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(json["label"], header["label"], "{}", path.display());
        assert_eq!(json["pav"].as_array().unwrap().len(), 24);
        assert!(json["attention"]["channel"].is_array() && json["attention"]["spatial"].is_array());
        seen += 1;
    }
    assert_eq!(seen, 12);
}

#[test]
fn artifacts_carry_a_manifest_with_config_hash_and_echo() {
    let dir = workspace();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 18);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["config"].as_str().unwrap().contains("test_fraction"));
    assert_eq!(manifest["inputs"][0]["path"], "profile.toml");
}
