mod common;

use std::path::Path;
use std::process::Command;

use common::*;
use fenerf::imageio;
use fenerf_interface::cli::{dispatch, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE};

fn fenerf(args: &[&str]) -> i32 {
    dispatch(std::iter::once("fenerf").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("c.toml");
    std::fs::write(&path, tiny_config().to_toml()).unwrap();
    path
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(fenerf(&[]), EXIT_USAGE);
    assert_eq!(fenerf(&["paint"]), EXIT_USAGE);
    assert_eq!(fenerf(&["render", "--ckpt", "x", "--out", "y", "--bogus"]), EXIT_USAGE);
    assert_eq!(fenerf(&["dataset", "gen", "--config", "c"]), EXIT_USAGE);
    assert_eq!(fenerf(&["--help"]), EXIT_OK);
}

#[test]
fn runtime_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(fenerf(&["render", "--ckpt", "missing.fnrf", "--out", s(&out)]), EXIT_RUNTIME);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[dataset]\nclasses = 9\n").unwrap();
    assert_eq!(fenerf(&["dataset", "gen", "--config", s(&bad), "--out", s(&out)]), EXIT_RUNTIME);
    let ckpt = checkpoint(dir.path());
    let mask = dir.path().join("m.png");
    imageio::write_labels(&mask, 8, &[0; 64]).unwrap();
    assert_eq!(fenerf(&["invert", "--ckpt", s(&ckpt), "--target", s(&mask), "--out", s(&out)]), EXIT_RUNTIME);
}

#[test]
fn binary_reports_checkpoint_errors() {
    let out = Command::new(env!("CARGO_BIN_EXE_fenerf")).args(["render", "--ckpt", "missing.fnrf", "--out", "/tmp/unused"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.fnrf"));
    let out = Command::new(env!("CARGO_BIN_EXE_fenerf")).arg("--frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn dataset_then_train_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    assert_eq!(fenerf(&["dataset", "gen", "--config", s(&cfg), "--out", s(&data)]), EXIT_OK);
    assert!(data.join("manifest.json").exists());
    let run = dir.path().join("run");
    assert_eq!(fenerf(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", "2"]), EXIT_OK);
    assert_eq!(fenerf(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run), "--steps", "4", "--resume"]), EXIT_OK);
    let log = std::fs::read_to_string(run.join("train.jsonl")).unwrap();
    let iters: Vec<u64> = log.lines().map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["iter"].as_u64().unwrap()).collect();
    assert_eq!(iters, vec![0, 1, 2, 3]);

    let straight = dir.path().join("straight");
    assert_eq!(fenerf(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight), "--steps", "4"]), EXIT_OK);
    let a = fenerf::training::Trainer::load(&run.join("checkpoint.fnrf")).unwrap();
    let b = fenerf::training::Trainer::load(&straight.join("checkpoint.fnrf")).unwrap();
    assert_eq!(a.hash(), b.hash());
}

#[test]
fn render_invert_edit_morph_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let r = dir.path().join("render");
    assert_eq!(fenerf(&["render", "--ckpt", s(&ckpt), "--out", s(&r), "--seed", "4", "--yaw", "-0.2"]), EXIT_OK);
    for f in ["rgb.png", "mask.png", "preview.png", "depth.png", "latents.json"] {
        assert!(r.join(f).exists(), "{f}");
    }

    let inv = dir.path().join("inv");
    let trace = dir.path().join("t.jsonl");
    let target = r.join("mask.png");
    let args = ["invert", "--ckpt", s(&ckpt), "--target", s(&target), "--steps", "12", "--trace", s(&trace), "--out", s(&inv), "--yaw", "-0.2"];
    assert_eq!(fenerf(&args), EXIT_OK);
    let lines = std::fs::read_to_string(&trace).unwrap().lines().count();
    assert!(lines <= 12 && lines > 0);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(inv.join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_miou"].as_f64().unwrap() >= 0.0);

    let full = dir.path().join("full");
    let image = r.join("rgb.png");
    assert_eq!(fenerf(&["invert", "--ckpt", s(&ckpt), "--target", s(&target), "--image", s(&image), "--steps", "3", "--out", s(&full)]), EXIT_OK);
    assert!(full.join("summary.json").exists());

    let edited = dir.path().join("edit");
    let latents = r.join("latents.json");
    assert_eq!(fenerf(&["edit", "--ckpt", s(&ckpt), "--latents", s(&latents), "--mask", s(&target), "--steps", "3", "--out", s(&edited)]), EXIT_OK);
    let before: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&latents).unwrap()).unwrap();
    let after: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(edited.join("latents.json")).unwrap()).unwrap();
    assert_eq!(before["z_t"], after["z_t"]);

    let grid = dir.path().join("grid");
    let other = inv.join("latents.json");
    assert_eq!(fenerf(&["morph", "--ckpt", s(&ckpt), "--a", s(&latents), "--b", s(&other), "--n", "2", "--out", s(&grid)]), EXIT_OK);
    assert!(grid.join("cell_1_1_rgb.png").exists());

    let ev = dir.path().join("eval");
    assert_eq!(fenerf(&["eval", "--ckpt", s(&ckpt), "--out", s(&ev), "--codes", "2", "--steps", "3"]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["inversion"]["mean_miou"].as_array().unwrap().len(), 4);
    assert!(report["reprojection"]["self_error"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn config_override_must_match_the_generator() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = checkpoint(dir.path());
    let mut other = tiny_config();
    other.generator.z_shape = 7;
    let path = dir.path().join("other.toml");
    std::fs::write(&path, other.to_toml()).unwrap();
    let out = dir.path().join("o");
    assert_eq!(fenerf(&["render", "--ckpt", s(&ckpt), "--config", s(&path), "--out", s(&out)]), EXIT_RUNTIME);
    let same = write_config(dir.path());
    assert_eq!(fenerf(&["render", "--ckpt", s(&ckpt), "--config", s(&same), "--out", s(&out)]), EXIT_OK);
}
