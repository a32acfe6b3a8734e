use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use templatenet::geometry::{Rotation, Vec3};
use templatenet::orthopatch::Intrinsics;
use templatenet::synthgen::{render_depth, Camera, ObjectKind, PlacedMesh, Scene};

fn run(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_templatenet"))
        .args(args)
        .env("TEMPLATENET_RUN_DIR", root)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

/// Tiny dataset plus a one-epoch model, shared by the command tests.
fn small_model(root: &Path) {
    let o = run(root, &["gen-data", "--out", "data", "--n-fg", "4", "--n-bg", "4", "--seed", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let data = root.join("data/dataset");
    let o = run(
        root,
        &[
            "train",
            "--out",
            "model",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch-size",
            "4",
            "--subset-fraction",
            "1",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
    let o = run(dir.path(), &["--version"]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("templatenet "));
}

#[test]
fn invalid_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&run(root, &["gen-data", "--bogus"])), 1);
    assert_eq!(code(&run(root, &["gen-data", "--config", "/nonexistent/settings.txt"])), 1);
    let cfg = root.join("bad.txt");
    fs::write(&cfg, "not_a_key = 3\n").unwrap();
    assert_eq!(code(&run(root, &["gen-data", "--config", cfg.to_str().unwrap()])), 1);
    assert_eq!(code(&run(root, &["gen-bank", "--templates", "10"])), 1);
    assert_eq!(code(&run(root, &["train"])), 1);
    assert_eq!(code(&run(root, &["eval", "--checkpoint", "/nonexistent"])), 1);
}

#[test]
fn settings_are_layered_and_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("gen.txt");
    fs::write(&cfg, "# small\nn_fg = 3\nn_bg = 3\nseed = 9\n").unwrap();
    let o = run(
        root,
        &["gen-data", "--out", "g", "--config", cfg.to_str().unwrap(), "--seed", "5", "--patch-size", "32"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(root.join("g/config.txt")).unwrap();
    assert!(written.contains("n_fg = 3"));
    assert!(written.contains("seed = 5"));
    assert!(written.contains("patch_size = 32"));
    assert!(fs::read_to_string(root.join("g/version.txt")).unwrap().starts_with("templatenet "));
    let manifest = fs::read_to_string(root.join("g/dataset/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| l.starts_with("example ")).count(), 6);
}

#[test]
fn runtime_failure_exits_two_and_leaves_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let o = run(root, &["gen-data", "--out", "data", "--n-fg", "4", "--n-bg", "4"]);
    assert_eq!(code(&o), 0);
    let data = root.join("data/dataset");
    let o = run(
        root,
        &[
            "train",
            "--out",
            "diverge",
            "--data",
            data.to_str().unwrap(),
            "--epochs",
            "5",
            "--batch-size",
            "2",
            "--subset-fraction",
            "1",
            "--learning-rate",
            "1e300",
        ],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(root.join("diverge/.failed").exists());
    assert!(root.join("diverge/history.txt").exists());
    assert!(!root.join("diverge/checkpoint").exists());
}

#[test]
fn gradcheck_reports_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--trials", "40"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(dir.path().join("gradcheck/report.txt")).unwrap();
    assert!(report.contains("templates"));
    assert!(report.lines().last().unwrap().starts_with("PASS"));

    let o = run(dir.path(), &["gradcheck", "--out", "strict", "--trials", "20", "--tolerance", "1e-30"]);
    assert_eq!(code(&o), 2);
    assert!(dir.path().join("strict/.failed").exists());
    let report = fs::read_to_string(dir.path().join("strict/report.txt")).unwrap();
    assert!(report.lines().last().unwrap().starts_with("FAIL"));
}

#[test]
fn train_viz_and_detect_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    small_model(root);
    for f in ["history.txt", "metrics.txt", "checkpoint", "config.txt"] {
        assert!(root.join("model").join(f).exists(), "{}", f);
    }
    let ckpt = root.join("model/checkpoint");
    let data = root.join("data/dataset");
    let o = run(
        root,
        &[
            "viz",
            "--out",
            "viz",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--channels",
            "0,1,2",
            "--layer",
            "2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["filters_conv2.pgm", "responses_example0.pgm", "normals_example0.ppm"] {
        let bytes = fs::read(root.join("viz").join(f)).unwrap();
        assert!(bytes.starts_with(b"P5\n") || bytes.starts_with(b"P6\n"), "{}", f);
    }

    let camera = Camera::new(320, 240, Intrinsics::new(262.5, 262.5, 159.5, 119.5).unwrap());
    let scene = Scene {
        objects: vec![PlacedMesh::new(
            Arc::new(ObjectKind::Box.mesh()),
            Rotation::about_y(0.4),
            Vec3::new(0.0, 0.0, 1.0),
        )],
        floor: None,
    };
    let depth_path = root.join("scene.dpt");
    render_depth(&scene, &camera).unwrap().write(&depth_path).unwrap();
    let o = run(
        root,
        &["detect", "--out", "det", "--checkpoint", ckpt.to_str().unwrap(), "--depth", depth_path.to_str().unwrap()],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(root.join("det/detections.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
    assert!(fs::read(root.join("det/scene_normals.ppm")).unwrap().starts_with(b"P6\n"));
}
