use std::path::Path;
use std::process::{Command, Output};

use flowsplat::checkpoint;
use flowsplat::pipeline::{frame_name, MODEL_FILE};
use flowsplat::report::read_eval_jsonl;
use flowsplat_core::neuralfield::{Normalization, VelocityFieldModel};
use flowsplat_core::synthlab::{SynthConfig, SyntheticScene};

const RUN: &str = r#"
deterministic = true
[train]
iterations = 12
batch_flow = 32
batch_physics = 8
batch_boundary = 8
[train.model]
hidden = [16, 16]
frequencies = 3
encoder_channels = [4, 4, 4, 4]
[dataset]
flow_samples = 400
fluid_points = 400
boundary_probes = 100
hints = 0
[eval]
flow_probes = 200
divergence_probes = 50
violation_points = 50
"#;

fn flowsplat(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowsplat"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = flowsplat(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_bundle(dir: &Path, name: &str, rock: bool) {
    let mut args = vec!["synth", "--out", name, "--width", "64", "--height", "64", "--frames", "4"];
    if rock {
        args.push("--rock");
    }
    ok(&args, dir);
}

#[test]
fn synth_rock_writes_obstacle_mask() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path(), "b", true);
    for f in ["image.png", "depth.bin", "mask.png", "obstacle.png", "camera.toml", "scene.toml"] {
        assert!(dir.path().join("b").join(f).exists(), "{f}");
    }
    small_bundle(dir.path(), "c", false);
    assert!(!dir.path().join("c/obstacle.png").exists());
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path(), "b", true);
    ok(&["eval", "--bundle", "b", "--out", "r.jsonl", "--deterministic"], dir.path());
    let r = &read_eval_jsonl(&dir.path().join("r.jsonl")).unwrap()[0];
    assert_eq!(r.psnr, vec![99.0; 4]);
    assert_eq!(r.ssim, vec![1.0; 4]);
    assert_eq!(r.epe, 0.0);
    assert_eq!(r.boundary_violation_rate, 0.0);
    assert_eq!(r.runtime_ms, 0.0);
}

#[test]
fn zero_velocity_checkpoint_animates_identical_frames() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path(), "b", false);
    let cfg = SynthConfig {
        width: 64,
        height: 64,
        frames: 4,
        ..Default::default()
    };
    let scene = SyntheticScene::generate(&cfg).unwrap();
    let tiny: flowsplat::config::RunConfig = toml::from_str(RUN).unwrap();
    let mut m = VelocityFieldModel::new(tiny.train.model.clone(), Normalization::new(scene.camera.clone(), scene.horizon()).unwrap()).unwrap();
    let (w, b) = m.output_layer();
    let mut zero = vec![w, b];
    zero.extend(m.force_params());
    m.zero_params(&zero);
    checkpoint::save(&dir.path().join("zero.ckpt"), &m, 0).unwrap();
    ok(&["animate", "--bundle", "b", "--checkpoint", "zero.ckpt", "--out", "f"], dir.path());
    let first = std::fs::read(dir.path().join("f").join(frame_name(0))).unwrap();
    for i in 1..4 {
        assert_eq!(std::fs::read(dir.path().join("f").join(frame_name(i))).unwrap(), first, "frame {i}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("f/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["frames"], 4);
    assert_eq!(manifest["cameras"]["trajectory"].as_array().unwrap().len(), 4);
}

#[test]
fn deterministic_training_and_thread_counts_reproduce_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("run.toml"), RUN).unwrap();
    small_bundle(d, "b", true);
    for t in ["t1", "t2"] {
        ok(&["train", "--bundle", "b", "--out", t, "--config", "run.toml", "--log-every", "0"], d);
    }
    for f in [MODEL_FILE, "train_log.csv"] {
        assert_eq!(std::fs::read(d.join("t1").join(f)).unwrap(), std::fs::read(d.join("t2").join(f)).unwrap(), "{f}");
    }
    let ckpt = format!("t1/{MODEL_FILE}");
    for (threads, out) in [("1", "f1"), ("3", "f3")] {
        let o = Command::new(env!("CARGO_BIN_EXE_flowsplat"))
            .args(["animate", "--bundle", "b", "--checkpoint", &ckpt, "--out", out])
            .env("FLOWSPLAT_THREADS", threads)
            .current_dir(d)
            .output()
            .unwrap();
        assert!(o.status.success());
    }
    for i in 0..4 {
        let n = frame_name(i);
        assert_eq!(std::fs::read(d.join("f1").join(&n)).unwrap(), std::fs::read(d.join("f3").join(&n)).unwrap());
    }
    ok(&["eval", "--bundle", "b", "--checkpoint", &ckpt, "--frames", "f1", "--config", "run.toml", "--out", "r.csv"], d);
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn usage_errors_exit_2_and_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = flowsplat(&["train", "--bundle", "b", "--out", "t", "--bogus"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(flowsplat(&["frobnicate"], dir.path()).status.code(), Some(2));
    let o = flowsplat(&["eval", "--bundle", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(flowsplat(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn edit_removes_disk_from_fluid_mask() {
    let dir = tempfile::tempdir().unwrap();
    small_bundle(dir.path(), "b", false);
    ok(&["edit", "--bundle", "b", "--out", "e", "--center", "2,0.5", "--radius", "1"], dir.path());
    let before = flowsplat::io::read_mask(&dir.path().join("b/mask.png")).unwrap();
    let after = flowsplat::io::read_mask(&dir.path().join("e/mask.png")).unwrap();
    assert!(after.count() < before.count());
    assert!(dir.path().join("e/obstacle.png").exists());
    // a second obstacle is refused
    assert_eq!(flowsplat(&["edit", "--bundle", "e", "--out", "e2"], dir.path()).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck"], dir.path());
    assert_eq!(out.lines().filter(|l| l.ends_with("ok")).count(), 4, "{out}");
}
