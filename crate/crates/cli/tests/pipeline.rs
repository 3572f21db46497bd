use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tetdiff::meshops::save_obj;
use tetdiff::shapes::{box_mesh, capsule, uv_sphere};

const CONFIG: &str = "\
grid.resolution = 4
fit.iterations = 20
fit.samples = 512
train.steps = 30
model.hidden = [6, 6]
model.dilations = [1, 2, 1]
eval.cloud_size = 128
";

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tetdiff"))
        .current_dir(dir)
        .env("TETDIFF_THREADS", "2")
        .env("RUST_LOG", "warn")
        .args(["--config", "tetdiff.cfg"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Fits three primitives and trains a tiny model in a fresh directory.
fn prepared() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tetdiff.cfg"), CONFIG).unwrap();
    let shapes = dir.join("shapes");
    fs::create_dir(&shapes).unwrap();
    save_obj(&uv_sphere([0.1, 0.0, 0.0], 0.5, 12, 16), shapes.join("a_sphere.obj")).unwrap();
    save_obj(&box_mesh([0.0; 3], [0.6, 0.3, 0.4], 2), shapes.join("b_box.obj")).unwrap();
    save_obj(&capsule([0.0; 3], 0.3, 0.4, 8, 12), shapes.join("c_capsule.obj")).unwrap();
    ok(dir, &["fit", "shapes"]);
    ok(dir, &["train"]);
    tmp
}

#[test]
fn pipeline_commands() {
    let tmp = prepared();
    let dir = tmp.path();
    for name in ["a_sphere.tetg", "b_box.tetg", "c_capsule.tetg", "fit_report.jsonl"] {
        assert!(dir.join("data").join(name).exists(), "{name}");
    }
    assert_eq!(fs::read_to_string(dir.join("model.loss.txt")).unwrap().lines().count(), 30);

    // same seed, same artifacts
    ok(dir, &["sample", "--count", "4", "--seed", "7", "--out", "s1"]);
    ok(dir, &["sample", "--count", "4", "--seed", "7", "--out", "s2"]);
    for i in 0..4 {
        for ext in ["obj", "tetg"] {
            let name = format!("sample_{i:04}.{ext}");
            assert_eq!(read(&dir.join("s1"), &name), read(&dir.join("s2"), &name), "{name}");
        }
    }
    ok(dir, &["sample", "--count", "1", "--seed", "8", "--out", "s3"]);
    assert_ne!(read(&dir.join("s1"), "sample_0000.tetg"), read(&dir.join("s3"), "sample_0000.tetg"));

    // interpolation endpoints are the DDIM samples of the two seeds
    ok(dir, &["sample", "--count", "1", "--seed", "9", "--out", "s9"]);
    ok(dir, &["interpolate", "--seeds", "7", "9", "--steps", "5", "--out", "interp"]);
    let interp = dir.join("interp");
    assert_eq!(read(&interp, "interp_0000.tetg"), read(&dir.join("s1"), "sample_0000.tetg"));
    assert_eq!(read(&interp, "interp_0004.tetg"), read(&dir.join("s9"), "sample_0000.tetg"));
    assert_eq!(read(&interp, "interp_0000.obj"), read(&dir.join("s1"), "sample_0000.obj"));
    assert_eq!(read(&interp, "interp_0004.obj"), read(&dir.join("s9"), "sample_0000.obj"));
    assert!(interp.join("interp_0002.obj").exists());

    // export of a raw sample reproduces its mesh
    ok(dir, &["sample", "--count", "2", "--seed", "3", "--raw", "--out", "raw"]);
    let raw = dir.join("raw");
    let faces = |name: &str| String::from_utf8(read(&raw, name)).unwrap().lines().filter(|l| l.starts_with("f ")).count();
    assert!(faces("sample_0000.obj") + faces("sample_0001.obj") > 0, "samples should not all be empty");
    for i in 0..2 {
        ok(dir, &["export", &format!("raw/sample_{i:04}.tetg"), "--out", &format!("raw/export_{i}.obj")]);
        assert_eq!(read(&raw, &format!("export_{i}.obj")), read(&raw, &format!("sample_{i:04}.obj")));
    }

    // evaluating a set against itself
    let table = ok(dir, &["eval", "--gen", "shapes", "--reference", "shapes", "--out", "report.jsonl"]);
    assert!(table.contains("MMD"));
    let line = fs::read_to_string(dir.join("report.jsonl")).unwrap();
    let report: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert_eq!(report["cov_cd"], 1.0);
    assert_eq!(report["mmd_cd"], 0.0);
    assert_eq!(report["jsd"], 0.0);
    assert_eq!(report["gen_size"], 3);

    // completion from one depth view
    ok(dir, &["complete", "--mesh", "shapes/a_sphere.obj", "--out", "comp"]);
    assert!(dir.join("comp/complete_0000.obj").exists());
    assert!(dir.join("comp/view.dpth").exists());

    // resumed training appends to the trace
    ok(dir, &["train", "--resume", "--set", "train.steps=5"]);
    let trace = fs::read_to_string(dir.join("model.loss.txt")).unwrap();
    assert_eq!(trace.lines().count(), 35);
    assert!(trace.lines().last().unwrap().starts_with("35\t"));
}

#[test]
fn bad_configs_and_inputs_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("tetdiff.cfg"), "diffusion.T = -1\n").unwrap();
    let out = run(dir, &["export", "x.tetg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diffusion.T"));

    fs::write(dir.join("tetdiff.cfg"), "").unwrap();
    let out = run(dir, &["--set", "fit.bogus=1", "export", "x.tetg"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fit.bogus"));
    let out = run(dir, &["sample", "--checkpoint", "missing.mdck"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mdck"));
    let out = run(dir, &["fit", "nowhere"]);
    assert!(!out.status.success());
}

#[test]
fn checkpoint_grid_must_match() {
    let tmp = prepared();
    let dir = tmp.path();
    let out = run(dir, &["--resolution", "6", "sample"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trained for grid"));
}
