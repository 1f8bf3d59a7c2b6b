use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motionbev::pipeline::ply_vertex_count;

fn motionbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionbev"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SCENE: &str = r#"
seed = 7
frames = 8
ground_points = 2000
max_range = 30.0
random_objects = { moving = 2, parked = 1 }
"#;

// Writes the 8-frame scene above as `root/sequences/00`.
fn synth_scene(root: &Path) -> std::path::PathBuf {
    let spec = root.join("scene.toml");
    fs::write(&spec, SCENE).unwrap();
    let data = root.join("data");
    let o = motionbev(&["synth", arg(&spec), arg(&data)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    data.join("sequences").join("00")
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(motionbev(&[]).status.code(), Some(2));
    assert_eq!(motionbev(&["check", "--suite", "nope"]).status.code(), Some(2));
    assert_eq!(motionbev(&["export-ply", "a.bin", "b.ply"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none");
    let o = motionbev(&["featurize", arg(&missing), arg(&missing.join("p.txt")), arg(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn check_geometry_passes() {
    let o = motionbev(&["check", "--suite", "geometry"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.starts_with("PASS geometry/")));
    assert!(!out.contains("FAIL"));
}

#[test]
fn synth_then_featurize_eight_frames() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_scene(dir.path());
    assert_eq!(fs::read_dir(seq.join("velodyne")).unwrap().count(), 8);

    let out = dir.path().join("features");
    let o = motionbev(&[
        "featurize",
        arg(&seq.join("velodyne")),
        arg(&seq.join("poses.txt")),
        arg(&out),
        "--calib",
        arg(&seq.join("calib.txt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ms/frame"));
    assert!(out.join("000000.mbev").exists());
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["frames_read"], 8);
    assert_eq!(manifest["featurized"], serde_json::json!([0]));

    let o = motionbev(&[
        "featurize",
        arg(&seq.join("velodyne")),
        arg(&seq.join("poses.txt")),
        arg(&dir.path().join("df")),
        "--mode",
        "delay-free",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("df").join("000007.mbev").exists());
}

#[test]
fn eval_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_scene(dir.path());
    let json = dir.path().join("eval.json");
    let o = motionbev(&["eval", arg(&seq), arg(&seq), "--json", arg(&json)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).lines().last().unwrap().ends_with("IoU 1.0000"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(json).unwrap()).unwrap();
    assert_eq!(report["overall"]["iou"], 1.0);
}

#[test]
fn export_ply_vertex_counts() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_scene(dir.path());
    let scan = seq.join("velodyne").join("000003.bin");
    let points = fs::metadata(&scan).unwrap().len() as usize / 16;

    let by_class = dir.path().join("class.ply");
    let o = motionbev(&[
        "export-ply",
        arg(&scan),
        arg(&by_class),
        "--labels",
        arg(&seq.join("labels").join("000003.label")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ply_vertex_count(&by_class).unwrap(), points);

    let feats = dir.path().join("features");
    let o = motionbev(&["featurize", arg(&seq.join("velodyne")), arg(&seq.join("poses.txt")), arg(&feats)]);
    assert_eq!(o.status.code(), Some(0));
    let first = seq.join("velodyne").join("000000.bin");
    let by_motion = dir.path().join("motion.ply");
    let o = motionbev(&[
        "export-ply",
        arg(&first),
        arg(&by_motion),
        "--features",
        arg(&feats.join("000000.mbev")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let first_points = fs::metadata(&first).unwrap().len() as usize / 16;
    assert_eq!(ply_vertex_count(&by_motion).unwrap(), first_points);
}

const SMALL_BENCHMARK: &str = r#"
[[sequences]]
split = "train"
seed = 1
frames = 10
ground_points = 1500
max_range = 20.0
random_objects = { moving = 1, parked = 1 }

[[sequences]]
split = "val"
seed = 2
frames = 10
ground_points = 1500
max_range = 20.0
random_objects = { moving = 1, parked = 1 }
"#;

const SMALL_CONFIG: &str = r#"
angular_bins = 16
radial_bins = 16
rho_max = 20.0
window = 4

[train]
epochs = 2
batch_size = 2
channels = 4
hidden = 8
"#;

#[test]
fn toy_train_writes_model_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bench.toml");
    let config = dir.path().join("toy.toml");
    fs::write(&spec, SMALL_BENCHMARK).unwrap();
    fs::write(&config, SMALL_CONFIG).unwrap();
    let data = dir.path().join("data");
    let o = motionbev(&["synth", arg(&spec), arg(&data)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("1 train, 1 val"));

    let model = dir.path().join("model.bin");
    let o = motionbev(&["toy-train", arg(&data), arg(&config), arg(&model), "--epochs", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(model.exists());
    let history: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("model.bin.history.json")).unwrap()).unwrap();
    assert_eq!(history.as_array().unwrap().len(), 1);
}
