//! Directory-level runs: featurizing a scan sequence, scoring label
//! directories and writing PLY exports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{partition, GridConfig, MosClass};
use crate::ingest::{read_label_words, read_poses, read_scan, write_atomic, LabelClass, LabelMap};
use crate::motion::{FeatureMode, MotionFeatures, WindowState};
use crate::objective::{accumulate, ConfusionCounts};
use crate::par::Exec;
use crate::synth::sorted_files;
use crate::PointCloud;

pub fn feature_file_name(frame: u64) -> String {
    format!("{frame:06}.mbev")
}

/// Record of a featurize run. Holds no timings, so two runs on the same
/// inputs produce the same manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeaturizeManifest {
    pub mode: &'static str,
    pub window: usize,
    pub frames_read: usize,
    /// Frames that got a feature file, in order.
    pub featurized: Vec<u64>,
    /// Frames without a file: the trailing `N − 1` in complete mode, the
    /// leading `N − 1` in delay-free mode.
    pub warm_up: Vec<u64>,
    pub warnings: Vec<String>,
}

/// Wall-clock totals of a featurize run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub read: Duration,
    pub features: Duration,
    pub write: Duration,
}

impl StageTimings {
    pub fn per_frame(&self, frames: usize) -> Duration {
        (self.read + self.features + self.write) / frames.max(1) as u32
    }
}

/// Scans in `scan_dir` (sorted `*.bin`) paired by frame index with the poses
/// in `pose_file`; one `NNNNNN.mbev` per finished frame goes to `out_dir`.
pub fn featurize(
    scan_dir: &Path,
    pose_file: &Path,
    calib: Option<&Path>,
    grid: &GridConfig,
    out_dir: &Path,
    mode: FeatureMode,
    exec: Exec,
) -> Result<(FeaturizeManifest, StageTimings)> {
    let scans = sorted_files(scan_dir, "bin")?;
    let poses = read_poses(pose_file, calib)?;
    if scans.is_empty() {
        return Err(Error::InsufficientFrames { need: 1, have: 0 });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = WindowState::with_mode(grid.clone(), mode)?.with_exec(exec);
    let mut timings = StageTimings::default();
    let mut manifest = FeaturizeManifest {
        mode: match mode {
            FeatureMode::Complete => "complete",
            FeatureMode::DelayFree => "delay-free",
        },
        window: grid.window,
        frames_read: scans.len(),
        featurized: Vec::new(),
        warm_up: Vec::new(),
        warnings: Vec::new(),
    };
    if scans.len() < grid.window {
        manifest.warnings.push(format!(
            "{} frames is fewer than the window of {}; no features produced",
            scans.len(),
            grid.window
        ));
    }
    let mut seen = Vec::with_capacity(scans.len());
    for path in &scans {
        let t = Instant::now();
        let cloud = read_scan(path)?;
        let idx = cloud.frame_index;
        let pose = *poses.get(idx as usize).ok_or(Error::IndexOutOfRange {
            index: idx as usize,
            len: poses.len(),
        })?;
        timings.read += t.elapsed();
        seen.push(idx);

        let t = Instant::now();
        let out = match mode {
            FeatureMode::Complete => state.push_frame(cloud, pose)?,
            FeatureMode::DelayFree => {
                state.push_frame(cloud, pose)?;
                (state.buffered() == grid.window).then(|| state.delay_free_features()).transpose()?
            }
        };
        timings.features += t.elapsed();

        if let Some(f) = out {
            let t = Instant::now();
            f.write(out_dir.join(feature_file_name(f.frame_index)))?;
            manifest.featurized.push(f.frame_index);
            timings.write += t.elapsed();
        }
    }
    manifest.warm_up = seen
        .into_iter()
        .filter(|f| !manifest.featurized.contains(f))
        .collect();
    Ok((manifest, timings))
}

/// Confusion counts of one predicted/ground-truth label directory pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceScore {
    pub name: String,
    pub frames: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    pub overall: SequenceScore,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for q in self.sequences.iter().chain([&self.overall]) {
            let _ = writeln!(
                s,
                "{:<12} frames {:>5}  TP {:>9}  FP {:>9}  FN {:>9}  IoU {:.4}",
                q.name, q.frames, q.tp, q.fp, q.fn_, q.iou
            );
        }
        s
    }
}

fn score(name: &str, frames: usize, c: ConfusionCounts) -> SequenceScore {
    SequenceScore {
        name: name.to_string(),
        frames,
        tp: c.tp,
        fp: c.fp,
        fn_: c.fn_,
        tn: c.tn,
        iou: c.iou(),
    }
}

// A directory holding `*.label` files directly, or via a `labels` child.
fn label_dir(dir: &Path) -> Option<PathBuf> {
    let has = |d: &Path| sorted_files(d, "label").is_ok_and(|f| !f.is_empty());
    if has(dir) {
        Some(dir.to_path_buf())
    } else if has(&dir.join("labels")) {
        Some(dir.join("labels"))
    } else {
        None
    }
}

// Sequences under `root`: itself when it holds labels, otherwise every
// subdirectory (or `sequences/*`) that does.
fn label_sequences(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if let Some(d) = label_dir(root) {
        let name = root
            .file_name()
            .map_or_else(|| "sequence".to_string(), |n| n.to_string_lossy().into_owned());
        return Ok(vec![(name, d)]);
    }
    let base = if root.join("sequences").is_dir() {
        root.join("sequences")
    } else {
        root.to_path_buf()
    };
    let mut subdirs: Vec<PathBuf> = fs::read_dir(&base)
        .map_err(|e| Error::io(&base, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    let found: Vec<(String, PathBuf)> = subdirs
        .iter()
        .filter_map(|d| label_dir(d).map(|l| (d.file_name().unwrap_or_default().to_string_lossy().into_owned(), l)))
        .collect();
    if found.is_empty() {
        return Err(Error::Config {
            field: root.display().to_string(),
            msg: "no label files found".into(),
        });
    }
    Ok(found)
}

/// Moving-class IoU of predicted labels against ground truth. Predictions
/// not mapped to moving count as static; unlabeled ground truth is ignored.
pub fn evaluate_label_dirs(pred_root: &Path, gt_root: &Path, map: &LabelMap) -> Result<EvalReport> {
    let gt = label_sequences(gt_root)?;
    let pred = label_sequences(pred_root)?;
    let mut total = ConfusionCounts::default();
    let mut total_frames = 0;
    let mut sequences = Vec::new();
    for (name, gt_dir) in &gt {
        let pred_dir = if gt.len() == 1 && pred.len() == 1 {
            &pred[0].1
        } else {
            &pred
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config {
                    field: pred_root.display().to_string(),
                    msg: format!("no predictions for sequence {name}"),
                })?
                .1
        };
        let mut counts = ConfusionCounts::default();
        let files = sorted_files(gt_dir, "label")?;
        for gt_file in &files {
            let pred_file = pred_dir.join(gt_file.file_name().unwrap_or_default());
            let truth: Vec<Option<MosClass>> = read_label_words(gt_file)?
                .into_iter()
                .map(|r| map.classify(r).mos())
                .collect();
            let guess: Vec<MosClass> = read_label_words(&pred_file)?
                .into_iter()
                .map(|r| match map.classify(r) {
                    LabelClass::Moving => MosClass::Moving,
                    _ => MosClass::Static,
                })
                .collect();
            accumulate(&mut counts, &guess, &truth)?;
        }
        total += counts;
        total_frames += files.len();
        sequences.push(score(name, files.len(), counts));
    }
    Ok(EvalReport {
        sequences,
        overall: score("overall", total_frames, total),
    })
}

/// RGB per point for a PLY export.
pub type Rgb = [u8; 3];

/// Moving red, static grey, unlabeled blue.
pub fn class_color(class: LabelClass) -> Rgb {
    match class {
        LabelClass::Moving => [220, 40, 40],
        LabelClass::Static => [170, 170, 170],
        LabelClass::Unlabeled => [60, 90, 200],
    }
}

/// Black-body style ramp over `t ∈ [0, 1]`: black, red, yellow, white.
pub fn heat_color(t: f64) -> Rgb {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let ch = |lo: f64| (((t - lo) * 3.0).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(0.0), ch(1.0 / 3.0), ch(2.0 / 3.0)]
}

/// Per-point colors from the magnitude of channel 0 of `features` in each
/// point's cell, scaled so `d_max` is white. Out-of-grid points are black.
pub fn residual_colors(cloud: &PointCloud, features: &MotionFeatures, grid: &GridConfig) -> Result<Vec<Rgb>> {
    if (features.angular_bins, features.radial_bins) != (grid.angular_bins, grid.radial_bins) {
        return Err(Error::Shape(format!(
            "features are {}x{}, grid is {}x{}",
            features.angular_bins, features.radial_bins, grid.angular_bins, grid.radial_bins
        )));
    }
    let part = partition(cloud, grid);
    let ch0 = features.channel(0);
    Ok(part
        .assignment()
        .iter()
        .map(|g| g.map_or([0, 0, 0], |g| heat_color(ch0[grid.flat(g)].abs() / grid.d_max)))
        .collect())
}

/// ASCII PLY with `x y z` as float and one `red green blue` per vertex.
pub fn write_ply(cloud: &PointCloud, colors: &[Rgb], path: &Path) -> Result<()> {
    if colors.len() != cloud.len() {
        return Err(Error::LabelMismatch {
            labels: colors.len(),
            points: cloud.len(),
        });
    }
    let mut s = String::with_capacity(64 + cloud.len() * 40);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    for (p, c) in cloud.points.iter().zip(colors) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p.x as f32, p.y as f32, p.z as f32, c[0], c[1], c[2]);
    }
    write_atomic(path, s.as_bytes())
}

/// Vertex count declared in a PLY header.
pub fn ply_vertex_count(path: &Path) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .take_while(|l| *l != "end_header")
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "no vertex element".into(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, LabeledSequence, SceneSpec};

    fn grid(window: usize) -> GridConfig {
        GridConfig {
            angular_bins: 32,
            radial_bins: 32,
            rho_max: 40.0,
            window,
            ..GridConfig::default()
        }
    }

    fn sequence(dir: &Path, frames: usize) -> PathBuf {
        let spec = SceneSpec {
            frames,
            ground_points: 1_000,
            random_objects: crate::synth::RandomObjects { moving: 1, parked: 1 },
            ..SceneSpec::default()
        };
        let seq = LabeledSequence::from_frames(generate(&spec).unwrap());
        let d = dir.join("seq");
        seq.export(&d).unwrap();
        d
    }

    fn run(dir: &Path, frames: usize, mode: FeatureMode) -> FeaturizeManifest {
        let seq = sequence(dir, frames);
        let out = dir.join("out");
        featurize(
            &seq.join("velodyne"),
            &seq.join("poses.txt"),
            Some(&seq.join("calib.txt")),
            &grid(8),
            &out,
            mode,
            Exec::default(),
        )
        .unwrap()
        .0
    }

    #[test]
    fn eight_frames_complete_gives_frame_zero() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(dir.path(), 8, FeatureMode::Complete);
        assert_eq!(m.featurized, vec![0]);
        assert_eq!(m.warm_up, (1..8).collect::<Vec<u64>>());
        assert_eq!(sorted_files(&dir.path().join("out"), "mbev").unwrap().len(), 1);
    }

    #[test]
    fn eight_frames_delay_free_gives_frame_seven() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(dir.path(), 8, FeatureMode::DelayFree);
        assert_eq!(m.featurized, vec![7]);
        let f = MotionFeatures::read(dir.path().join("out").join(feature_file_name(7))).unwrap();
        assert_eq!(f.channels, 1);
    }

    #[test]
    fn short_sequence_warns() {
        let dir = tempfile::tempdir().unwrap();
        let m = run(dir.path(), 7, FeatureMode::Complete);
        assert!(m.featurized.is_empty());
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn eval_identity_and_all_static() {
        let dir = tempfile::tempdir().unwrap();
        let seq = sequence(dir.path(), 3);
        let map = LabelMap::default();
        let r = evaluate_label_dirs(&seq, &seq, &map).unwrap();
        assert_eq!(r.overall.iou, 1.0);

        let pred = dir.path().join("pred");
        fs::create_dir_all(&pred).unwrap();
        for f in sorted_files(&seq.join("labels"), "label").unwrap() {
            let n = read_label_words(&f).unwrap().len();
            crate::ingest::write_labels(&vec![9; n], pred.join(f.file_name().unwrap())).unwrap();
        }
        let r = evaluate_label_dirs(&pred, &seq, &map).unwrap();
        assert_eq!(r.overall.tp, 0);
        assert_eq!(r.overall.iou, 0.0);
    }

    #[test]
    fn ply_has_one_vertex_per_point() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = PointCloud::new(vec![crate::Point::new(1.0, 2.0, 3.0); 5], 0);
        let path = dir.path().join("a.ply");
        write_ply(&cloud, &[[1, 2, 3]; 5], &path).unwrap();
        assert_eq!(ply_vertex_count(&path).unwrap(), 5);
        assert!(write_ply(&cloud, &[[0, 0, 0]; 4], &path).is_err());
    }

    #[test]
    fn heat_ramp_ends() {
        assert_eq!(heat_color(0.0), [0, 0, 0]);
        assert_eq!(heat_color(1.0), [255, 255, 255]);
        assert_eq!(heat_color(f64::NAN), [0, 0, 0]);
    }
}
