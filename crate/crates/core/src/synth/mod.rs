//! Synthetic scenes with ground truth, reference recomputations, and a toy
//! model trained on them.

mod oracle;
mod scene;
mod toy;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use oracle::oracle_motion_features;
pub use scene::{
    generate, generate_with, BoxObject, EgoSpec, RandomObjects, SceneSpec, SynthFrame, TrajectoryKind,
    LABEL_GROUND, LABEL_MOVING, LABEL_PARKED,
};
pub use toy::{
    build_samples, class_stats, evaluate, loss_and_grad, predict_cells, toy_train, EpochStats, Sample, ToyConfig,
    ToyModel, ToyRun,
};

use crate::cloud::PointCloud;
use crate::container::{read_records, write_records, Record};
use crate::error::{Error, Result};
use crate::geometry::{GridConfig, PoseSE3};
use crate::ingest::{read_label_words, read_poses, read_scan, write_calibration, write_labels, write_poses, write_scan};
use crate::netcore::ParamSet;

/// A sequence in memory: clouds, world poses and raw label words per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub clouds: Vec<PointCloud>,
    pub poses: Vec<PoseSE3>,
    pub labels: Vec<Vec<u32>>,
}

impl LabeledSequence {
    pub fn from_frames(frames: Vec<SynthFrame>) -> Self {
        let mut seq = LabeledSequence {
            clouds: Vec::with_capacity(frames.len()),
            poses: Vec::with_capacity(frames.len()),
            labels: Vec::with_capacity(frames.len()),
        };
        for f in frames {
            seq.clouds.push(f.cloud);
            seq.poses.push(f.pose);
            seq.labels.push(f.labels);
        }
        seq
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    /// Writes `velodyne/NNNNNN.bin`, `labels/NNNNNN.label`, `poses.txt` and
    /// an identity `calib.txt` under `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        let velodyne = dir.join("velodyne");
        let labels = dir.join("labels");
        for d in [&velodyne, &labels] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        for (cloud, raw) in self.clouds.iter().zip(&self.labels) {
            let stem = format!("{:06}", cloud.frame_index);
            write_scan(cloud, velodyne.join(format!("{stem}.bin")))?;
            write_labels(raw, labels.join(format!("{stem}.label")))?;
        }
        write_poses(&self.poses, dir.join("poses.txt"))?;
        write_calibration(&PoseSE3::identity(), dir.join("calib.txt"))
    }

    /// Reads a directory written by [`LabeledSequence::export`] (or laid out
    /// the same way). Missing label files are an error.
    pub fn load(dir: &Path) -> Result<Self> {
        let scans = sorted_files(&dir.join("velodyne"), "bin")?;
        let calib = dir.join("calib.txt");
        let poses = read_poses(dir.join("poses.txt"), calib.exists().then_some(calib.as_path()))?;
        if poses.len() < scans.len() {
            return Err(Error::InsufficientFrames {
                need: scans.len(),
                have: poses.len(),
            });
        }
        let mut seq = LabeledSequence {
            clouds: Vec::new(),
            poses: Vec::new(),
            labels: Vec::new(),
        };
        for path in scans {
            let cloud = read_scan(&path)?;
            let label_path = dir
                .join("labels")
                .join(path.file_stem().unwrap_or_default())
                .with_extension("label");
            let raw = read_label_words(&label_path)?;
            if raw.len() != cloud.len() {
                return Err(Error::LabelMismatch {
                    labels: raw.len(),
                    points: cloud.len(),
                });
            }
            let idx = cloud.frame_index as usize;
            let pose = *poses.get(idx).ok_or(Error::IndexOutOfRange {
                index: idx,
                len: poses.len(),
            })?;
            seq.clouds.push(cloud);
            seq.poses.push(pose);
            seq.labels.push(raw);
        }
        Ok(seq)
    }
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    #[serde(default)]
    pub split: Split,
    #[serde(flatten)]
    pub scene: SceneSpec,
}

/// A list of scenes with train/val assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub sequences: Vec<BenchmarkEntry>,
}

/// The benchmark shipped with the crate.
pub const STANDARD_BENCHMARK: &str = include_str!("../../data/benchmark.toml");

/// Grid and training settings that go with [`STANDARD_BENCHMARK`].
pub const STANDARD_TOY_CONFIG: &str = include_str!("../../data/toy.toml");

impl BenchmarkSpec {
    /// Parses either a benchmark (with `[[sequences]]`) or a single scene,
    /// which becomes one training sequence.
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Scene(e.message().to_string()))?;
        if table.contains_key("sequences") {
            toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Scene(e.message().to_string()))
        } else {
            Ok(BenchmarkSpec {
                sequences: vec![BenchmarkEntry {
                    split: Split::Train,
                    scene: SceneSpec::from_toml(text)?,
                }],
            })
        }
    }

    pub fn standard() -> Self {
        Self::from_toml(STANDARD_BENCHMARK).expect("shipped benchmark parses")
    }

    pub fn generate(&self) -> Result<Vec<(Split, LabeledSequence)>> {
        self.sequences
            .iter()
            .map(|e| Ok((e.split, LabeledSequence::from_frames(generate(&e.scene)?))))
            .collect()
    }
}

/// Splits of a dataset tree, stored as `dataset.toml` at its root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DatasetIndex {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Writes `sequences/NN/...` for every entry plus `dataset.toml`.
pub fn export_dataset(sequences: &[(Split, LabeledSequence)], out: &Path) -> Result<DatasetIndex> {
    let mut index = DatasetIndex::default();
    for (i, (split, seq)) in sequences.iter().enumerate() {
        let name = format!("{i:02}");
        seq.export(&out.join("sequences").join(&name))?;
        match split {
            Split::Train => index.train.push(name),
            Split::Val => index.val.push(name),
        }
    }
    let text = toml::to_string(&index).map_err(|e| Error::Container(e.to_string()))?;
    crate::ingest::write_atomic(&out.join("dataset.toml"), text.as_bytes())?;
    Ok(index)
}

/// Reads a dataset tree written by [`export_dataset`].
pub fn load_dataset(root: &Path) -> Result<Vec<(Split, String, LabeledSequence)>> {
    let path = root.join("dataset.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex =
        toml::from_str(&text).map_err(|e| Error::config("dataset.toml", e.message().to_string()))?;
    let mut out = Vec::new();
    for (split, names) in [(Split::Train, &index.train), (Split::Val, &index.val)] {
        for name in names {
            let seq = LabeledSequence::load(&root.join("sequences").join(name))?;
            out.push((split, name.clone(), seq));
        }
    }
    Ok(out)
}

fn record_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [] => (1, 1, 1),
        [w] => (1, 1, *w),
        [h, w] => (1, *h, *w),
        [lead @ .., h, w] => (lead.iter().product(), *h, *w),
    }
}

/// Stores every parameter tensor as one record, tagged by position.
pub fn save_params<P: ParamSet>(params: &P, path: impl AsRef<Path>) -> Result<()> {
    let records = params
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (c, h, w) = record_dims(t.shape());
            Record::from_f64(c, h, w, i as u32, t.data())
        })
        .collect::<Result<Vec<_>>>()?;
    write_records(&records, path)
}

/// Loads parameters saved by [`save_params`] into `params`, whose shapes
/// must match. Values come back at single precision.
pub fn load_params<P: ParamSet>(params: &mut P, path: impl AsRef<Path>) -> Result<()> {
    let records = read_records(path)?;
    let mut tensors = params.tensors_mut();
    if records.len() != tensors.len() {
        return Err(Error::Container(format!(
            "{} records for {} parameter tensors",
            records.len(),
            tensors.len()
        )));
    }
    for (i, (r, t)) in records.iter().zip(tensors.iter_mut()).enumerate() {
        if (r.c as usize, r.h as usize, r.w as usize) != record_dims(t.shape()) || r.tag as usize != i {
            return Err(Error::Container(format!(
                "record {i} is {}x{}x{} tag {}, expected {:?}",
                r.c,
                r.h,
                r.w,
                r.tag,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&r.to_f64());
    }
    Ok(())
}

/// Grid used with the shipped benchmark.
pub fn standard_grid() -> GridConfig {
    crate::ingest::parse_config(STANDARD_TOY_CONFIG)
        .expect("shipped config parses")
        .0
        .grid
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_benchmark_is_valid() {
        let b = BenchmarkSpec::standard();
        assert!(b.sequences.len() >= 5);
        assert!(b.sequences.iter().any(|e| e.split == Split::Val));
        for e in &b.sequences {
            assert!(e.scene.frames >= 24);
            e.scene.validate().unwrap();
        }
        let moving: usize = b
            .sequences
            .iter()
            .map(|e| e.scene.all_objects().iter().filter(|o| o.is_moving()).count())
            .sum();
        assert!(moving >= 2);
        let grid = standard_grid();
        assert_eq!((grid.angular_bins, grid.radial_bins, grid.window), (64, 64, 8));
        ToyConfig::from_document(STANDARD_TOY_CONFIG).unwrap();
    }

    #[test]
    fn single_scene_document_is_one_train_sequence() {
        let b = BenchmarkSpec::from_toml("seed = 3\nframes = 10\n").unwrap();
        assert_eq!(b.sequences.len(), 1);
        assert_eq!(b.sequences[0].split, Split::Train);
        assert_eq!(b.sequences[0].scene.frames, 10);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SceneSpec {
            frames: 3,
            ground_points: 200,
            random_objects: RandomObjects { moving: 1, parked: 0 },
            ..SceneSpec::default()
        };
        let seq = LabeledSequence::from_frames(generate(&spec).unwrap());
        export_dataset(&[(Split::Val, seq.clone())], dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 1);
        let (split, name, got) = &back[0];
        assert_eq!((*split, name.as_str()), (Split::Val, "00"));
        assert_eq!(got.labels, seq.labels);
        assert_eq!(got.len(), 3);
        for (a, b) in got.clouds.iter().zip(&seq.clouds) {
            assert_eq!(a.frame_index, b.frame_index);
            assert!((a.points[5].x - b.points[5].x).abs() < 1e-5);
        }
        for (a, b) in got.poses.iter().zip(&seq.poses) {
            assert!(a.max_abs_diff(b) < 1e-9);
        }
    }

    #[test]
    fn params_round_trip_at_f32() {
        let grid = standard_grid();
        let cfg = ToyConfig {
            channels: 4,
            hidden: 5,
            ..ToyConfig::default()
        };
        let model = ToyModel::init(&cfg, &grid);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mbev");
        save_params(&model, &path).unwrap();
        let mut back = model.zeros_like();
        load_params(&mut back, &path).unwrap();
        for (a, b) in model.tensors().iter().zip(back.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        let mut wrong = ToyModel::init(&ToyConfig { channels: 3, ..cfg }, &grid);
        assert!(load_params(&mut wrong, &path).is_err());
    }
}
