//! Readers and writers for scans, poses, calibration, labels and config.
//!
//! All binary formats are little-endian.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{GridConfig, MosClass, PoseSE3};

/// Orthonormality tolerance accepted from pose and calibration files.
pub const POSE_FILE_TOL: f64 = 1e-6;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn frame_index_from_stem(path: &Path) -> u64 {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Reads a flat `x y z intensity` f32 scan.
pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % 16 != 0 {
        return Err(Error::MalformedScan {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    let points = bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
            Point::with_intensity(f(0) as f64, f(1) as f64, f(2) as f64, f(3))
        })
        .collect();
    let cloud = PointCloud::new(points, frame_index_from_stem(path));
    cloud.validate()?;
    Ok(cloud)
}

pub fn write_scan(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x as f32, p.y as f32, p.z as f32, p.intensity.unwrap_or(0.0)] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &buf)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

fn parse_reals(path: &Path, line_no: usize, text: &str) -> Result<[f64; 12]> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("`{t}`: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    vals.try_into().map_err(|v: Vec<f64>| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: format!("expected 12 numbers, found {}", v.len()),
    })
}

fn pose_from_line(path: &Path, line_no: usize, text: &str) -> Result<PoseSE3> {
    let vals = parse_reals(path, line_no, text)?;
    let m = PoseSE3::from_row_major_3x4(&vals);
    let pose = PoseSE3::from_matrix_tol(m, POSE_FILE_TOL).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg: e.to_string(),
    })?;
    Ok(pose.orthonormalized())
}

/// Reads the `Tr:` entry of a KITTI calibration file.
pub fn read_calibration(path: impl AsRef<Path>) -> Result<PoseSE3> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    for (i, line) in text.lines().enumerate() {
        if let Some(rest) = line.trim_start().strip_prefix("Tr:") {
            return pose_from_line(path, i + 1, rest);
        }
    }
    Err(Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "no `Tr:` entry".into(),
    })
}

/// Reads one world pose per line, expressed in the sensor frame.
///
/// With a calibration file the camera poses are conjugated: `Tr⁻¹ · P · Tr`.
pub fn read_poses(poses_path: impl AsRef<Path>, calib_path: Option<&Path>) -> Result<Vec<PoseSE3>> {
    let path = poses_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let tr = calib_path.map(read_calibration).transpose()?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p = pose_from_line(path, i + 1, line)?;
        let p = match &tr {
            Some(tr) => tr.inverse().compose(&p).compose(tr).orthonormalized(),
            None => p,
        };
        poses.push(p);
    }
    Ok(poses)
}

pub fn write_poses(poses: &[PoseSE3], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_atomic(path.as_ref(), out.as_bytes())
}

pub fn write_calibration(tr: &PoseSE3, path: impl AsRef<Path>) -> Result<()> {
    let row: Vec<String> = tr.to_row_major_3x4().iter().map(|v| format!("{v:e}")).collect();
    write_atomic(path.as_ref(), format!("Tr: {}\n", row.join(" ")).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LabelClass {
    Static,
    Moving,
    Unlabeled,
}

impl LabelClass {
    pub fn mos(self) -> Option<MosClass> {
        match self {
            LabelClass::Static => Some(MosClass::Static),
            LabelClass::Moving => Some(MosClass::Moving),
            LabelClass::Unlabeled => None,
        }
    }
}

/// A raw per-point label word and its derived class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelCode {
    pub raw: u32,
    pub class: LabelClass,
}

/// Semantic code to moving/static mapping, keyed on the lower 16 bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelMap {
    pub moving: BTreeSet<u16>,
    #[serde(rename = "static")]
    pub static_: BTreeSet<u16>,
}

impl Default for LabelMap {
    fn default() -> Self {
        // SemanticKITTI: 9 is the MOS "static" code, 251..=259 the moving classes,
        // 10..=99 the labeled static semantic classes. 0 and 1 stay unlabeled.
        let static_ = [
            9, 10, 11, 13, 15, 16, 18, 20, 30, 31, 32, 40, 44, 48, 49, 50, 51, 52, 60, 70, 71,
            72, 80, 81, 99,
        ];
        LabelMap {
            moving: (251..=259).collect(),
            static_: static_.into_iter().collect(),
        }
    }
}

impl LabelMap {
    pub fn new(moving: impl IntoIterator<Item = u16>, static_: impl IntoIterator<Item = u16>) -> Self {
        LabelMap {
            moving: moving.into_iter().collect(),
            static_: static_.into_iter().collect(),
        }
    }

    pub fn classify(&self, raw: u32) -> LabelClass {
        let sem = (raw & 0xFFFF) as u16;
        if self.moving.contains(&sem) {
            LabelClass::Moving
        } else if self.static_.contains(&sem) {
            LabelClass::Static
        } else {
            LabelClass::Unlabeled
        }
    }

    pub fn code(&self, raw: u32) -> LabelCode {
        LabelCode {
            raw,
            class: self.classify(raw),
        }
    }
}

pub fn read_label_words(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::MalformedLabels {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_labels(path: impl AsRef<Path>, map: &LabelMap) -> Result<Vec<LabelCode>> {
    Ok(read_label_words(path)?
        .into_iter()
        .map(|raw| map.code(raw))
        .collect())
}

pub fn write_labels(raw: &[u32], path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = raw.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_atomic(path.as_ref(), &bytes)
}

/// Checks the positional contract between a scan and its label file.
pub fn pair_labels(cloud: &PointCloud, labels: Vec<LabelCode>) -> Result<Vec<LabelCode>> {
    if labels.len() != cloud.len() {
        return Err(Error::LabelMismatch {
            labels: labels.len(),
            points: cloud.len(),
        });
    }
    Ok(labels)
}

/// Everything a pipeline run reads from its config document.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub labels: LabelMap,
    /// Static/moving frequencies used for loss weights, when known.
    pub class_frequencies: Option<Vec<f64>>,
}

const GRID_KEYS: &[&str] = &[
    "angular_bins",
    "radial_bins",
    "rho_min",
    "rho_max",
    "theta_min",
    "theta_max",
    "z_min",
    "z_max",
    "d_min",
    "d_max",
    "min_points",
    "window",
];

/// Parses a TOML config. Returns the config and one warning per unknown key.
pub fn parse_config(text: &str) -> Result<(PipelineConfig, Vec<String>)> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<document>", e.message().to_string()))?;
    let mut grid_table = toml::Table::new();
    let mut warnings = Vec::new();
    let mut labels = LabelMap::default();
    let mut class_frequencies = None;
    for (key, value) in table {
        if GRID_KEYS.contains(&key.as_str()) {
            grid_table.insert(key, value);
        } else if key == "labels" {
            labels = value
                .try_into()
                .map_err(|e: toml::de::Error| Error::config("labels", e.message().to_string()))?;
        } else if key == "class_frequencies" {
            let f: Vec<f64> = value.try_into().map_err(|e: toml::de::Error| {
                Error::config("class_frequencies", e.message().to_string())
            })?;
            class_frequencies = Some(f);
        } else if key == "train" {
            // Read by the trainer.
        } else {
            warnings.push(format!("unknown config key `{key}` ignored"));
        }
    }
    let grid: GridConfig = toml::Value::Table(grid_table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("<grid>", e.message().to_string()))?;
    grid.validate()?;
    if let Some(f) = &class_frequencies {
        crate::objective::ClassStats::new(f.clone())
            .map_err(|e| Error::config("class_frequencies", e.to_string()))?;
    }
    Ok((
        PipelineConfig {
            grid,
            labels,
            class_frequencies,
        },
        warnings,
    ))
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (cfg, warnings) = parse_config(&text)?;
    for w in warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(cfg)
}
