//! Height-difference motion features over two adjacent temporal windows.
//!
//! The newer window `Q1` holds the most recent `N/2` frames, the older
//! window `Q2` the `N/2` frames before them. For a frame sitting at window
//! position `k` (0 = newest), channel `k` of its features is the filtered
//! residual `I1 − I2` when `k < N/2` and `I2 − I1` otherwise, with both
//! height images built in that frame's own polar grid.

use std::collections::VecDeque;
use std::path::Path;

use crate::cloud::PointCloud;
use crate::container::{self, Record};
use crate::error::{Error, Result};
use crate::geometry::{cart_to_polar, grid_index, GridConfig, PoseSE3};
use crate::par::{self, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowHalf {
    /// Q1, the newest `N/2` frames.
    Newer,
    /// Q2, the `N/2` frames before Q1.
    Older,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualSign {
    NewerMinusOlder,
    OlderMinusNewer,
}

impl ResidualSign {
    /// Sign rule for window position `k`.
    pub fn for_position(k: usize, half: usize) -> Self {
        if k < half {
            ResidualSign::NewerMinusOlder
        } else {
            ResidualSign::OlderMinusNewer
        }
    }
}

/// Per-cell `max z − min z` of a window's in-band points.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightImage {
    pub angular_bins: usize,
    pub radial_bins: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// In-band point count per cell.
    pub counts: Vec<u32>,
    pub window: WindowHalf,
    pub reference_frame: u64,
}

struct HeightAccumulator {
    lo: Vec<f64>,
    hi: Vec<f64>,
    counts: Vec<u32>,
}

impl HeightAccumulator {
    fn new(cells: usize) -> Self {
        HeightAccumulator {
            lo: vec![f64::INFINITY; cells],
            hi: vec![f64::NEG_INFINITY; cells],
            counts: vec![0; cells],
        }
    }

    fn add(&mut self, cloud: &PointCloud, to_reference: Option<&PoseSE3>, cfg: &GridConfig) {
        for p in &cloud.points {
            let p = match to_reference {
                Some(t) => t.apply(p),
                None => *p,
            };
            if !(cfg.z_min < p.z && p.z < cfg.z_max) {
                continue;
            }
            let Some(g) = grid_index(&cart_to_polar(&p), cfg) else {
                continue;
            };
            let c = cfg.flat(g);
            self.counts[c] += 1;
            if p.z < self.lo[c] {
                self.lo[c] = p.z;
            }
            if p.z > self.hi[c] {
                self.hi[c] = p.z;
            }
        }
    }

    fn finish(self, cfg: &GridConfig, window: WindowHalf, reference_frame: u64) -> HeightImage {
        let valid: Vec<bool> = self.counts.iter().map(|&n| n > 0).collect();
        let values = valid
            .iter()
            .enumerate()
            .map(|(c, &ok)| if ok { self.hi[c] - self.lo[c] } else { 0.0 })
            .collect();
        HeightImage {
            angular_bins: cfg.angular_bins,
            radial_bins: cfg.radial_bins,
            values,
            valid,
            counts: self.counts,
            window,
            reference_frame,
        }
    }
}

/// Height image of clouds already expressed in the reference frame.
pub fn height_image(
    clouds: &[PointCloud],
    cfg: &GridConfig,
    window: WindowHalf,
    reference_frame: u64,
) -> HeightImage {
    let mut acc = HeightAccumulator::new(cfg.cells());
    for cloud in clouds {
        acc.add(cloud, None, cfg);
    }
    acc.finish(cfg, window, reference_frame)
}

/// Height image of sensor-frame clouds, each moved by its transform first.
pub fn height_image_transformed(
    clouds: &[(&PointCloud, PoseSE3)],
    cfg: &GridConfig,
    window: WindowHalf,
    reference_frame: u64,
) -> HeightImage {
    let mut acc = HeightAccumulator::new(cfg.cells());
    for (cloud, t) in clouds {
        acc.add(cloud, Some(t), cfg);
    }
    acc.finish(cfg, window, reference_frame)
}

/// Keeps `raw` only inside the inclusive band `[d_min, d_max]` and when both
/// windows saw at least `min_points` in-band points in the cell.
pub fn filter_residual(raw: f64, count_newer: u32, count_older: u32, cfg: &GridConfig) -> f64 {
    let enough = count_newer >= cfg.min_points && count_older >= cfg.min_points;
    if enough && cfg.d_min <= raw && raw <= cfg.d_max {
        raw
    } else {
        0.0
    }
}

/// Filtered signed difference of two height images. `newer` is Q1.
pub fn residual(
    newer: &HeightImage,
    older: &HeightImage,
    sign: ResidualSign,
    cfg: &GridConfig,
) -> Result<Vec<f64>> {
    if newer.angular_bins != older.angular_bins
        || newer.radial_bins != older.radial_bins
        || newer.values.len() != cfg.cells()
        || older.values.len() != cfg.cells()
    {
        return Err(Error::Shape(format!(
            "height images {}x{} and {}x{} for a {}x{} grid",
            newer.angular_bins,
            newer.radial_bins,
            older.angular_bins,
            older.radial_bins,
            cfg.angular_bins,
            cfg.radial_bins
        )));
    }
    if newer.reference_frame != older.reference_frame {
        return Err(Error::Shape(format!(
            "height images in frames {} and {}",
            newer.reference_frame, older.reference_frame
        )));
    }
    Ok((0..cfg.cells())
        .map(|c| {
            if !(newer.valid[c] && older.valid[c]) {
                return 0.0;
            }
            let raw = match sign {
                ResidualSign::NewerMinusOlder => newer.values[c] - older.values[c],
                ResidualSign::OlderMinusNewer => older.values[c] - newer.values[c],
            };
            filter_residual(raw, newer.counts[c], older.counts[c], cfg)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// All `N` channels, emitted `N − 1` frames late.
    Complete,
    /// Channel 0 only, emitted immediately.
    DelayFree,
}

/// `C × h × w` motion features of one frame, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    pub angular_bins: usize,
    pub radial_bins: usize,
    pub channels: usize,
    pub data: Vec<f64>,
    pub frame_index: u64,
    pub mode: FeatureMode,
}

impl MotionFeatures {
    pub fn zeros(cfg: &GridConfig, channels: usize, frame_index: u64, mode: FeatureMode) -> Self {
        MotionFeatures {
            angular_bins: cfg.angular_bins,
            radial_bins: cfg.radial_bins,
            channels,
            data: vec![0.0; channels * cfg.cells()],
            frame_index,
            mode,
        }
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.angular_bins * self.radial_bins;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn to_record(&self) -> Result<Record> {
        Record::from_f64(
            self.channels,
            self.angular_bins,
            self.radial_bins,
            self.frame_index as u32,
            &self.data,
        )
    }

    pub fn from_record(r: &Record) -> Self {
        MotionFeatures {
            angular_bins: r.h as usize,
            radial_bins: r.w as usize,
            channels: r.c as usize,
            data: r.to_f64(),
            frame_index: r.tag as u64,
            mode: if r.c == 1 {
                FeatureMode::DelayFree
            } else {
                FeatureMode::Complete
            },
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        container::write_records(&[self.to_record()?], path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let recs = container::read_records(path)?;
        match recs.as_slice() {
            [r] => Ok(Self::from_record(r)),
            _ => Err(Error::Container(format!(
                "{}: expected one record, found {}",
                path.display(),
                recs.len()
            ))),
        }
    }
}

#[derive(Debug, Clone)]
struct Frame {
    cloud: PointCloud,
    pose: PoseSE3,
}

#[derive(Debug, Clone)]
struct InFlight {
    frame_index: u64,
    channels: Vec<f64>,
    written: usize,
}

/// Sliding pair of temporal windows over one sequence.
///
/// Holds the last `N` frames (sensor-frame cloud plus world pose). In
/// complete mode every pushed frame also gets an accumulator that receives
/// one channel per push until it has all `N`.
#[derive(Debug, Clone)]
pub struct WindowState {
    cfg: GridConfig,
    mode: FeatureMode,
    exec: Exec,
    /// Newest first.
    frames: VecDeque<Frame>,
    /// Newest first; position in this deque is the window position.
    in_flight: VecDeque<InFlight>,
}

impl WindowState {
    pub fn new(cfg: GridConfig) -> Result<Self> {
        Self::with_mode(cfg, FeatureMode::Complete)
    }

    pub fn delay_free(cfg: GridConfig) -> Result<Self> {
        Self::with_mode(cfg, FeatureMode::DelayFree)
    }

    pub fn with_mode(cfg: GridConfig, mode: FeatureMode) -> Result<Self> {
        cfg.validate()?;
        Ok(WindowState {
            cfg,
            mode,
            exec: Exec::default(),
            frames: VecDeque::new(),
            in_flight: VecDeque::new(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn config(&self) -> &GridConfig {
        &self.cfg
    }

    pub fn buffered(&self) -> usize {
        self.frames.len()
    }

    /// Number of channels written so far for each in-flight frame, newest first.
    pub fn written_channels(&self) -> Vec<(u64, usize)> {
        self.in_flight
            .iter()
            .map(|f| (f.frame_index, f.written))
            .collect()
    }

    /// Filtered residual for the frame at buffer position `reference`, using
    /// the windows as they currently stand, with sign for position `k`.
    fn channel_for(&self, reference: usize, k: usize) -> Vec<f64> {
        let cfg = &self.cfg;
        let half = cfg.half_window();
        let to_ref = self.frames[reference].pose.inverse();
        let ref_index = self.frames[reference].cloud.frame_index;
        let aligned = |range: std::ops::Range<usize>| -> Vec<(&PointCloud, PoseSE3)> {
            range
                .filter_map(|pos| self.frames.get(pos))
                .map(|f| (&f.cloud, to_ref.compose(&f.pose)))
                .collect()
        };
        let newer = height_image_transformed(&aligned(0..half), cfg, WindowHalf::Newer, ref_index);
        let older = height_image_transformed(
            &aligned(half..cfg.window),
            cfg,
            WindowHalf::Older,
            ref_index,
        );
        residual(&newer, &older, ResidualSign::for_position(k, half), cfg)
            .expect("height images share the configured grid")
    }

    /// Pushes the next frame. In complete mode returns the features of the
    /// frame that has just received its last channel (`N − 1` pushes ago).
    pub fn push_frame(&mut self, cloud: PointCloud, world_pose: PoseSE3) -> Result<Option<MotionFeatures>> {
        if let Some(last) = self.frames.front() {
            if cloud.frame_index <= last.cloud.frame_index {
                return Err(Error::NonMonotoneFrame {
                    prev: last.cloud.frame_index,
                    got: cloud.frame_index,
                });
            }
        }
        let n = self.cfg.window;
        let frame_index = cloud.frame_index;
        if n == 0 {
            return Ok(match self.mode {
                FeatureMode::Complete => Some(MotionFeatures::zeros(
                    &self.cfg,
                    0,
                    frame_index,
                    FeatureMode::Complete,
                )),
                FeatureMode::DelayFree => None,
            });
        }
        self.frames.push_front(Frame {
            cloud,
            pose: world_pose,
        });
        self.frames.truncate(n);
        if self.mode == FeatureMode::DelayFree {
            return Ok(None);
        }

        let cells = self.cfg.cells();
        self.in_flight.push_front(InFlight {
            frame_index,
            channels: vec![0.0; n * cells],
            written: 0,
        });
        // In-flight frame at position k is also the buffered frame at position k.
        let updates = par::map_range(self.exec, self.in_flight.len(), |k| self.channel_for(k, k));
        for (k, (slot, values)) in self.in_flight.iter_mut().zip(updates).enumerate() {
            slot.channels[k * cells..(k + 1) * cells].copy_from_slice(&values);
            slot.written += 1;
        }
        if self.in_flight.len() == n {
            let done = self.in_flight.pop_back().expect("window is full");
            return Ok(Some(MotionFeatures {
                angular_bins: self.cfg.angular_bins,
                radial_bins: self.cfg.radial_bins,
                channels: n,
                data: done.channels,
                frame_index: done.frame_index,
                mode: FeatureMode::Complete,
            }));
        }
        Ok(None)
    }

    /// Channel 0 of the newest frame, available as soon as both windows are full.
    pub fn delay_free_features(&self) -> Result<MotionFeatures> {
        let n = self.cfg.window;
        if n == 0 || self.frames.len() < n {
            return Err(Error::InsufficientFrames {
                need: n.max(1),
                have: self.frames.len(),
            });
        }
        Ok(MotionFeatures {
            angular_bins: self.cfg.angular_bins,
            radial_bins: self.cfg.radial_bins,
            channels: 1,
            data: self.channel_for(0, 0),
            frame_index: self.frames[0].cloud.frame_index,
            mode: FeatureMode::DelayFree,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::Point;
    use crate::geometry::GridIndex;

    fn small_cfg() -> GridConfig {
        GridConfig {
            angular_bins: 16,
            radial_bins: 10,
            rho_max: 20.0,
            window: 4,
            min_points: 1,
            ..GridConfig::default()
        }
    }

    fn column(cfg: &GridConfig, g: GridIndex, zs: &[f64]) -> Vec<Point> {
        let (rho, theta) = cfg.cell_center(g);
        zs.iter()
            .map(|&z| Point::new(rho * theta.cos(), rho * theta.sin(), z))
            .collect()
    }

    #[test]
    fn height_is_max_minus_min_in_band() {
        let cfg = GridConfig::default();
        let g = GridIndex { u: 100, v: 20 };
        let c = cfg.flat(g);
        let img = height_image(
            &[PointCloud::new(column(&cfg, g, &[-1.0, 0.5, 1.9]), 0)],
            &cfg,
            WindowHalf::Newer,
            0,
        );
        assert!((img.values[c] - 2.9).abs() < 1e-12);
        assert_eq!(img.counts[c], 3);

        let img = height_image(
            &[PointCloud::new(column(&cfg, g, &[-5.0, 1.0]), 0)],
            &cfg,
            WindowHalf::Newer,
            0,
        );
        assert_eq!((img.values[c], img.valid[c], img.counts[c]), (0.0, true, 1));

        let empty = height_image(&[], &cfg, WindowHalf::Older, 0);
        assert!(empty.values.iter().all(|&v| v == 0.0));
        assert!(empty.valid.iter().all(|&v| !v));
    }

    #[test]
    fn residual_keep_band() {
        let cfg = GridConfig::default();
        let img = |v: f64| HeightImage {
            angular_bins: 360,
            radial_bins: 480,
            values: vec![v; cfg.cells()],
            valid: vec![true; cfg.cells()],
            counts: vec![10; cfg.cells()],
            window: WindowHalf::Newer,
            reference_frame: 3,
        };
        let r = residual(&img(2.0), &img(0.5), ResidualSign::NewerMinusOlder, &cfg).unwrap();
        assert_eq!(r[0], 1.5);
        let r = residual(&img(0.5), &img(2.0), ResidualSign::NewerMinusOlder, &cfg).unwrap();
        assert_eq!(r[0], 0.0);
        let r = residual(&img(0.5), &img(2.0), ResidualSign::OlderMinusNewer, &cfg).unwrap();
        assert_eq!(r[0], 1.5);
        let r = residual(&img(6.0), &img(1.0), ResidualSign::NewerMinusOlder, &cfg).unwrap();
        assert_eq!(r[0], 0.0);

        let mut other = img(0.5);
        other.reference_frame = 4;
        assert!(residual(&img(2.0), &other, ResidualSign::NewerMinusOlder, &cfg).is_err());
        let mut invalid = img(0.5);
        invalid.valid[0] = false;
        let r = residual(&img(2.0), &invalid, ResidualSign::NewerMinusOlder, &cfg).unwrap();
        assert_eq!((r[0], r[1]), (0.0, 1.5));
    }

    #[test]
    fn filter_examples() {
        let cfg = GridConfig::default();
        assert_eq!(filter_residual(1.0, 10, 12, &cfg), 1.0);
        assert_eq!(filter_residual(1.0, 3, 12, &cfg), 0.0);
        assert_eq!(filter_residual(0.4, 5, 5, &cfg), 0.4);
        assert_eq!(filter_residual(4.0, 5, 5, &cfg), 4.0);
        assert_eq!(filter_residual(4.0000001, 5, 5, &cfg), 0.0);
        assert_eq!(filter_residual(0.3999999, 5, 5, &cfg), 0.0);
    }

    #[test]
    fn warm_up_then_one_frame_per_push() {
        let cfg = small_cfg();
        let mut state = WindowState::new(cfg.clone()).unwrap();
        for i in 0..3u64 {
            let out = state
                .push_frame(PointCloud::new(vec![], i), PoseSE3::identity())
                .unwrap();
            assert!(out.is_none());
            assert_eq!(state.written_channels()[0], (i, 1));
            assert_eq!(state.written_channels().last().unwrap().1, i as usize + 1);
        }
        for i in 3..7u64 {
            let out = state
                .push_frame(PointCloud::new(vec![], i), PoseSE3::identity())
                .unwrap()
                .unwrap();
            assert_eq!(out.frame_index, i - 3);
            assert_eq!(out.channels, 4);
        }
        assert!(matches!(
            state.push_frame(PointCloud::new(vec![], 6), PoseSE3::identity()),
            Err(Error::NonMonotoneFrame { prev: 6, got: 6 })
        ));
    }

    #[test]
    fn static_scene_is_zero() {
        let cfg = small_cfg();
        let g = GridIndex { u: 3, v: 5 };
        let cloud = column(&cfg, g, &[-1.7, -1.0, 0.2]);
        let mut state = WindowState::new(cfg.clone()).unwrap();
        let mut emitted = 0;
        for i in 0..8u64 {
            if let Some(f) = state
                .push_frame(PointCloud::new(cloud.clone(), i), PoseSE3::identity())
                .unwrap()
            {
                assert!(f.data.iter().all(|&v| v == 0.0));
                emitted += 1;
            }
            if i >= 3 {
                let df = state.delay_free_features().unwrap();
                assert!(df.data.iter().all(|&v| v == 0.0));
            }
        }
        assert_eq!(emitted, 5);
    }

    #[test]
    fn box_in_newer_window_marks_channel_zero() {
        let cfg = small_cfg();
        let g = GridIndex { u: 4, v: 9 };
        let c = cfg.flat(g);
        let ground = column(&cfg, g, &[-1.7]);
        let with_box = column(&cfg, g, &[-1.7, -0.2]);
        let mut state = WindowState::new(cfg.clone()).unwrap();
        let mut out = None;
        for i in 0..8u64 {
            let pts = if i >= 6 { with_box.clone() } else { ground.clone() };
            out = state
                .push_frame(PointCloud::new(pts, i), PoseSE3::identity())
                .unwrap()
                .or(out);
        }
        // Frame 4 is popped at push 7; its channel k was written at push 4 + k.
        // The box only ever sits in Q1, so the Q2 − Q1 channels are negative and dropped.
        let f = out.unwrap();
        assert_eq!(f.frame_index, 4);
        assert!((0..4).all(|k| f.channel(k)[c] == 0.0));
        let expected = (-0.2f64) - (-1.7);
        let df = state.delay_free_features().unwrap();
        assert_eq!(df.frame_index, 7);
        assert_eq!(df.data[c], expected);
    }

    #[test]
    fn delay_free_needs_full_windows() {
        let cfg = small_cfg();
        let mut state = WindowState::delay_free(cfg).unwrap();
        for i in 0..3u64 {
            assert!(state
                .push_frame(PointCloud::new(vec![], i), PoseSE3::identity())
                .unwrap()
                .is_none());
        }
        assert!(matches!(
            state.delay_free_features(),
            Err(Error::InsufficientFrames { need: 4, have: 3 })
        ));
    }

    #[test]
    fn features_round_trip_through_container() {
        let cfg = small_cfg();
        let mut f = MotionFeatures::zeros(&cfg, 4, 12, FeatureMode::Complete);
        f.data[5] = 1.5;
        f.data[170] = 0.75;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000012.mbev");
        f.write(&path).unwrap();
        assert_eq!(MotionFeatures::read(&path).unwrap(), f);
    }
}
