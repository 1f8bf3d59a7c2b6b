use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Polar grid geometry, height band, residual filter and window length.
///
/// The image is `angular_bins` rows (θ) by `radial_bins` columns (ρ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// h: angular bin count.
    pub angular_bins: usize,
    /// w: radial bin count.
    pub radial_bins: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Inclusive keep-band for residual heights.
    pub d_min: f64,
    pub d_max: f64,
    /// Minimum in-band points per cell in each window.
    pub min_points: u32,
    /// N: total temporal window length, split into two halves.
    pub window: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            angular_bins: 360,
            radial_bins: 480,
            rho_min: 0.0,
            rho_max: 50.0,
            theta_min: -PI,
            theta_max: PI,
            z_min: -4.0,
            z_max: 2.0,
            d_min: 0.4,
            d_max: 4.0,
            min_points: 5,
            window: 8,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("rho_min", self.rho_min),
            ("rho_max", self.rho_max),
            ("theta_min", self.theta_min),
            ("theta_max", self.theta_max),
            ("z_min", self.z_min),
            ("z_max", self.z_max),
            ("d_min", self.d_min),
            ("d_max", self.d_max),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        if self.angular_bins == 0 {
            return Err(Error::config("angular_bins", "must be at least 1"));
        }
        if self.radial_bins == 0 {
            return Err(Error::config("radial_bins", "must be at least 1"));
        }
        if self.rho_max <= self.rho_min {
            return Err(Error::config("rho_max", "must exceed rho_min"));
        }
        if self.rho_min < 0.0 {
            return Err(Error::config("rho_min", "must be non-negative"));
        }
        if self.theta_max <= self.theta_min {
            return Err(Error::config("theta_max", "must exceed theta_min"));
        }
        if self.z_max <= self.z_min {
            return Err(Error::config("z_max", "must exceed z_min"));
        }
        if self.d_min <= 0.0 {
            return Err(Error::config("d_min", "must be positive"));
        }
        if self.d_max <= self.d_min {
            return Err(Error::config("d_max", "must exceed d_min"));
        }
        if self.min_points == 0 {
            return Err(Error::config("min_points", "must be at least 1"));
        }
        if self.window % 2 != 0 {
            return Err(Error::config(
                "window",
                format!("{} is odd; the two temporal halves must be equal", self.window),
            ));
        }
        Ok(())
    }

    pub fn half_window(&self) -> usize {
        self.window / 2
    }

    pub fn cells(&self) -> usize {
        self.angular_bins * self.radial_bins
    }

    /// Row-major cell offset of `g` in an `h × w` image.
    pub fn flat(&self, g: GridIndex) -> usize {
        g.v * self.radial_bins + g.u
    }

    /// Lower edge of radial bin `u`, relative to `rho_min`.
    pub fn rho_edge(&self, u: usize) -> f64 {
        (self.rho_max - self.rho_min) * u as f64 / self.radial_bins as f64
    }

    /// Lower edge of angular bin `v`, relative to `theta_min`.
    pub fn theta_edge(&self, v: usize) -> f64 {
        (self.theta_max - self.theta_min) * v as f64 / self.angular_bins as f64
    }

    /// Polar center of cell `g`.
    pub fn cell_center(&self, g: GridIndex) -> (f64, f64) {
        let rho_step = (self.rho_max - self.rho_min) / self.radial_bins as f64;
        let theta_step = (self.theta_max - self.theta_min) / self.angular_bins as f64;
        (
            self.rho_min + (g.u as f64 + 0.5) * rho_step,
            self.theta_min + (g.v as f64 + 0.5) * theta_step,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarPoint {
    pub rho: f64,
    pub theta: f64,
    pub z: f64,
}

/// `u` is the radial bin in `[0, w)`, `v` the angular bin in `[0, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub u: usize,
    pub v: usize,
}

pub fn cart_to_polar(p: &Point) -> PolarPoint {
    let theta = if p.x == 0.0 && p.y == 0.0 {
        0.0
    } else {
        p.y.atan2(p.x)
    };
    PolarPoint {
        rho: p.x.hypot(p.y),
        theta,
        z: p.z,
    }
}

// Half-open bin search over [lo, hi); `hi` itself lands in the last bin.
// The floor estimate is reconciled against the exact edge formula so the
// returned bin always satisfies edge(b) <= value - lo < edge(b + 1).
fn bin(value: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(value >= lo) || value > hi {
        return None;
    }
    if value == hi {
        return Some(n - 1);
    }
    let range = hi - lo;
    let off = value - lo;
    let edge = |b: usize| range * b as f64 / n as f64;
    let mut b = ((off / range) * n as f64).floor() as usize;
    b = b.min(n - 1);
    while b > 0 && off < edge(b) {
        b -= 1;
    }
    while b + 1 < n && off >= edge(b + 1) {
        b += 1;
    }
    Some(b)
}

pub fn grid_index(pp: &PolarPoint, cfg: &GridConfig) -> Option<GridIndex> {
    let u = bin(pp.rho, cfg.rho_min, cfg.rho_max, cfg.radial_bins)?;
    let v = bin(pp.theta, cfg.theta_min, cfg.theta_max, cfg.angular_bins)?;
    Some(GridIndex { u, v })
}

/// Assignment of every point of one scan to a polar cell.
///
/// Cell membership is stored compactly: `members[cell_start[c]..cell_start[c + 1]]`
/// lists the point indices of flat cell `c` in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub angular_bins: usize,
    pub radial_bins: usize,
    pub frame_index: u64,
    assignment: Vec<Option<GridIndex>>,
    cell_start: Vec<u32>,
    members: Vec<u32>,
}

impl Partition {
    pub fn point_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[Option<GridIndex>] {
        &self.assignment
    }

    pub fn cell(&self, g: GridIndex) -> &[u32] {
        self.cell_flat(g.v * self.radial_bins + g.u)
    }

    pub fn cell_flat(&self, c: usize) -> &[u32] {
        &self.members[self.cell_start[c] as usize..self.cell_start[c + 1] as usize]
    }

    pub fn cell_count(&self) -> usize {
        self.angular_bins * self.radial_bins
    }

    pub fn out_of_range(&self) -> impl Iterator<Item = usize> + '_ {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
    }

    pub fn in_range_count(&self) -> usize {
        self.members.len()
    }
}

pub fn partition(cloud: &PointCloud, cfg: &GridConfig) -> Partition {
    partition_with(cloud, cfg, Exec::default())
}

pub fn partition_with(cloud: &PointCloud, cfg: &GridConfig, exec: Exec) -> Partition {
    let assignment = par::map(exec, &cloud.points, |p| {
        grid_index(&cart_to_polar(p), cfg)
    });
    let w = cfg.radial_bins;
    let cells = cfg.cells();
    let mut cell_start = vec![0u32; cells + 1];
    for g in assignment.iter().flatten() {
        cell_start[g.v * w + g.u + 1] += 1;
    }
    for c in 0..cells {
        cell_start[c + 1] += cell_start[c];
    }
    let mut cursor = cell_start.clone();
    let mut members = vec![0u32; cell_start[cells] as usize];
    for (i, g) in assignment.iter().enumerate() {
        if let Some(g) = g {
            let c = g.v * w + g.u;
            members[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
    }
    Partition {
        angular_bins: cfg.angular_bins,
        radial_bins: w,
        frame_index: cloud.frame_index,
        assignment,
        cell_start,
        members,
    }
}

/// Binary moving-object class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MosClass {
    #[default]
    Static,
    Moving,
}

impl MosClass {
    pub fn index(self) -> usize {
        match self {
            MosClass::Static => 0,
            MosClass::Moving => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            MosClass::Moving
        } else {
            MosClass::Static
        }
    }
}

/// Per-cell class prediction over an `h × w` polar image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub angular_bins: usize,
    pub radial_bins: usize,
    pub classes: Vec<MosClass>,
}

impl ClassMap {
    pub fn filled(angular_bins: usize, radial_bins: usize, class: MosClass) -> Self {
        ClassMap {
            angular_bins,
            radial_bins,
            classes: vec![class; angular_bins * radial_bins],
        }
    }

    pub fn set(&mut self, g: GridIndex, class: MosClass) {
        self.classes[g.v * self.radial_bins + g.u] = class;
    }
}

/// Decodes a cell prediction to points. Out-of-range points are static.
pub fn back_project(pred: &ClassMap, part: &Partition) -> Result<Vec<MosClass>> {
    if pred.angular_bins != part.angular_bins || pred.radial_bins != part.radial_bins {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, partition is {}x{}",
            pred.angular_bins, pred.radial_bins, part.angular_bins, part.radial_bins
        )));
    }
    Ok(part
        .assignment
        .iter()
        .map(|a| match a {
            Some(g) => pred.classes[g.v * part.radial_bins + g.u],
            None => MosClass::Static,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polar_of_345_triangle() {
        let pp = cart_to_polar(&Point::new(3.0, 4.0, 1.0));
        assert_eq!(pp.rho, 5.0);
        assert!((pp.theta - 0.927295218).abs() < 1e-9);
        assert_eq!(pp.z, 1.0);
    }

    #[test]
    fn polar_axis_and_origin() {
        let pp = cart_to_polar(&Point::new(0.0, -2.0, 0.5));
        assert_eq!((pp.rho, pp.theta, pp.z), (2.0, -PI / 2.0, 0.5));
        let o = cart_to_polar(&Point::new(0.0, 0.0, 7.0));
        assert_eq!((o.rho, o.theta, o.z), (0.0, 0.0, 7.0));
    }

    #[test]
    fn default_grid_index() {
        let cfg = GridConfig::default();
        let g = grid_index(
            &PolarPoint {
                rho: 5.0,
                theta: 0.0,
                z: 0.0,
            },
            &cfg,
        );
        assert_eq!(g, Some(GridIndex { u: 48, v: 180 }));
        let g0 = grid_index(
            &PolarPoint {
                rho: 0.0,
                theta: -PI,
                z: 0.0,
            },
            &cfg,
        );
        assert_eq!(g0, Some(GridIndex { u: 0, v: 0 }));
    }

    #[test]
    fn out_of_range_and_upper_clamp() {
        let cfg = GridConfig::default();
        let far = PolarPoint {
            rho: 60.0,
            theta: 0.0,
            z: 0.0,
        };
        assert_eq!(grid_index(&far, &cfg), None);
        let edge = PolarPoint {
            rho: 50.0,
            theta: PI,
            z: 0.0,
        };
        assert_eq!(grid_index(&edge, &cfg), Some(GridIndex { u: 479, v: 359 }));
        let below = PolarPoint {
            rho: 1.0,
            theta: 0.0,
            z: 0.0,
        };
        let cfg2 = GridConfig {
            rho_min: 2.0,
            ..GridConfig::default()
        };
        assert_eq!(grid_index(&below, &cfg2), None);
    }

    #[test]
    fn empty_partition() {
        let part = partition(&PointCloud::default(), &GridConfig::default());
        assert_eq!(part.point_count(), 0);
        assert_eq!(part.out_of_range().count(), 0);
        assert!((0..part.cell_count()).all(|c| part.cell_flat(c).is_empty()));
    }

    #[test]
    fn duplicate_points_share_cell_in_order() {
        let p = Point::new(4.0, 1.0, 0.0);
        let cloud = PointCloud::new(vec![p, Point::new(-10.0, 3.0, 0.0), p], 0);
        let cfg = GridConfig::default();
        let part = partition(&cloud, &cfg);
        let g = part.assignment()[0].unwrap();
        assert_eq!(part.cell(g), &[0, 2]);
    }

    #[test]
    fn back_project_rules() {
        let cfg = GridConfig::default();
        let target = GridIndex { u: 48, v: 180 };
        let (rho, theta) = cfg.cell_center(target);
        let inside = Point::new(rho * theta.cos(), rho * theta.sin(), 0.0);
        let cloud = PointCloud::new(
            vec![
                inside,
                Point::new(20.0, -20.0, 0.0),
                inside,
                inside,
                Point::new(100.0, 0.0, 0.0),
            ],
            0,
        );
        let part = partition(&cloud, &cfg);
        let mut pred = ClassMap::filled(360, 480, MosClass::Static);
        pred.set(target, MosClass::Moving);
        use MosClass::*;
        assert_eq!(
            back_project(&pred, &part).unwrap(),
            vec![Moving, Static, Moving, Moving, Static]
        );
        let all_moving = ClassMap::filled(360, 480, Moving);
        assert_eq!(back_project(&all_moving, &part).unwrap()[4], Static);
        let all_static = ClassMap::filled(360, 480, Static);
        assert!(back_project(&all_static, &part)
            .unwrap()
            .iter()
            .all(|c| *c == Static));
        assert!(back_project(&ClassMap::filled(2, 2, Static), &part).is_err());
    }

    #[test]
    fn odd_window_rejected() {
        let cfg = GridConfig {
            window: 7,
            ..GridConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "window"),
            other => panic!("{other:?}"),
        }
    }
}
