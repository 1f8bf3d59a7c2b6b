//! Point and point-cloud types shared by every stage.

use crate::error::{Error, Result};

/// A LiDAR return in the sensor frame. The homogeneous coordinate is implicit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: Option<f32>,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point {
            x,
            y,
            z,
            intensity: None,
        }
    }

    pub fn with_intensity(x: f64, y: f64, z: f64, intensity: f32) -> Self {
        Point {
            x,
            y,
            z,
            intensity: Some(intensity),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Point) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }
}

/// One scan. Point order is significant: labels are matched by position.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub frame_index: u64,
}

impl PointCloud {
    pub fn new(points: Vec<Point>, frame_index: u64) -> Self {
        PointCloud {
            points,
            frame_index,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.points.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::Shape(format!(
                "point {i} of frame {} has non-finite coordinates",
                self.frame_index
            ))),
            None => Ok(()),
        }
    }
}
