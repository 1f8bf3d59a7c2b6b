use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

/// Tolerance for the rotation block of a stored pose.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Homogeneous rigid transform. The bottom row is always `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3(Matrix4<f64>);

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        PoseSE3(Matrix4::identity())
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        PoseSE3(m)
    }

    pub fn translation(x: f64, y: f64, z: f64) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::new(x, y, z))
    }

    /// Rotation by `angle` radians about +z.
    pub fn rotation_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::from_parts(r, Vector3::zeros())
    }

    /// Planar pose: yaw about +z followed by translation.
    pub fn planar(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::from_parts(r, Vector3::new(x, y, z))
    }

    /// Validates a full 4x4 matrix against the rigid-transform invariants.
    pub fn from_matrix(m: Matrix4<f64>) -> Result<Self> {
        Self::from_matrix_tol(m, ORTHONORMAL_TOL)
    }

    pub fn from_matrix_tol(m: Matrix4<f64>, tol: f64) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPose("non-finite entry".into()));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose(format!(
                "bottom row {bottom:?} is not (0, 0, 0, 1)"
            )));
        }
        let pose = PoseSE3(m);
        let err = pose.orthonormality_error();
        if err > tol {
            return Err(Error::InvalidPose(format!(
                "rotation deviates from orthonormal by {err:e} (tolerance {tol:e})"
            )));
        }
        Ok(pose)
    }

    /// Builds a pose from the 12 row-major entries of its top 3x4 block.
    pub fn from_row_major_3x4(v: &[f64; 12]) -> Matrix4<f64> {
        Matrix4::new(
            v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8], v[9], v[10], v[11], 0.0, 0.0,
            0.0, 1.0,
        )
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let m = &self.0;
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        self.0.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Max of `|R·Rᵀ − I|` entries and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let gram = r * r.transpose() - Matrix3::identity();
        let gram_err = gram.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        gram_err.max((r.determinant() - 1.0).abs())
    }

    /// Replaces the rotation block by its nearest rotation (polar projection).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rotation().svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        Self::from_parts(r, self.translation_vector())
    }

    /// Closed-form inverse `[Rᵀ | −Rᵀ t]`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = -(rt * self.translation_vector());
        Self::from_parts(rt, t)
    }

    pub fn compose(&self, rhs: &PoseSE3) -> PoseSE3 {
        let mut m = self.0 * rhs.0;
        m[(3, 0)] = 0.0;
        m[(3, 1)] = 0.0;
        m[(3, 2)] = 0.0;
        m[(3, 3)] = 1.0;
        PoseSE3(m)
    }

    pub fn apply(&self, p: &Point) -> Point {
        let m = &self.0;
        Point {
            x: m[(0, 0)] * p.x + m[(0, 1)] * p.y + m[(0, 2)] * p.z + m[(0, 3)],
            y: m[(1, 0)] * p.x + m[(1, 1)] * p.y + m[(1, 2)] * p.z + m[(1, 3)],
            z: m[(2, 0)] * p.x + m[(2, 1)] * p.y + m[(2, 2)] * p.z + m[(2, 3)],
            intensity: p.intensity,
        }
    }

    pub fn max_abs_diff(&self, other: &PoseSE3) -> f64 {
        (self.0 - other.0).iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

impl Mul for PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: PoseSE3) -> PoseSE3 {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a PoseSE3> for &'a PoseSE3 {
    type Output = PoseSE3;

    fn mul(self, rhs: &PoseSE3) -> PoseSE3 {
        self.compose(rhs)
    }
}

/// Relative transform taking points of frame `from` into frame `to`:
/// `W_to⁻¹ · W_from` for world poses `W`.
pub fn relative(poses: &[PoseSE3], to: usize, from: usize) -> Result<PoseSE3> {
    let len = poses.len();
    let w_to = poses
        .get(to)
        .ok_or(Error::IndexOutOfRange { index: to, len })?;
    let w_from = poses
        .get(from)
        .ok_or(Error::IndexOutOfRange { index: from, len })?;
    Ok(w_to.inverse().compose(w_from))
}

/// `T^i_{i−n}`: maps frame `i − n` into frame `i`.
pub fn compose_relative(poses: &[PoseSE3], i: usize, n: usize) -> Result<PoseSE3> {
    if n > i {
        return Err(Error::IndexOutOfRange {
            index: n,
            len: i + 1,
        });
    }
    if n == 0 {
        if i >= poses.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: poses.len(),
            });
        }
        return Ok(PoseSE3::identity());
    }
    relative(poses, i, i - n)
}

/// Applies `pose` to every point; order and intensity are kept.
pub fn transform_cloud(cloud: &PointCloud, pose: &PoseSE3) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| pose.apply(p)).collect(),
        frame_index: cloud.frame_index,
    }
}
