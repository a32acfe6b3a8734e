//! Small fixed-size 3-D algebra used by rendering, orthoPatch projection and
//! pose labelling. Camera frame convention: x right, y down, z along the
//! optical axis.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn min(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn max(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn sub(&self, o: &Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.0[i][j] - o.0[i][j];
            }
        }
        Mat3(r)
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(r)
    }
}

/// A proper rotation matrix (orthogonal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

/// Tolerance used when validating externally supplied rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

impl Rotation {
    pub const IDENTITY: Rotation = Rotation(Mat3::IDENTITY);

    pub fn new(m: Mat3) -> Result<Self> {
        Self::with_tolerance(m, ROTATION_TOLERANCE)
    }

    pub fn with_tolerance(m: Mat3, tol: f64) -> Result<Self> {
        let dev = (m.transpose() * m).sub(&Mat3::IDENTITY).frobenius();
        if !(dev <= tol) {
            return Err(Error::NotRotation(format!("|R^T R - I|_F = {:.3e}", dev)));
        }
        let det = m.det();
        if !((det - 1.0).abs() <= tol) {
            return Err(Error::NotRotation(format!("det = {:.6}", det)));
        }
        Ok(Rotation(m))
    }

    pub fn about_x(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation(Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))
    }

    pub fn about_y(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation(Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]))
    }

    pub fn about_z(a: f64) -> Self {
        let (s, c) = a.sin_cos();
        Rotation(Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))
    }

    /// Object orientation seen from the camera: yaw about the vertical axis,
    /// then pitch about the horizontal axis, then roll about the optical axis.
    pub fn from_view(view: ViewAngles) -> Self {
        Self::about_z(view.roll) * Self::about_x(view.pitch) * Self::about_y(view.yaw)
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Rotation {
        Rotation(self.0.transpose())
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        self.0.apply(v)
    }

    /// `|I - R|_F`, the deviation of a relative rotation from the identity.
    pub fn distance_from_identity(&self) -> f64 {
        Mat3::IDENTITY.sub(&self.0).frobenius()
    }

    /// Angle of the rotation in radians.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, o: Rotation) -> Rotation {
        Rotation(self.0 * o.0)
    }
}

/// Viewpoint angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ViewAngles {
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
}

impl ViewAngles {
    pub const fn new(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self { yaw, pitch, roll }
    }

    pub fn from_degrees(yaw: f64, pitch: f64, roll: f64) -> Self {
        Self::new(yaw.to_radians(), pitch.to_radians(), roll.to_radians())
    }

    pub fn rotation(&self) -> Rotation {
        Rotation::from_view(*self)
    }
}

/// Closed angular interval in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleRange {
    pub min: f64,
    pub max: f64,
}

impl AngleRange {
    pub fn degrees(min: f64, max: f64) -> Self {
        Self {
            min: min.to_radians(),
            max: max.to_radians(),
        }
    }

    /// `n` evenly spaced samples including both ends (the midpoint for `n = 1`).
    pub fn steps(&self, n: usize) -> Vec<f64> {
        match n {
            0 => Vec::new(),
            1 => vec![0.5 * (self.min + self.max)],
            _ => (0..n)
                .map(|i| self.min + (self.max - self.min) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    }

    /// Centres of `n` equal-width bins covering the range.
    pub fn bin_centres(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| self.min + (self.max - self.min) * (i as f64 + 0.5) / n as f64)
            .collect()
    }

    pub fn contains(&self, a: f64) -> bool {
        a >= self.min - 1e-12 && a <= self.max + 1e-12
    }
}

/// Box of admissible viewpoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewRange {
    pub yaw: AngleRange,
    pub pitch: AngleRange,
    pub roll: AngleRange,
}

impl ViewRange {
    pub fn contains(&self, v: ViewAngles) -> bool {
        self.yaw.contains(v.yaw) && self.pitch.contains(v.pitch) && self.roll.contains(v.roll)
    }
}

impl Default for ViewRange {
    fn default() -> Self {
        Self {
            yaw: AngleRange::degrees(-80.0, 80.0),
            pitch: AngleRange::degrees(-30.0, 30.0),
            roll: AngleRange::degrees(-15.0, 15.0),
        }
    }
}
