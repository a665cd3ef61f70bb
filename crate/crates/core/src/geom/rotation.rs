use nalgebra::{Matrix3, Quaternion, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;

use super::Vec3;
use crate::error::{Error, Result};

/// A proper rotation acting on row vectors: `p -> p · R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation(Matrix3<f64>);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates orthonormality and unit determinant within `1e-6`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let r = Self(m);
        if !r.is_valid(1e-6) {
            return Err(Error::invalid(format!("not a rotation matrix: {m}")));
        }
        Ok(r)
    }

    /// Row-major 3x3 entries.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_matrix(Matrix3::from_fn(|i, j| rows[i][j]))
    }

    /// Rotation of the (normalized) quaternion `w + xi + yj + zk`.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        // Column-convention matrix C rotates column vectors; p·Cᵀ = (C pᵀ)ᵀ.
        Self(q.to_rotation_matrix().into_inner().transpose())
    }

    /// Rotation about the z axis; `(1,0,0)` maps to `(cos a, sin a, 0)`.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Uniform draw from SO(3) via a normalized Gaussian quaternion.
    pub fn random_so3<R: Rng + ?Sized>(rng: &mut R) -> Self {
        loop {
            let q: [f64; 4] = [
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                return Self::from_quaternion(q[0], q[1], q[2], q[3]);
            }
        }
    }

    /// Rotation about z by an angle uniform in `[0, 2π)`.
    pub fn random_z<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::about_z(rng.random_range(0.0..std::f64::consts::TAU))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// `p · R`.
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.0.tr_mul(p)
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Rotation equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &Rotation) -> Self {
        Self(self.0 * next.0)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let ortho = (self.0.transpose() * self.0 - Matrix3::identity()).abs().max() <= tol;
        ortho && (self.0.determinant() - 1.0).abs() <= tol
    }

    /// Row-major entries, the layout expected by `Tape::row_transform3`.
    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }
}
