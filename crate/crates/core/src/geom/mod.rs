//! Rotations, sampling kernels, patches, orientation frames and the
//! rotation-invariant relations between them.
//!
//! Points and direction vectors are rows; a rotation acts by right
//! multiplication `p · R`.

pub mod frame;
pub mod oracle;
pub mod patch;
pub mod relation;
pub mod rotation;
pub mod sampling;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub use frame::{complete_frame, derotate_frame, OrientationFrame};
pub use oracle::{oracle_equivariant_frame, oracle_invariant_content};
pub use patch::{
    extract_global_patches, extract_local_patches, global_patches_from, local_patches_at, Patch, PatchScale,
};
pub use relation::{geo_relation, point_relation, PATCH_RELATION_WIDTH, POINT_RELATION_WIDTH};
pub use rotation::Rotation;
pub use sampling::{ball_query, fps, fps_from, knn, BallQuery, NeighborSearch};

pub type Vec3 = Vector3<f64>;

/// Types whose coordinates rotate with the ambient space.
pub trait Rotate {
    fn rotated(&self, r: &Rotation) -> Self;
}

impl Rotate for Vec<Vec3> {
    fn rotated(&self, r: &Rotation) -> Self {
        self.iter().map(|p| r.apply(p)).collect()
    }
}

/// `N x 3` coordinates with optional per-point labels and class id.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub labels: Option<Vec<usize>>,
    pub class_id: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points,
            labels: None,
            class_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.points.iter().sum();
        sum / self.points.len().max(1) as f64
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    /// Translates the centroid to the origin and scales the farthest point to
    /// unit norm.
    pub fn center_and_scale(&self) -> Result<PointCloud> {
        if self.points.is_empty() {
            return Err(Error::Degenerate("empty point cloud".into()));
        }
        let c = self.centroid();
        let centered: Vec<Vec3> = self.points.iter().map(|p| p - c).collect();
        let scale = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
        if scale < 1e-12 {
            return Err(Error::Degenerate("all points coincide".into()));
        }
        Ok(PointCloud {
            points: centered.into_iter().map(|p| p / scale).collect(),
            labels: self.labels.clone(),
            class_id: self.class_id,
        })
    }

    pub fn scaled(&self, factor: f64) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| p * factor).collect(),
            ..self.clone()
        }
    }
}

impl Rotate for PointCloud {
    fn rotated(&self, r: &Rotation) -> Self {
        PointCloud {
            points: self.points.rotated(r),
            labels: self.labels.clone(),
            class_id: self.class_id,
        }
    }
}

/// `cloud · R`, or any other rotatable value.
pub fn apply_rotation<X: Rotate>(x: &X, r: &Rotation) -> X {
    x.rotated(r)
}
