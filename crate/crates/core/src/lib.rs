//! Patch-wise rotation-invariant point cloud learning.
//!
//! Point clouds are cut into local and global patches, each patch is
//! disentangled into a rotation-invariant content vector and a
//! rotation-equivariant orientation frame, and patches exchange information
//! through rotation-invariant relative-pose relations.

pub mod data;
pub mod disentangle;
pub mod error;
pub mod geom;
pub mod hierarchy;
pub mod model;
pub mod numkernel;
pub mod seghead;
pub mod train;

pub use error::{Error, Result};
