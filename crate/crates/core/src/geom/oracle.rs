//! Handcrafted exact invariants and equivariants used as test oracles. They
//! isolate the architecture's invariance from what a trained network
//! approximates.

use super::frame::OrientationFrame;
use super::Vec3;
use crate::error::{Error, Result};

/// Deterministic equivariant frame: `d1` along the centroid offset, `d2` the
/// component of the farthest member (lowest index on ties) orthogonal to
/// `d1`, `d3 = d1 × d2`.
pub fn oracle_equivariant_frame(points: &[Vec3]) -> Result<OrientationFrame> {
    if points.is_empty() {
        return Err(Error::Degenerate("empty patch".into()));
    }
    let centroid: Vec3 = points.iter().sum::<Vec3>() / points.len() as f64;
    if centroid.norm() <= 1e-6 {
        return Err(Error::Degenerate("patch centroid at the origin".into()));
    }
    let d1 = centroid.normalize();
    let mut far = (f64::NEG_INFINITY, Vec3::zeros());
    for p in points {
        let n = p.norm_squared();
        if n > far.0 {
            far = (n, *p);
        }
    }
    let ortho = far.1 - d1 * far.1.dot(&d1);
    if ortho.norm() <= 1e-6 {
        return Err(Error::Degenerate("farthest direction parallel to the centroid".into()));
    }
    let d2 = ortho.normalize();
    Ok(OrientationFrame {
        axes: [d1, d2, d1.cross(&d2)],
        degenerate: false,
    })
}

/// Rotation-invariant descriptor: sorted member norms followed by sorted
/// pairwise distances, truncated or zero-padded to `width`.
pub fn oracle_invariant_content(points: &[Vec3], width: usize) -> Vec<f64> {
    let mut norms: Vec<f64> = points.iter().map(|p| p.norm()).collect();
    norms.sort_by(f64::total_cmp);
    let mut pairs: Vec<f64> = Vec::with_capacity(points.len() * points.len() / 2);
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            pairs.push((a - b).norm());
        }
    }
    pairs.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = norms.into_iter().chain(pairs).take(width).collect();
    out.resize(width, 0.0);
    out
}
