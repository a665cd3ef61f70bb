//! Rotation-invariant relative-pose relations.
//!
//! Patch–patch layout (16 values):
//! `[dist; cos(d_i^m, d_j^n) for i, j in 1..=3 row-major; cos(d_i^m, u) i=1..3; cos(d_i^n, u) i=1..3]`
//! with `u = p_n - p_m`.
//!
//! Point–patch layout (4 values): `[dist; cos(d_i^q, u) i=1..3]` with `u = q - p`.
//!
//! Cosines against an offset shorter than `1e-8` are defined as 0.

use nalgebra::{convert, RealField, Vector3};

use super::frame::OrientationFrame;

pub const PATCH_RELATION_WIDTH: usize = 16;
pub const POINT_RELATION_WIDTH: usize = 4;

fn cossim<T: RealField + Copy>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let denom = a.norm() * b.norm();
    if denom <= T::zero() {
        T::zero()
    } else {
        a.dot(b) / denom
    }
}

fn offset_cosines<T: RealField + Copy>(frame: &OrientationFrame<T>, u: &Vector3<T>, short: bool) -> [T; 3] {
    if short {
        [T::zero(); 3]
    } else {
        frame.axes.map(|d| cossim(&d, u))
    }
}

pub fn geo_relation<T: RealField + Copy>(
    p_m: &Vector3<T>,
    frame_m: &OrientationFrame<T>,
    p_n: &Vector3<T>,
    frame_n: &OrientationFrame<T>,
) -> [T; PATCH_RELATION_WIDTH] {
    let u = p_n - p_m;
    let dist = u.norm();
    let short = dist < convert(1e-8);
    let mut out = [T::zero(); PATCH_RELATION_WIDTH];
    out[0] = dist;
    for i in 0..3 {
        for j in 0..3 {
            out[1 + 3 * i + j] = cossim(&frame_m.axes[i], &frame_n.axes[j]);
        }
    }
    out[10..13].copy_from_slice(&offset_cosines(frame_m, &u, short));
    out[13..16].copy_from_slice(&offset_cosines(frame_n, &u, short));
    out
}

pub fn point_relation<T: RealField + Copy>(
    p: &Vector3<T>,
    q: &Vector3<T>,
    frame_q: &OrientationFrame<T>,
) -> [T; POINT_RELATION_WIDTH] {
    let u = q - p;
    let dist = u.norm();
    let short = dist < convert(1e-8);
    let c = offset_cosines(frame_q, &u, short);
    [dist, c[0], c[1], c[2]]
}
