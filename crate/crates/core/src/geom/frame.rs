use nalgebra::{convert, RealField, Vector3};

use super::{Rotate, Rotation};

/// Learned pose of a patch: three unit direction rows `d1, d2, d3` with
/// `d3 = d1 × d2`. `d1 · d2` need not vanish.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientationFrame<T: RealField + Copy = f64> {
    pub axes: [Vector3<T>; 3],
    /// Set when a raw direction vanished or `d1` and `d2` were parallel.
    pub degenerate: bool,
}

impl<T: RealField + Copy> OrientationFrame<T> {
    pub fn identity() -> Self {
        Self {
            axes: [Vector3::x(), Vector3::y(), Vector3::z()],
            degenerate: false,
        }
    }

    pub fn d1(&self) -> &Vector3<T> {
        &self.axes[0]
    }

    pub fn d2(&self) -> &Vector3<T> {
        &self.axes[1]
    }

    pub fn d3(&self) -> &Vector3<T> {
        &self.axes[2]
    }
}

impl OrientationFrame<f64> {
    pub fn cast<U: RealField + Copy>(&self) -> OrientationFrame<U> {
        OrientationFrame {
            axes: self.axes.map(|a| a.map(convert::<f64, U>)),
            degenerate: self.degenerate,
        }
    }

    /// Frame whose direction rows are all right-multiplied by `r`.
    pub fn rotate(&self, r: &Rotation) -> Self {
        Self {
            axes: self.axes.map(|a| r.apply(&a)),
            degenerate: self.degenerate,
        }
    }
}

impl Rotate for OrientationFrame<f64> {
    fn rotated(&self, r: &Rotation) -> Self {
        self.rotate(r)
    }
}

fn unit_any_orthogonal<T: RealField + Copy>(v: &Vector3<T>) -> Vector3<T> {
    // Cross with the coordinate axis least aligned with v.
    let a = v.abs();
    let axis = if a.x <= a.y && a.x <= a.z {
        Vector3::x()
    } else if a.y <= a.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    v.cross(&axis).normalize()
}

/// Normalizes the two raw directions and completes the frame with
/// `d3 = normalize(d1 × d2)`.
pub fn complete_frame<T: RealField + Copy>(d1_raw: &Vector3<T>, d2_raw: &Vector3<T>) -> OrientationFrame<T> {
    let tiny: T = convert(1e-8);
    let mut degenerate = false;
    let mut unit = |v: &Vector3<T>, fallback: Vector3<T>| {
        let n = v.norm();
        if n < tiny {
            degenerate = true;
            fallback
        } else {
            v / n
        }
    };
    let d1 = unit(d1_raw, Vector3::x());
    let d2 = unit(d2_raw, Vector3::y());
    let c = d1.cross(&d2);
    let cn = c.norm();
    let d3 = if cn < convert(1e-6) {
        degenerate = true;
        unit_any_orthogonal(&d1)
    } else {
        c / cn
    };
    OrientationFrame {
        axes: [d1, d2, d3],
        degenerate,
    }
}

/// Undoes the branch rotation: every direction `d` becomes `d · R_aᵀ`, then
/// the frame is re-completed.
pub fn derotate_frame(frame: &OrientationFrame<f64>, r_a: &Rotation) -> OrientationFrame<f64> {
    let inv = r_a.inverse();
    let mut out = complete_frame(&inv.apply(frame.d1()), &inv.apply(frame.d2()));
    out.degenerate |= frame.degenerate;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn axis_aligned_completion() {
        let f = complete_frame(&Vec3::x(), &Vec3::y());
        assert_relative_eq!(*f.d3(), Vec3::z());
        assert!(!f.degenerate);
        let g = complete_frame(&Vec3::new(2.0, 0.0, 0.0), &Vec3::new(0.0, 3.0, 0.0));
        assert_eq!(f, g);
    }

    #[test]
    fn parallel_inputs_flag_degenerate() {
        let f = complete_frame(&Vec3::new(1.0, 1.0, 0.0), &Vec3::new(2.0, 2.0, 0.0));
        assert!(f.degenerate);
        assert_relative_eq!(f.d3().norm(), 1.0, epsilon = 1e-12);
        assert!(f.d3().dot(f.d1()).abs() < 1e-12);
    }

    #[test]
    fn vanishing_input_replaced_by_axis() {
        let f = complete_frame(&Vec3::zeros(), &Vec3::new(0.0, 0.0, 1.0));
        assert!(f.degenerate);
        assert_eq!(*f.d1(), Vec3::x());
    }

    #[test]
    fn completed_frame_invariants() {
        let f = complete_frame(&Vec3::new(0.3, -1.2, 0.4), &Vec3::new(0.9, 0.1, 0.2));
        for a in &f.axes {
            assert_relative_eq!(a.norm(), 1.0, epsilon = 1e-12);
        }
        assert!(f.d3().dot(f.d1()).abs() < 1e-12);
        assert!(f.d3().dot(f.d2()).abs() < 1e-12);
    }

    #[test]
    fn derotate_inverts_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = complete_frame(&Vec3::new(0.3, -1.2, 0.4), &Vec3::new(0.9, 0.1, 0.2));
        assert_eq!(derotate_frame(&f, &Rotation::identity()), f);
        for _ in 0..20 {
            let r = Rotation::random_so3(&mut rng);
            let back = derotate_frame(&f.rotate(&r), &r);
            for (a, b) in back.axes.iter().zip(&f.axes) {
                assert!((a - b).norm() < 1e-9);
                assert_relative_eq!(a.norm(), 1.0, epsilon = 1e-12);
            }
        }
    }
}
