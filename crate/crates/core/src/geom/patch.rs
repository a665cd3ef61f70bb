use rand::Rng;

use super::sampling::{ball_query, fps, knn, NeighborSearch};
use super::{PointCloud, Rotate, Rotation, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchScale {
    Local,
    Global,
}

/// A neighbourhood translated so that its anchor sits at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `world_points - anchor`, row-wise.
    pub local_points: Vec<Vec3>,
    /// World-frame position used in relations: the anchor for local patches,
    /// the world origin for global patches.
    pub reference_point: Vec3,
    /// World-frame point subtracted from the members (the local reference `q_i`).
    pub anchor: Vec3,
    pub scale: PatchScale,
}

impl Patch {
    pub fn centroid(&self) -> Vec3 {
        let s: Vec3 = self.local_points.iter().sum();
        s / self.local_points.len().max(1) as f64
    }
}

impl Rotate for Patch {
    fn rotated(&self, r: &Rotation) -> Self {
        Patch {
            local_points: self.local_points.rotated(r),
            reference_point: r.apply(&self.reference_point),
            anchor: r.apply(&self.anchor),
            scale: self.scale,
        }
    }
}

/// FPS picks `n_l` references; each gathers its `k_l` nearest neighbours,
/// translated by `-q_i`. Returns the patches and the reference indices.
pub fn extract_local_patches<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_l: usize,
    k_l: usize,
    rng: &mut R,
) -> Result<(Vec<Patch>, Vec<usize>)> {
    let refs = fps(&cloud.points, n_l, rng)?;
    let patches = local_patches_at(cloud, &refs, k_l, NeighborSearch::Knn)?;
    Ok((patches, refs))
}

/// Local patches around given reference indices.
pub fn local_patches_at(cloud: &PointCloud, refs: &[usize], k: usize, search: NeighborSearch) -> Result<Vec<Patch>> {
    if k == 0 || k > cloud.len() {
        return Err(Error::invalid(format!(
            "patch size {k} invalid for a cloud of {} points",
            cloud.len()
        )));
    }
    let queries: Vec<Vec3> = refs.iter().map(|&i| cloud.points[i]).collect();
    let members = match search {
        NeighborSearch::Knn => knn(&queries, &cloud.points, k)?,
        NeighborSearch::Ball { radius } => ball_query(&queries, &cloud.points, radius, k)?.indices,
    };
    Ok(queries
        .iter()
        .zip(members)
        .map(|(q, idx)| Patch {
            local_points: idx.iter().map(|&j| cloud.points[j] - q).collect(),
            reference_point: *q,
            anchor: *q,
            scale: PatchScale::Local,
        })
        .collect())
}

/// FPS-downsamples the cloud to `n_g` points once, then builds one global
/// patch per reference point, translated by `-q_i`, with the world origin as
/// its reference point.
pub fn extract_global_patches<R: Rng + ?Sized>(
    cloud: &PointCloud,
    n_g: usize,
    reference_points: &[Vec3],
    rng: &mut R,
) -> Result<Vec<Patch>> {
    let sample: Vec<Vec3> = fps(&cloud.points, n_g, rng)?
        .into_iter()
        .map(|i| cloud.points[i])
        .collect();
    Ok(global_patches_from(&sample, reference_points))
}

pub fn global_patches_from(sample: &[Vec3], reference_points: &[Vec3]) -> Vec<Patch> {
    reference_points
        .iter()
        .map(|q| Patch {
            local_points: sample.iter().map(|p| p - q).collect(),
            reference_point: Vec3::zeros(),
            anchor: *q,
            scale: PatchScale::Global,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    )
                })
                .collect(),
        )
        .center_and_scale()
        .unwrap()
    }

    #[test]
    fn singleton_patches_are_zero() {
        let c = cloud(1, 30);
        let (patches, refs) = extract_local_patches(&c, 30, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(refs.len(), 30);
        for p in &patches {
            assert_eq!(p.local_points, vec![Vec3::zeros()]);
        }
    }

    #[test]
    fn local_patches_contain_origin_and_translate() {
        let c = cloud(2, 100);
        let (patches, refs) = extract_local_patches(&c, 10, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (p, &r) in patches.iter().zip(&refs) {
            assert_eq!(p.reference_point, c.points[r]);
            assert!(p.local_points.iter().any(|v| v.norm() == 0.0));
        }
    }

    #[test]
    fn local_patches_commute_with_rotation() {
        let c = cloud(3, 120);
        let r = Rotation::random_so3(&mut ChaCha8Rng::seed_from_u64(7));
        let (a, ia) = extract_local_patches(&c, 16, 12, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (b, ib) = extract_local_patches(&c.rotated(&r), 16, 12, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(ia, ib);
        for (pa, pb) in a.iter().zip(&b) {
            for (x, y) in pa.rotated(&r).local_points.iter().zip(&pb.local_points) {
                assert!((x - y).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn patch_centroid_bounded_by_diameter() {
        let c = cloud(4, 80);
        let diam = c
            .points
            .iter()
            .flat_map(|a| c.points.iter().map(move |b| (a - b).norm()))
            .fold(0.0, f64::max);
        let (patches, _) = extract_local_patches(&c, 20, 16, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(patches.iter().all(|p| p.centroid().norm() <= diam));
    }

    #[test]
    fn full_global_patch_is_translated_cloud() {
        let c = cloud(5, 40);
        let q = [c.points[3], c.points[9]];
        let g = extract_global_patches(&c, 40, &q, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(g[0].reference_point, Vec3::zeros());
        let mut got: Vec<[f64; 3]> = g[0].local_points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let mut want: Vec<[f64; 3]> = c.points.iter().map(|p| p - q[0]).map(|p| [p.x, p.y, p.z]).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        for (a, b) in g[0].local_points.iter().zip(&g[1].local_points) {
            assert!((a - b - (q[1] - q[0])).norm() < 1e-12);
        }
    }

    #[test]
    fn ball_search_patches() {
        let c = cloud(6, 64);
        let p = local_patches_at(&c, &[0, 1], 8, NeighborSearch::Ball { radius: 0.5 }).unwrap();
        assert!(p
            .iter()
            .all(|p| p.local_points.len() == 8 && p.local_points.iter().all(|v| v.norm() < 0.5)));
    }
}
