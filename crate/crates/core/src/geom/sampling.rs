//! Farthest point sampling and neighbourhood queries. All kernels are exact
//! brute-force scans; clouds in this crate are at most a few thousand points.

use rand::Rng;

use super::Vec3;
use crate::error::{Error, Result};

/// How local patches gather their members.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NeighborSearch {
    Knn,
    Ball { radius: f64 },
}

/// Farthest point sampling with a random first index.
pub fn fps<R: Rng + ?Sized>(points: &[Vec3], m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::invalid("fps on an empty cloud"));
    }
    let start = rng.random_range(0..points.len());
    fps_from(points, m, start)
}

/// Farthest point sampling from a fixed first index. Each subsequent pick
/// maximizes the distance to the already selected set; ties go to the lowest
/// index.
pub fn fps_from(points: &[Vec3], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("fps: cannot select {m} of {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!("fps: start index {start} out of range")));
    }
    let mut selected = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; n];
    let mut current = start;
    for _ in 0..m {
        selected.push(current);
        let c = points[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        current = best.1;
    }
    Ok(selected)
}

/// The `k` nearest base points of every query, ordered by ascending distance
/// with ties broken by the lower index.
pub fn knn(query: &[Vec3], base: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k > base.len() {
        return Err(Error::invalid(format!(
            "knn: k = {k} exceeds {} base points",
            base.len()
        )));
    }
    let mut scratch: Vec<(f64, usize)> = Vec::with_capacity(base.len());
    Ok(query
        .iter()
        .map(|q| {
            scratch.clear();
            scratch.extend(base.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)));
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k > 0 && k < scratch.len() {
                scratch.select_nth_unstable_by(k - 1, cmp);
            }
            let head = &mut scratch[..k];
            head.sort_unstable_by(cmp);
            head.iter().map(|&(_, i)| i).collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BallQuery {
    pub indices: Vec<Vec<usize>>,
    /// Queries whose ball was empty and fell back to the nearest neighbour.
    pub fallbacks: usize,
}

/// Up to `k_max` base indices strictly within `radius` of each query, in index
/// order. Short lists are padded with the first found index; an empty ball
/// falls back to the nearest base point.
pub fn ball_query(query: &[Vec3], base: &[Vec3], radius: f64, k_max: usize) -> Result<BallQuery> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::invalid(format!(
            "ball_query: radius must be positive, got {radius}"
        )));
    }
    if base.is_empty() || k_max == 0 {
        return Err(Error::invalid("ball_query: empty base set or k_max = 0"));
    }
    let r2 = radius * radius;
    let mut fallbacks = 0;
    let indices = query
        .iter()
        .map(|q| {
            let mut found: Vec<usize> = base
                .iter()
                .enumerate()
                .filter(|(_, p)| (*p - q).norm_squared() < r2)
                .map(|(i, _)| i)
                .take(k_max)
                .collect();
            if found.is_empty() {
                fallbacks += 1;
                let nearest = knn(std::slice::from_ref(q), base, 1).expect("base is non-empty")[0][0];
                found.push(nearest);
            }
            let first = found[0];
            found.resize(k_max, first);
            found
        })
        .collect();
    Ok(BallQuery { indices, fallbacks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line(xs: &[f64]) -> Vec<Vec3> {
        xs.iter().map(|&x| Vec3::new(x, 0.0, 0.0)).collect()
    }

    #[test]
    fn fps_collinear_forced_choice() {
        assert_eq!(fps_from(&line(&[0.0, 1.0, 2.0, 3.0]), 2, 0).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_full_selection_is_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts: Vec<Vec3> = (0..40)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let mut sel = fps(&pts, 40, &mut rng).unwrap();
        sel.sort();
        assert_eq!(sel, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_oversized_request() {
        assert!(fps_from(&line(&[0.0, 1.0]), 3, 0).is_err());
    }

    #[test]
    fn knn_examples() {
        let pts = line(&[0.0, 1.0, 10.0]);
        assert_eq!(knn(&pts, &pts, 1).unwrap(), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(knn(&pts[..1], &pts, 2).unwrap(), vec![vec![0, 1]]);
        assert!(knn(&pts, &pts, 4).is_err());
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let pts = line(&[-1.0, 1.0, 0.5, -0.5]);
        assert_eq!(knn(&[Vec3::zeros()], &pts, 4).unwrap(), vec![vec![2, 3, 0, 1]]);
    }

    #[test]
    fn ball_query_covering_radius_takes_index_order() {
        let pts = line(&[0.0, 0.1, 0.2, 0.3, 0.4]);
        let bq = ball_query(&pts[2..3], &pts, 10.0, 3).unwrap();
        assert_eq!(bq.indices, vec![vec![0, 1, 2]]);
        assert_eq!(bq.fallbacks, 0);
    }

    #[test]
    fn ball_query_pads_with_first_and_falls_back() {
        let pts = line(&[0.0, 0.01, 5.0]);
        let bq = ball_query(&[Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0)], &pts, 0.05, 4).unwrap();
        assert_eq!(bq.indices[0], vec![0, 1, 0, 0]);
        assert_eq!(bq.indices[1], vec![1, 1, 1, 1]);
        assert_eq!(bq.fallbacks, 1);
    }
}
