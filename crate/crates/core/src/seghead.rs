//! Pose-aware feature propagation from sparse reference patches to dense
//! points, an inverse-distance interpolation baseline, and the per-point
//! segmentation head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::disentangle::CONTENT_WIDTH;
use crate::error::{Error, Result};
use crate::geom::{knn, point_relation, OrientationFrame, Vec3, POINT_RELATION_WIDTH};
use crate::hierarchy::{RelationEncoder, RELATION_CODE_WIDTH};
use crate::numkernel::{
    Activation, BatchNorm, BlockLinear, Dense, Linear, Mlp, ParamStore, Real, Session, Tensor, Var,
};

pub const PROPAGATED_WIDTH: usize = 128;
const HIDDEN_WIDTH: usize = 256;
const HEAD_WIDTH: usize = 128;
pub const SEG_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PropagationMode {
    /// Relation-conditioned MLP summed over sparse neighbours.
    #[default]
    PoseAware,
    /// Inverse-distance weighted average of sparse features, coordinates
    /// stripped.
    Interpolation,
}

impl PropagationMode {
    pub fn name(self) -> &'static str {
        match self {
            PropagationMode::PoseAware => "pose_aware",
            PropagationMode::Interpolation => "interpolation",
        }
    }
}

impl fmt::Display for PropagationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PropagationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pose_aware" | "pose-aware" | "pose" => Ok(PropagationMode::PoseAware),
            "interpolation" | "interp" => Ok(PropagationMode::Interpolation),
            other => Err(Error::invalid(format!(
                "unknown propagation mode '{other}' (expected pose_aware or interpolation)"
            ))),
        }
    }
}

/// Dense points of one cloud with their `k_prop` nearest references, in
/// ascending distance (then index) order.
#[derive(Clone, Debug)]
pub struct DenseGraph {
    pub points: Vec<Vec3>,
    pub refs: Vec<Vec3>,
    pub neighbors: Vec<Vec<usize>>,
}

impl DenseGraph {
    pub fn new(points: Vec<Vec3>, refs: Vec<Vec3>, k_prop: usize) -> Result<Self> {
        if k_prop == 0 || k_prop > refs.len() {
            return Err(Error::invalid(format!(
                "k_prop = {k_prop} must lie in 1..={} (number of reference patches)",
                refs.len()
            )));
        }
        let neighbors = knn(&points, &refs, k_prop)?;
        Ok(Self {
            points,
            refs,
            neighbors,
        })
    }
}

/// One stage is built per model, so the variant size gap is irrelevant.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum Stage {
    PoseAware {
        first: BlockLinear,
        first_norm: BatchNorm,
        second: Dense,
        relation: RelationEncoder,
    },
    Interpolation {
        mlp: Mlp,
    },
}

#[derive(Clone, Debug)]
pub struct Propagation {
    stage: Stage,
}

struct Edges {
    dense: Vec<usize>,
    sparse: Vec<usize>,
    k: usize,
}

fn collect_edges(graphs: &[DenseGraph]) -> Result<Edges> {
    let k = graphs.first().and_then(|g| g.neighbors.first()).map_or(0, Vec::len);
    if k == 0 {
        return Err(Error::invalid("propagate: empty neighbour graph"));
    }
    let mut dense = Vec::new();
    let mut sparse = Vec::new();
    let (mut dense_off, mut sparse_off) = (0, 0);
    for g in graphs {
        for (i, nbrs) in g.neighbors.iter().enumerate() {
            if nbrs.len() != k {
                return Err(Error::invalid("propagate: neighbour lists differ in length"));
            }
            for &j in nbrs {
                dense.push(dense_off + i);
                sparse.push(sparse_off + j);
            }
        }
        dense_off += g.points.len();
        sparse_off += g.refs.len();
    }
    Ok(Edges { dense, sparse, k })
}

impl Propagation {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, mode: PropagationMode, rng: &mut R) -> Self {
        let stage = match mode {
            PropagationMode::PoseAware => Stage::PoseAware {
                relation: RelationEncoder::new(store, &format!("{name}.relation"), POINT_RELATION_WIDTH, rng),
                first: BlockLinear::new(
                    store,
                    &format!("{name}.0"),
                    &[CONTENT_WIDTH, CONTENT_WIDTH, RELATION_CODE_WIDTH],
                    HIDDEN_WIDTH,
                    rng,
                ),
                first_norm: BatchNorm::new(store, &format!("{name}.0.bn"), HIDDEN_WIDTH),
                second: Dense::new(
                    store,
                    &format!("{name}.1"),
                    HIDDEN_WIDTH,
                    PROPAGATED_WIDTH,
                    true,
                    Activation::Relu,
                    rng,
                ),
            },
            PropagationMode::Interpolation => Stage::Interpolation {
                mlp: Mlp::new(
                    store,
                    &format!("{name}.interp"),
                    &[2 * CONTENT_WIDTH, HIDDEN_WIDTH, PROPAGATED_WIDTH],
                    Activation::Relu,
                    rng,
                ),
            },
        };
        Self { stage }
    }

    pub fn mode(&self) -> PropagationMode {
        match self.stage {
            Stage::PoseAware { .. } => PropagationMode::PoseAware,
            Stage::Interpolation { .. } => PropagationMode::Interpolation,
        }
    }

    /// `dense`: `[Σ N, 128]`, `sparse`: `[Σ N_l, 128]`, `sparse_frames` one
    /// per sparse row. Returns `[Σ N, 128]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        dense: Var,
        sparse: Var,
        graphs: &[DenseGraph],
        sparse_frames: &[OrientationFrame],
    ) -> Result<Var> {
        let n_dense: usize = graphs.iter().map(|g| g.points.len()).sum();
        let n_sparse: usize = graphs.iter().map(|g| g.refs.len()).sum();
        if s.tape.shape(dense)[0] != n_dense || s.tape.shape(sparse)[0] != n_sparse {
            return Err(Error::shape("propagate", s.tape.shape(dense), s.tape.shape(sparse)));
        }
        let edges = collect_edges(graphs)?;
        match &self.stage {
            Stage::PoseAware {
                first,
                first_norm,
                second,
                relation,
            } => {
                if sparse_frames.len() != n_sparse {
                    return Err(Error::shape("propagate", &[sparse_frames.len()], &[n_sparse]));
                }
                let mut rel = Vec::with_capacity(edges.dense.len() * POINT_RELATION_WIDTH);
                let mut sparse_off = 0;
                for g in graphs {
                    for (p, nbrs) in g.points.iter().zip(&g.neighbors) {
                        for &j in nbrs {
                            rel.extend(point_relation(p, &g.refs[j], &sparse_frames[sparse_off + j]));
                        }
                    }
                    sparse_off += g.refs.len();
                }
                let p = first.project(s, 0, dense, true)?;
                let q = first.project(s, 1, sparse, false)?;
                let gp = s.tape.gather_rows(p, &edges.dense)?;
                let gq = s.tape.gather_rows(q, &edges.sparse)?;
                let code = relation.encode(s, &rel, POINT_RELATION_WIDTH)?;
                let r = first.project(s, 2, code, false)?;
                let pre = s.tape.add(gp, gq)?;
                let pre = s.tape.add(pre, r)?;
                let h = first_norm.forward(s, pre)?;
                let h = s.tape.relu(h);
                let h = second.forward(s, h)?;
                s.tape.sum_groups(h, edges.k)
            }
            Stage::Interpolation { mlp } => {
                let mut weights = Vec::with_capacity(edges.dense.len() * CONTENT_WIDTH);
                for g in graphs {
                    for (i, nbrs) in g.neighbors.iter().enumerate() {
                        let inv: Vec<f64> = nbrs
                            .iter()
                            .map(|&j| 1.0 / ((g.points[i] - g.refs[j]).norm() + 1e-8))
                            .collect();
                        let total: f64 = inv.iter().sum();
                        for w in inv {
                            weights.extend(std::iter::repeat_n(T::of(w / total), CONTENT_WIDTH));
                        }
                    }
                }
                let w = s.constant(Tensor::new(vec![edges.dense.len(), CONTENT_WIDTH], weights)?);
                let gq = s.tape.gather_rows(sparse, &edges.sparse)?;
                let weighted = s.tape.mul(gq, w)?;
                let interp = s.tape.sum_groups(weighted, edges.k)?;
                let x = s.tape.concat(&[dense, interp])?;
                mlp.forward(s, x)
            }
        }
    }
}

/// Validated one-hot category vector of the given width.
pub fn onehot(category: usize, width: usize) -> Result<Vec<f64>> {
    if category >= width {
        return Err(Error::invalid(format!(
            "category {category} out of range for one-hot width {width}"
        )));
    }
    let mut v = vec![0.0; width];
    v[category] = 1.0;
    Ok(v)
}

fn check_onehot(v: &[f64], width: usize) -> Result<()> {
    let ones = v.iter().filter(|&&x| x == 1.0).count();
    let zeros = v.iter().filter(|&&x| x == 0.0).count();
    if v.len() != width || ones != 1 || ones + zeros != width {
        return Err(Error::invalid(format!("invalid one-hot vector {v:?} (width {width})")));
    }
    Ok(())
}

/// `[features, one-hot] → 128 → parts` with dropout 0.5.
#[derive(Clone, Debug)]
pub struct SegHead {
    fc: Dense,
    out: Linear,
    pub num_categories: usize,
    pub num_parts: usize,
}

impl SegHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        num_categories: usize,
        num_parts: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            fc: Dense::new(
                store,
                &format!("{name}.fc"),
                PROPAGATED_WIDTH + num_categories,
                HEAD_WIDTH,
                true,
                Activation::Relu,
                rng,
            ),
            out: Linear::new(store, &format!("{name}.out"), HEAD_WIDTH, num_parts, true, rng),
            num_categories,
            num_parts,
        }
    }

    /// `features`: `[Σ N, 128]`; one one-hot vector per cloud, each covering
    /// `points_per_cloud` consecutive rows.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        features: Var,
        onehots: &[Vec<f64>],
        points_per_cloud: usize,
    ) -> Result<Var> {
        let rows = s.tape.shape(features)[0];
        if rows != onehots.len() * points_per_cloud {
            return Err(Error::shape("segment", &[rows], &[onehots.len(), points_per_cloud]));
        }
        let mut data = Vec::with_capacity(rows * self.num_categories);
        for v in onehots {
            check_onehot(v, self.num_categories)?;
            for _ in 0..points_per_cloud {
                data.extend(v.iter().map(|&x| T::of(x)));
            }
        }
        let cond = s.constant(Tensor::new(vec![rows, self.num_categories], data)?);
        let x = s.tape.concat(&[features, cond])?;
        let mut h = self.fc.forward(s, x)?;
        if s.training() {
            h = s.tape.dropout(h, SEG_DROPOUT, &mut s.rng)?;
        }
        self.out.forward(s, h)
    }
}
