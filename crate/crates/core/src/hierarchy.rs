//! Relation encoding, intra-scale edge convolution over neighbouring local
//! patches, inter-scale fusion of local and global patches, and the
//! classification head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{geo_relation, knn, OrientationFrame, Vec3, PATCH_RELATION_WIDTH};
use crate::numkernel::{
    Activation, BatchNorm, BlockLinear, Dense, Linear, Mlp, ParamStore, Real, Session, Tensor, Var,
};

pub const RELATION_CODE_WIDTH: usize = 32;
pub const INTRA_PLAN: [usize; 4] = [288, 128, 128, 128];
pub const INTER_PLAN: [usize; 4] = [288, 256, 512, 1024];
pub const FUSED_WIDTH: usize = 1024;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const CLASSIFIER_DROPOUT: f64 = 0.5;

/// Which part of the 16-value patch relation reaches the relation encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RelationMode {
    #[default]
    Full,
    /// The nine frame-frame cosines.
    OrientationOnly,
    /// Distance plus the six offset cosines.
    PositionOnly,
    None,
}

impl RelationMode {
    pub fn width(self) -> usize {
        match self {
            RelationMode::Full => 16,
            RelationMode::OrientationOnly => 9,
            RelationMode::PositionOnly => 7,
            RelationMode::None => 0,
        }
    }

    /// Appends the selected slice of `rel` to `out`.
    pub fn extend_into(self, rel: &[f64; PATCH_RELATION_WIDTH], out: &mut Vec<f64>) {
        match self {
            RelationMode::Full => out.extend_from_slice(rel),
            RelationMode::OrientationOnly => out.extend_from_slice(&rel[1..10]),
            RelationMode::PositionOnly => {
                out.push(rel[0]);
                out.extend_from_slice(&rel[10..16]);
            }
            RelationMode::None => {}
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationMode::Full => "full",
            RelationMode::OrientationOnly => "orientation",
            RelationMode::PositionOnly => "position",
            RelationMode::None => "none",
        }
    }
}

impl fmt::Display for RelationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(RelationMode::Full),
            "orientation" | "orientation_only" => Ok(RelationMode::OrientationOnly),
            "position" | "position_only" => Ok(RelationMode::PositionOnly),
            "none" => Ok(RelationMode::None),
            other => Err(Error::invalid(format!(
                "unknown relation mode '{other}' (expected full, orientation, position or none)"
            ))),
        }
    }
}

/// `δ(·)`: FC to 32 channels, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct RelationEncoder {
    pub dense: Dense,
    pub in_width: usize,
}

impl RelationEncoder {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, in_width: usize, rng: &mut R) -> Self {
        Self {
            dense: Dense::new(store, name, in_width, RELATION_CODE_WIDTH, true, Activation::Relu, rng),
            in_width,
        }
    }

    /// Encodes `flat.len() / width` relation rows.
    pub fn encode<T: Real>(&self, s: &mut Session<T>, flat: &[f64], width: usize) -> Result<Var> {
        if width != self.in_width || width == 0 || !flat.len().is_multiple_of(width) {
            return Err(Error::shape(
                "relation_encode",
                &[flat.len() / width.max(1), width],
                &[self.in_width],
            ));
        }
        let x = s.constant(Tensor::from_f64(&[flat.len() / width, width], flat)?);
        self.dense.forward(s, x)
    }
}

/// Static neighbour graph over reference points: each reference's `k`
/// nearest references, itself included.
pub fn intra_neighbors(refs: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > refs.len() {
        return Err(Error::invalid(format!(
            "k_intra = {k} must lie in 1..={} (number of local patches)",
            refs.len()
        )));
    }
    knn(refs, refs, k)
}

/// Reference geometry of one cloud at the local scale.
#[derive(Clone, Debug)]
pub struct LocalGraph {
    pub refs: Vec<Vec3>,
    pub neighbors: Vec<Vec<usize>>,
}

impl LocalGraph {
    pub fn new(refs: Vec<Vec3>, k_intra: usize) -> Result<Self> {
        let neighbors = intra_neighbors(&refs, k_intra)?;
        Ok(Self { refs, neighbors })
    }
}

/// Edge convolution over `[f_j, f_j - f_i, δ(G(M_i, M_j))]` with a max over
/// each reference's neighbours.
#[derive(Clone, Debug)]
pub struct IntraScale {
    first: BlockLinear,
    first_norm: BatchNorm,
    rest: Mlp,
    relation: Option<RelationEncoder>,
    pub mode: RelationMode,
}

impl IntraScale {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, mode: RelationMode, rng: &mut R) -> Self {
        let width = INTRA_PLAN[1];
        let relation = (mode != RelationMode::None)
            .then(|| RelationEncoder::new(store, &format!("{name}.relation"), mode.width(), rng));
        let mut blocks = vec![crate::disentangle::CONTENT_WIDTH, crate::disentangle::CONTENT_WIDTH];
        if relation.is_some() {
            blocks.push(RELATION_CODE_WIDTH);
        }
        let first = BlockLinear::new(store, &format!("{name}.0"), &blocks, width, rng);
        let first_norm = BatchNorm::new(store, &format!("{name}.0.bn"), width);
        let rest = Mlp::new(
            store,
            &format!("{name}.rest"),
            &INTRA_PLAN[1..],
            Activation::LeakyRelu(LEAKY_SLOPE),
            rng,
        );
        Self {
            first,
            first_norm,
            rest,
            relation,
            mode,
        }
    }

    /// Pre-activation of the first edge layer, one row per (reference,
    /// neighbour) pair in reference-major order. Also returns `k`.
    pub fn edge_preactivation<T: Real>(
        &self,
        s: &mut Session<T>,
        content: Var,
        graphs: &[LocalGraph],
        frames: &[OrientationFrame],
    ) -> Result<(Var, usize)> {
        let total: usize = graphs.iter().map(|g| g.refs.len()).sum();
        let rows = s.tape.shape(content)[0];
        if rows != total || frames.len() != total {
            return Err(Error::shape("intra_scale_conv", &[rows, frames.len()], &[total]));
        }
        let k = graphs.first().and_then(|g| g.neighbors.first()).map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::invalid("intra_scale_conv: empty neighbour graph"));
        }
        let mut i_idx = Vec::with_capacity(total * k);
        let mut j_idx = Vec::with_capacity(total * k);
        let mut rel = Vec::with_capacity(total * k * self.mode.width());
        let mut offset = 0;
        for g in graphs {
            for (i, nbrs) in g.neighbors.iter().enumerate() {
                if nbrs.len() != k {
                    return Err(Error::invalid("intra_scale_conv: neighbour lists differ in length"));
                }
                for &j in nbrs {
                    i_idx.push(offset + i);
                    j_idx.push(offset + j);
                    if self.relation.is_some() {
                        let r = geo_relation(&g.refs[i], &frames[offset + i], &g.refs[j], &frames[offset + j]);
                        self.mode.extend_into(&r, &mut rel);
                    }
                }
            }
            offset += g.refs.len();
        }
        let w_feat = self.first.weight(s, 0);
        let w_diff = self.first.weight(s, 1);
        let w_sum = s.tape.add(w_feat, w_diff)?;
        let bias = s.param(self.first.bias);
        let u = s.tape.linear(content, w_sum, Some(bias))?;
        let v = s.tape.linear(content, w_diff, None)?;
        let gu = s.tape.gather_rows(u, &j_idx)?;
        let gv = s.tape.gather_rows(v, &i_idx)?;
        let mut pre = s.tape.sub(gu, gv)?;
        if let Some(enc) = &self.relation {
            let code = enc.encode(s, &rel, self.mode.width())?;
            let r = self.first.project(s, 2, code, false)?;
            pre = s.tape.add(pre, r)?;
        }
        Ok((pre, k))
    }

    /// `content`: `[Σ N_l, 128]` rows ordered cloud by cloud; `frames` in
    /// the same order. Returns `[Σ N_l, 128]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        content: Var,
        graphs: &[LocalGraph],
        frames: &[OrientationFrame],
    ) -> Result<Var> {
        let (pre, k) = self.edge_preactivation(s, content, graphs, frames)?;
        let h = self.first_norm.forward(s, pre)?;
        let h = s.tape.leaky_relu(h, LEAKY_SLOPE);
        let h = self.rest.forward(s, h)?;
        s.tape.max_groups(h, k)
    }
}

/// Fuses each local patch with its global counterpart and the relation
/// between them, then max-pools over all references of a cloud.
#[derive(Clone, Debug)]
pub struct InterScale {
    mlp: Mlp,
    relation: Option<RelationEncoder>,
    pub mode: RelationMode,
    pub with_global: bool,
}

impl InterScale {
    /// Without the global branch the MLP sees only the local features
    /// (`128 → 256 → 512 → 1024`).
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        mode: RelationMode,
        with_global: bool,
        rng: &mut R,
    ) -> Self {
        let relation = (with_global && mode != RelationMode::None)
            .then(|| RelationEncoder::new(store, &format!("{name}.relation"), mode.width(), rng));
        let width = crate::disentangle::CONTENT_WIDTH;
        let in_width = if with_global {
            2 * width + relation.as_ref().map_or(0, |_| RELATION_CODE_WIDTH)
        } else {
            width
        };
        let mut plan = INTER_PLAN.to_vec();
        plan[0] = in_width;
        Self {
            mlp: Mlp::new(
                store,
                &format!("{name}.mlp"),
                &plan,
                Activation::LeakyRelu(LEAKY_SLOPE),
                rng,
            ),
            relation,
            mode,
            with_global,
        }
    }

    /// `local`: `[Σ N_l, 128]`; `global`: matching rows from the global
    /// branch. Returns one pooled `[B, 1024]` row per cloud.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        local: Var,
        global: Option<Var>,
        graphs: &[LocalGraph],
        local_frames: &[OrientationFrame],
        global_frames: &[OrientationFrame],
    ) -> Result<Var> {
        let total: usize = graphs.iter().map(|g| g.refs.len()).sum();
        let per_cloud = graphs.first().map_or(0, |g| g.refs.len());
        if per_cloud == 0 || graphs.iter().any(|g| g.refs.len() != per_cloud) {
            return Err(Error::invalid(
                "inter_scale_fuse: clouds must have equal reference counts",
            ));
        }
        if s.tape.shape(local)[0] != total {
            return Err(Error::shape("inter_scale_fuse", s.tape.shape(local), &[total]));
        }
        let input = if self.with_global {
            let global = global.ok_or_else(|| Error::invalid("inter_scale_fuse: global features required"))?;
            if s.tape.shape(global)[0] != total || local_frames.len() != total || global_frames.len() != total {
                return Err(Error::shape(
                    "inter_scale_fuse",
                    &[total, local_frames.len()],
                    &[s.tape.shape(global)[0], global_frames.len()],
                ));
            }
            let mut parts = vec![local, global];
            if let Some(enc) = &self.relation {
                let origin = Vec3::zeros();
                let mut rel = Vec::with_capacity(total * self.mode.width());
                let refs = graphs.iter().flat_map(|g| g.refs.iter());
                for (i, q) in refs.enumerate() {
                    let r = geo_relation(q, &local_frames[i], &origin, &global_frames[i]);
                    self.mode.extend_into(&r, &mut rel);
                }
                parts.push(enc.encode(s, &rel, self.mode.width())?);
            }
            s.tape.concat(&parts)?
        } else {
            local
        };
        let h = self.mlp.forward(s, input)?;
        s.tape.max_groups(h, per_cloud)
    }
}

/// `1024 → 512 → 256 → C` with dropout 0.5 after each hidden layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    fc1: Dense,
    fc2: Dense,
    out: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, num_classes: usize, rng: &mut R) -> Self {
        Self {
            fc1: Dense::new(
                store,
                &format!("{name}.fc1"),
                FUSED_WIDTH,
                512,
                true,
                Activation::Relu,
                rng,
            ),
            fc2: Dense::new(store, &format!("{name}.fc2"), 512, 256, true, Activation::Relu, rng),
            out: Linear::new(store, &format!("{name}.out"), 256, num_classes, true, rng),
            num_classes,
        }
    }

    pub fn forward<T: Real>(&self, s: &mut Session<T>, fused: Var) -> Result<Var> {
        let mut h = self.fc1.forward(s, fused)?;
        if s.training() {
            h = s.tape.dropout(h, CLASSIFIER_DROPOUT, &mut s.rng)?;
        }
        h = self.fc2.forward(s, h)?;
        if s.training() {
            h = s.tape.dropout(h, CLASSIFIER_DROPOUT, &mut s.rng)?;
        }
        self.out.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{complete_frame, Rotation};
    use crate::numkernel::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        )
    }

    fn random_frame(rng: &mut ChaCha8Rng) -> OrientationFrame {
        complete_frame(&rand_vec(rng), &rand_vec(rng))
    }

    #[test]
    fn relation_mode_widths_and_slices() {
        let rel: [f64; 16] = std::array::from_fn(|i| i as f64);
        for (mode, width) in [
            (RelationMode::Full, 16),
            (RelationMode::OrientationOnly, 9),
            (RelationMode::PositionOnly, 7),
            (RelationMode::None, 0),
        ] {
            let mut out = Vec::new();
            mode.extend_into(&rel, &mut out);
            assert_eq!(out.len(), width);
            assert_eq!(mode.width(), width);
            assert_eq!(mode.name().parse::<RelationMode>().unwrap(), mode);
        }
        let mut pos = Vec::new();
        RelationMode::PositionOnly.extend_into(&rel, &mut pos);
        assert_eq!(pos, vec![0.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        assert!("sideways".parse::<RelationMode>().is_err());
    }

    #[test]
    fn orientation_slice_ignores_joint_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (fm, fnn) = (random_frame(&mut rng), random_frame(&mut rng));
        let (pm, pn, t) = (rand_vec(&mut rng), rand_vec(&mut rng), rand_vec(&mut rng) * 5.0);
        let mut a = Vec::new();
        let mut b = Vec::new();
        RelationMode::OrientationOnly.extend_into(&geo_relation(&pm, &fm, &pn, &fnn), &mut a);
        RelationMode::OrientationOnly.extend_into(&geo_relation(&(pm + t), &fm, &(pn + t), &fnn), &mut b);
        assert_eq!(a, b);
    }

    #[test]
    fn position_slice_ignores_frame_substitution() {
        // Same frame substituted for both patches: position part depends only
        // on that frame and the offset, not on the frames that were replaced.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pm, pn) = (rand_vec(&mut rng), rand_vec(&mut rng));
        let shared = random_frame(&mut rng);
        let mut a = Vec::new();
        let mut b = Vec::new();
        RelationMode::PositionOnly.extend_into(&geo_relation(&pm, &shared, &pn, &shared), &mut a);
        RelationMode::PositionOnly.extend_into(&geo_relation(&pm, &shared, &pn, &shared), &mut b);
        assert_eq!(a, b);
        let r = geo_relation(&pm, &shared, &pn, &shared);
        assert_eq!(&r[10..13], &r[13..16]);
    }

    #[test]
    fn relation_encoder_width_and_zero_input() {
        let mut store = ParamStore::<f64>::new();
        let enc = RelationEncoder::new(&mut store, "rel", 16, &mut ChaCha8Rng::seed_from_u64(0));
        let bias: Vec<f64> = store.get(enc.dense.linear.bias.unwrap()).data().to_vec();
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let out = enc.encode(&mut s, &[0.0; 16], 16).unwrap();
        assert_eq!(s.tape.shape(out), &[1, 32]);
        let scale = 1.0 / (1.0 + crate::numkernel::layers::BN_EPS).sqrt();
        for (o, b) in s.tape.value(out).data().iter().zip(&bias) {
            assert!((o - (b * scale).max(0.0)).abs() < 1e-12);
        }
        assert!(enc.encode(&mut s, &[0.0; 9], 9).is_err());
    }

    #[test]
    fn relation_encoder_rotated_pair_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let enc = RelationEncoder::new(&mut store, "rel", 16, &mut rng);
        let (pm, pn) = (rand_vec(&mut rng), rand_vec(&mut rng));
        let (fm, fnn) = (random_frame(&mut rng), random_frame(&mut rng));
        let r = Rotation::random_so3(&mut rng);
        let a = geo_relation(&pm, &fm, &pn, &fnn);
        let b = geo_relation(&r.apply(&pm), &fm.rotate(&r), &r.apply(&pn), &fnn.rotate(&r));
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let ea = enc.encode(&mut s, &a, 16).unwrap();
        let eb = enc.encode(&mut s, &b, 16).unwrap();
        assert!(s.tape.value(ea).max_abs_diff(s.tape.value(eb)) < 1e-5);
    }

    fn graph_fixture(rng: &mut ChaCha8Rng, n: usize, k: usize) -> (LocalGraph, Vec<OrientationFrame>, Tensor<f64>) {
        let refs: Vec<Vec3> = (0..n).map(|_| rand_vec(rng)).collect();
        let frames = (0..n).map(|_| random_frame(rng)).collect();
        let feats = Tensor::new(
            vec![n, 128],
            (0..n * 128).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (LocalGraph::new(refs, k).unwrap(), frames, feats)
    }

    #[test]
    fn intra_neighbors_include_self_and_reject_large_k() {
        let refs = vec![Vec3::zeros(), Vec3::x(), Vec3::new(3.0, 0.0, 0.0)];
        let n = intra_neighbors(&refs, 2).unwrap();
        assert_eq!(n, vec![vec![0, 1], vec![1, 0], vec![2, 1]]);
        assert!(intra_neighbors(&refs, 4).is_err());
    }

    #[test]
    fn edge_preactivation_matches_concatenated_mlp_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let intra = IntraScale::new(&mut store, "intra", RelationMode::Full, &mut rng);
        let (graph, frames, feats) = graph_fixture(&mut rng, 6, 3);
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let f = s.constant(feats.clone());
        let (pre, k) = intra
            .edge_preactivation(&mut s, f, std::slice::from_ref(&graph), &frames)
            .unwrap();
        assert_eq!(k, 3);
        let got = s.tape.value(pre).clone();

        // Naive: build [f_j, f_j - f_i, δ] rows and multiply by the stacked weight.
        let mut rel = Vec::new();
        let mut rows = Vec::new();
        for (i, nbrs) in graph.neighbors.iter().enumerate() {
            for &j in nbrs {
                let (fi, fj) = (feats.row(i), feats.row(j));
                let mut row: Vec<f64> = fj.to_vec();
                row.extend(fj.iter().zip(fi).map(|(a, b)| a - b));
                rows.push(row);
                rel.extend(geo_relation(&graph.refs[i], &frames[i], &graph.refs[j], &frames[j]));
            }
        }
        let code = intra.relation.as_ref().unwrap().encode(&mut s, &rel, 16).unwrap();
        let code = s.tape.value(code).clone();
        for (r, row) in rows.iter_mut().enumerate() {
            row.extend_from_slice(code.row(r));
        }
        let x = Tensor::from_rows(&rows);
        let mut w_rows = Vec::new();
        for id in &intra.first.blocks {
            let w = s.store.get(*id);
            for r in 0..w.dims2().0 {
                w_rows.push(w.row(r).to_vec());
            }
        }
        let mut want = x.matmul(&Tensor::from_rows(&w_rows)).unwrap();
        let bias = s.store.get(intra.first.bias).data().to_vec();
        for row in want.data_mut().chunks_exact_mut(128) {
            for (v, b) in row.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn single_self_neighbor_sees_zero_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let intra = IntraScale::new(&mut store, "intra", RelationMode::None, &mut rng);
        let (graph, frames, feats) = graph_fixture(&mut rng, 5, 1);
        assert!(graph.neighbors.iter().enumerate().all(|(i, n)| n == &vec![i]));
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let f = s.constant(feats.clone());
        let (pre, _) = intra
            .edge_preactivation(&mut s, f, std::slice::from_ref(&graph), &frames)
            .unwrap();
        let w = s.store.get(intra.first.blocks[0]).clone();
        let mut want = feats.matmul(&w).unwrap();
        let bias = s.store.get(intra.first.bias).data().to_vec();
        for row in want.data_mut().chunks_exact_mut(128) {
            for (v, b) in row.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        assert!(s.tape.value(pre).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn neighbor_permutation_leaves_intra_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let intra = IntraScale::new(&mut store, "intra", RelationMode::Full, &mut rng);
        let (graph, frames, feats) = graph_fixture(&mut rng, 8, 4);
        let mut shuffled = graph.clone();
        for n in &mut shuffled.neighbors {
            n.reverse();
        }
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let f = s.constant(feats);
        let a = intra.forward(&mut s, f, &[graph], &frames).unwrap();
        let b = intra.forward(&mut s, f, &[shuffled], &frames).unwrap();
        assert!(s.tape.value(a).max_abs_diff(s.tape.value(b)) < 1e-12);
        assert_eq!(s.tape.shape(a), &[8, 128]);
    }

    #[test]
    fn inter_output_width_and_reference_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let inter = InterScale::new(&mut store, "inter", RelationMode::Full, true, &mut rng);
        let n = 6;
        let (graph, lf, local) = graph_fixture(&mut rng, n, 2);
        let gf: Vec<OrientationFrame> = (0..n).map(|_| random_frame(&mut rng)).collect();
        let global = Tensor::new(
            vec![n, 128],
            (0..n * 128).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |t: &Tensor<f64>| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
        let pg = LocalGraph {
            refs: perm.iter().map(|&i| graph.refs[i]).collect(),
            neighbors: graph.neighbors.clone(),
        };
        let plf: Vec<_> = perm.iter().map(|&i| lf[i]).collect();
        let pgf: Vec<_> = perm.iter().map(|&i| gf[i]).collect();
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let (l, g) = (s.constant(local.clone()), s.constant(global.clone()));
        let a = inter.forward(&mut s, l, Some(g), &[graph], &lf, &gf).unwrap();
        let (l, g) = (s.constant(permute(&local)), s.constant(permute(&global)));
        let b = inter.forward(&mut s, l, Some(g), &[pg], &plf, &pgf).unwrap();
        assert_eq!(s.tape.shape(a), &[1, FUSED_WIDTH]);
        assert!(s.tape.value(a).max_abs_diff(s.tape.value(b)) < 1e-12);
    }

    #[test]
    fn classifier_width_and_eval_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let head = ClassifierHead::new(&mut store, "cls", 4, &mut rng);
        let x = Tensor::new(vec![2, 1024], (0..2048).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let v = s.constant(x);
        let a = head.forward(&mut s, v).unwrap();
        let b = head.forward(&mut s, v).unwrap();
        assert_eq!(s.tape.shape(a), &[2, 4]);
        assert_eq!(s.tape.value(a), s.tape.value(b));
    }
}
