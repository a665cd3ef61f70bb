//! Siamese content/orientation disentanglement.
//!
//! A shared per-point encoder (3 → 64 → 128, max-pooled per patch) yields an
//! intermediate descriptor. A content head maps it to the 128-wide
//! rotation-invariant feature `f`; a direction trunk with two linear heads
//! predicts the raw direction vectors `d1`, `d2`. During training each patch
//! is encoded twice under independent rotations `R_a`, `R_b`; the direction
//! outputs of branch `a` are rotated back by `R_a⁻¹` to give the patch frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{complete_frame, OrientationFrame, Patch, Rotation, Vec3};
use crate::numkernel::{Activation, Dense, Linear, Mlp, ParamStore, Real, Session, Tape, Tensor, Var};

pub const CONTENT_WIDTH: usize = 128;
const ENCODER_PLAN: [usize; 3] = [3, 64, 128];
const TRUNK_WIDTH: usize = 64;
const DIRECTION_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Disentangler {
    pub name: String,
    encoder: Mlp,
    content: Dense,
    trunk: Dense,
    head_d1: Linear,
    head_d2: Linear,
}

/// Raw outputs of one branch for `P` patches.
#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    /// `[P, 128]`
    pub content: Var,
    /// `[P, 3]`, unnormalized
    pub d1: Var,
    /// `[P, 3]`, unnormalized
    pub d2: Var,
}

#[derive(Clone, Debug)]
pub struct DisentangleOutput {
    pub branch_a: BranchOutput,
    pub branch_b: Option<BranchOutput>,
    /// De-rotated frames from branch `a`, one per patch.
    pub frames: Vec<OrientationFrame>,
    pub rot_a: Vec<Rotation>,
    pub rot_b: Vec<Rotation>,
    pub degenerate: usize,
}

impl DisentangleOutput {
    pub fn content(&self) -> Var {
        self.branch_a.content
    }
}

/// Per-patch rotations for the two siamese branches.
#[derive(Clone, Debug)]
pub enum BranchRotations {
    /// Inference: branch `a` only, identity rotation.
    Identity,
    /// Branch `a` only, with the given rotations (no loss terms).
    Single(Vec<Rotation>),
    Pair(Vec<Rotation>, Vec<Rotation>),
}

impl BranchRotations {
    pub fn random_pair<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Self {
        let a = (0..count).map(|_| Rotation::random_so3(rng)).collect();
        let b = (0..count).map(|_| Rotation::random_so3(rng)).collect();
        BranchRotations::Pair(a, b)
    }

    pub fn random_single<R: Rng + ?Sized>(count: usize, rng: &mut R) -> Self {
        BranchRotations::Single((0..count).map(|_| Rotation::random_so3(rng)).collect())
    }
}

/// Stacks patch members (optionally rotated per patch) into a `[P * n, 3]`
/// tensor. All patches must have the same size.
pub fn stack_patches<T: Real>(patches: &[Patch], rotations: Option<&[Rotation]>) -> Result<Tensor<T>> {
    let n = patches.first().map_or(0, |p| p.local_points.len());
    if n == 0 {
        return Err(Error::invalid("patches must contain at least one point"));
    }
    let mut data = Vec::with_capacity(patches.len() * n * 3);
    for (i, p) in patches.iter().enumerate() {
        if p.local_points.len() != n {
            return Err(Error::invalid(format!(
                "patch {i} has {} points, expected {n}",
                p.local_points.len()
            )));
        }
        let r = rotations.map(|r| r[i]);
        for q in &p.local_points {
            let q = r.map_or(*q, |r| r.apply(q));
            data.extend([T::of(q.x), T::of(q.y), T::of(q.z)]);
        }
    }
    Tensor::new(vec![patches.len() * n, 3], data)
}

fn read_vec3<T: Real>(tape: &Tape<T>, v: Var, row: usize) -> Vec3 {
    let r = tape.value(v).row(row);
    Vec3::new(r[0].as_f64(), r[1].as_f64(), r[2].as_f64())
}

impl Disentangler {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        let width = ENCODER_PLAN[2];
        Self {
            name: name.to_string(),
            encoder: Mlp::new(store, &format!("{name}.encoder"), &ENCODER_PLAN, Activation::Relu, rng),
            content: Dense::new(
                store,
                &format!("{name}.content"),
                width,
                CONTENT_WIDTH,
                true,
                Activation::Relu,
                rng,
            ),
            trunk: Dense::new(
                store,
                &format!("{name}.trunk"),
                width,
                TRUNK_WIDTH,
                true,
                Activation::Relu,
                rng,
            ),
            head_d1: Linear::new(store, &format!("{name}.head_d1"), TRUNK_WIDTH, 3, true, rng),
            head_d2: Linear::new(store, &format!("{name}.head_d2"), TRUNK_WIDTH, 3, true, rng),
        }
    }

    /// Shared encoder applied to `[P * n, 3]` stacked patch members.
    pub fn encode_stacked<T: Real>(
        &self,
        s: &mut Session<T>,
        points: Tensor<T>,
        patch_size: usize,
    ) -> Result<BranchOutput> {
        let x = s.constant(points);
        let h = self.encoder.forward(s, x)?;
        let inter = s.tape.max_groups(h, patch_size)?;
        let content = self.content.forward(s, inter)?;
        let t = self.trunk.forward(s, inter)?;
        let d1 = self.head_d1.forward(s, t)?;
        let d2 = self.head_d2.forward(s, t)?;
        Ok(BranchOutput { content, d1, d2 })
    }

    /// Encodes patches in their given pose (no siamese rotation).
    pub fn encode_patches<T: Real>(&self, s: &mut Session<T>, patches: &[Patch]) -> Result<BranchOutput> {
        let n = patches.first().map_or(0, |p| p.local_points.len());
        self.encode_stacked(s, stack_patches(patches, None)?, n)
    }

    /// Runs branch `a` (and branch `b` when a rotation pair is given) and
    /// derives the de-rotated orientation frame of every patch.
    pub fn siamese_forward<T: Real>(
        &self,
        s: &mut Session<T>,
        patches: &[Patch],
        rotations: BranchRotations,
    ) -> Result<DisentangleOutput> {
        let n = patches.first().map_or(0, |p| p.local_points.len());
        let count = patches.len();
        let (rot_a, rot_b) = match rotations {
            BranchRotations::Identity => (vec![Rotation::identity(); count], Vec::new()),
            BranchRotations::Single(a) => (a, Vec::new()),
            BranchRotations::Pair(a, b) => (a, b),
        };
        if rot_a.len() != count || !(rot_b.is_empty() || rot_b.len() == count) {
            return Err(Error::invalid("one rotation per patch and branch is required"));
        }
        let branch_a = self.encode_stacked(s, stack_patches(patches, Some(&rot_a))?, n)?;
        let branch_b = if rot_b.is_empty() {
            None
        } else {
            Some(self.encode_stacked(s, stack_patches(patches, Some(&rot_b))?, n)?)
        };
        let mut degenerate = 0;
        let frames = rot_a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let back = r.inverse();
                let d1 = back.apply(&read_vec3(&s.tape, branch_a.d1, i));
                let d2 = back.apply(&read_vec3(&s.tape, branch_a.d2, i));
                let f = complete_frame(&d1, &d2);
                degenerate += usize::from(f.degenerate);
                f
            })
            .collect();
        Ok(DisentangleOutput {
            branch_a,
            branch_b,
            frames,
            rot_a,
            rot_b,
            degenerate,
        })
    }

    /// Weighted auxiliary losses of this module (zero weights add nothing).
    pub fn losses<T: Real>(
        &self,
        tape: &mut Tape<T>,
        out: &DisentangleOutput,
        equi_weight: f64,
        inv_weight: f64,
        orth_weight: f64,
    ) -> Result<AuxLosses> {
        let mut terms = AuxLosses::default();
        // Directions enter both losses at unit length: on raw outputs the
        // cheapest minimizer of either term is shrinking the heads to zero.
        let a1 = tape.row_normalize(out.branch_a.d1, DIRECTION_EPS)?;
        let a2 = tape.row_normalize(out.branch_a.d2, DIRECTION_EPS)?;
        if orth_weight != 0.0 {
            terms.orth = Some(loss_orth(tape, a1, a2)?);
        }
        if let Some(b) = &out.branch_b {
            if equi_weight != 0.0 {
                let b1 = tape.row_normalize(b.d1, DIRECTION_EPS)?;
                let b2 = tape.row_normalize(b.d2, DIRECTION_EPS)?;
                terms.equi = Some(loss_equi(tape, (a1, a2), (b1, b2), &out.rot_a, &out.rot_b)?);
            }
            if inv_weight != 0.0 {
                terms.inv = Some(loss_inv(tape, out.branch_a.content, b.content)?);
            }
        }
        Ok(terms)
    }
}

/// Per-module auxiliary loss nodes (unweighted).
#[derive(Clone, Copy, Debug, Default)]
pub struct AuxLosses {
    pub equi: Option<Var>,
    pub orth: Option<Var>,
    pub inv: Option<Var>,
}

/// Squared L2 distance between content features, averaged over patches.
pub fn loss_inv<T: Real>(tape: &mut Tape<T>, f_a: Var, f_b: Var) -> Result<Var> {
    let rows = tape.value(f_a).dims2().0;
    let diff = tape.sub(f_a, f_b)?;
    let sq = tape.sum_squares(diff);
    Ok(tape.scale(sq, 1.0 / rows.max(1) as f64))
}

/// `Σ_k ‖d_{a,k} - d_{b,k} · (R_b⁻¹ R_a)‖²` over both directions, averaged
/// over patches. Exactly equivariant directions `d_x = d · R_x` give zero.
pub fn loss_equi<T: Real>(
    tape: &mut Tape<T>,
    d_a: (Var, Var),
    d_b: (Var, Var),
    rot_a: &[Rotation],
    rot_b: &[Rotation],
) -> Result<Var> {
    if rot_a.len() != rot_b.len() {
        return Err(Error::invalid("loss_equi: rotation lists differ in length"));
    }
    let mats: Vec<[T; 9]> = rot_a
        .iter()
        .zip(rot_b)
        .map(|(ra, rb)| rb.inverse().then(ra).row_major().map(T::of))
        .collect();
    let mut total = None;
    for (a, b) in [(d_a.0, d_b.0), (d_a.1, d_b.1)] {
        let moved = tape.row_transform3(b, mats.clone())?;
        let diff = tape.sub(a, moved)?;
        let sq = tape.sum_squares(diff);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let total = total.expect("two direction terms");
    Ok(tape.scale(total, 1.0 / rot_a.len().max(1) as f64))
}

/// `(d1 · d2)²`, averaged over patches.
pub fn loss_orth<T: Real>(tape: &mut Tape<T>, d1: Var, d2: Var) -> Result<Var> {
    let dot = tape.row_dot(d1, d2)?;
    let sq = tape.mul(dot, dot)?;
    Ok(tape.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{PatchScale, Rotate};
    use crate::numkernel::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(seed: u64, n: usize) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            local_points: (0..n)
                .map(|_| {
                    Vec3::new(
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                        rng.random_range(-0.3..0.3),
                    )
                })
                .collect(),
            reference_point: Vec3::zeros(),
            anchor: Vec3::zeros(),
            scale: PatchScale::Local,
        }
    }

    fn setup() -> (ParamStore<f64>, Disentangler) {
        let mut store = ParamStore::new();
        let d = Disentangler::new(&mut store, "local", &mut ChaCha8Rng::seed_from_u64(0));
        (store, d)
    }

    fn content(store: &mut ParamStore<f64>, d: &Disentangler, patches: &[Patch]) -> Vec<f64> {
        let mut s = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let out = d.encode_patches(&mut s, patches).unwrap();
        let mut v = s.tape.value(out.content).data().to_vec();
        v.extend(s.tape.value(out.d1).data());
        v.extend(s.tape.value(out.d2).data());
        v
    }

    #[test]
    fn content_width_is_128() {
        let (mut store, d) = setup();
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let out = d.encode_patches(&mut s, &[patch(1, 8), patch(2, 8)]).unwrap();
        assert_eq!(s.tape.shape(out.content), &[2, 128]);
        assert_eq!(s.tape.shape(out.d1), &[2, 3]);
    }

    #[test]
    fn permutation_and_duplication_leave_output_unchanged() {
        let (mut store, d) = setup();
        let p = patch(3, 10);
        let base = content(&mut store, &d, std::slice::from_ref(&p));
        let mut shuffled = p.clone();
        shuffled.local_points.reverse();
        shuffled.local_points.swap(0, 4);
        assert_eq!(content(&mut store, &d, &[shuffled]), base);
        let mut doubled = p.clone();
        doubled.local_points.extend(p.local_points.clone());
        assert_eq!(content(&mut store, &d, &[doubled]), base);
    }

    #[test]
    fn equal_branch_rotations_give_identical_content() {
        let (mut store, d) = setup();
        let patches = vec![patch(4, 8), patch(5, 8)];
        let r = vec![Rotation::random_so3(&mut ChaCha8Rng::seed_from_u64(1)); 2];
        let mut s = Session::new(&mut store, Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let out = d
            .siamese_forward(&mut s, &patches, BranchRotations::Pair(r.clone(), r))
            .unwrap();
        let b = out.branch_b.unwrap();
        assert_eq!(s.tape.value(out.branch_a.content), s.tape.value(b.content));
    }

    #[test]
    fn branches_share_parameter_nodes() {
        let (mut store, d) = setup();
        let patches = vec![patch(6, 8)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = Session::new(&mut store, Mode::Train, ChaCha8Rng::seed_from_u64(0));
        let before = s.tape.len();
        d.siamese_forward(&mut s, &patches, BranchRotations::random_pair(1, &mut rng))
            .unwrap();
        // Every block is registered on the tape exactly once even though two
        // branches consumed it.
        let registered = s.store.iter().filter(|(id, _)| s.tape.param_var(*id).is_some()).count();
        assert!(registered > 0);
        let w = d.encoder.layers[0].linear.weight;
        let v = s.tape.param_var(w).unwrap();
        assert!(v.index() >= before);
        assert_eq!(s.tape.param(s.store, w), v);
    }

    #[test]
    fn identity_inference_matches_branch_a_with_identity() {
        let (mut store, d) = setup();
        let patches = vec![patch(7, 8), patch(8, 8)];
        let run = |store: &mut ParamStore<f64>, rot: BranchRotations| {
            let mut s = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
            let out = d.siamese_forward(&mut s, &patches, rot).unwrap();
            (s.tape.value(out.branch_a.content).clone(), out.frames)
        };
        let a = run(&mut store, BranchRotations::Identity);
        let b = run(
            &mut store,
            BranchRotations::Pair(vec![Rotation::identity(); 2], vec![Rotation::identity(); 2]),
        );
        assert_eq!(a, b);
    }

    #[test]
    fn derotated_frames_of_rotated_branch() {
        // Feeding M·R through branch a with R_a = R⁻¹ sees M itself, so the
        // frames must equal those of M rotated back by R_a.
        let (mut store, d) = setup();
        let p = patch(9, 12);
        let r = Rotation::random_so3(&mut ChaCha8Rng::seed_from_u64(3));
        let mut s = Session::new(&mut store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let plain = d
            .siamese_forward(&mut s, std::slice::from_ref(&p), BranchRotations::Identity)
            .unwrap();
        let turned = d
            .siamese_forward(&mut s, &[p.rotated(&r)], BranchRotations::Single(vec![r.inverse()]))
            .unwrap();
        for (a, b) in plain.frames[0]
            .axes
            .iter()
            .zip(&turned.frames[0].rotate(&r.inverse()).axes)
        {
            assert!((a - b).norm() < 1e-9);
        }
    }

    fn rows(tape: &mut Tape<f64>, rows: &[Vec3]) -> Var {
        tape.leaf(Tensor::from_rows(
            &rows.iter().map(|v| vec![v.x, v.y, v.z]).collect::<Vec<_>>(),
        ))
    }

    #[test]
    fn loss_inv_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![0.0, 1.0]]));
        let ab = loss_inv(&mut t, a, b).unwrap();
        let ba = loss_inv(&mut t, b, a).unwrap();
        let aa = loss_inv(&mut t, a, a).unwrap();
        assert_eq!(t.value(ab).item(), 2.0);
        assert_eq!(t.value(ba).item(), 2.0);
        assert_eq!(t.value(aa).item(), 0.0);
    }

    #[test]
    fn loss_orth_examples() {
        let mut t = Tape::<f64>::new();
        let x = rows(&mut t, &[Vec3::x()]);
        let y = rows(&mut t, &[Vec3::y()]);
        let nx = rows(&mut t, &[-Vec3::x()]);
        let l0 = loss_orth(&mut t, x, y).unwrap();
        let l1 = loss_orth(&mut t, x, x).unwrap();
        let l2 = loss_orth(&mut t, x, nx).unwrap();
        assert_eq!(t.value(l0).item(), 0.0);
        assert_eq!(t.value(l1).item(), 1.0);
        assert_eq!(t.value(l2).item(), 1.0);
    }

    #[test]
    fn loss_equi_convention_and_homogeneity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ra = Rotation::random_so3(&mut rng);
        let rb = Rotation::random_so3(&mut rng);
        let (d1, d2) = (Vec3::new(0.3, -0.5, 0.8), Vec3::new(-0.1, 0.9, 0.2));
        let mut t = Tape::<f64>::new();
        let a1 = rows(&mut t, &[ra.apply(&d1)]);
        let a2 = rows(&mut t, &[ra.apply(&d2)]);
        let b1 = rows(&mut t, &[rb.apply(&d1)]);
        let b2 = rows(&mut t, &[rb.apply(&d2)]);
        let l = loss_equi(&mut t, (a1, a2), (b1, b2), &[ra], &[rb]).unwrap();
        assert!(t.value(l).item() < 1e-12);

        let same = loss_equi(&mut t, (a1, a2), (a1, a2), &[ra], &[ra]).unwrap();
        assert!(t.value(same).item() < 1e-24);

        let off = loss_equi(&mut t, (a1, a2), (a2, a1), &[ra], &[rb]).unwrap();
        let s1 = t.scale(a1, 3.0);
        let s2 = t.scale(a2, 3.0);
        let off3 = loss_equi(&mut t, (s1, s2), (s2, s1), &[ra], &[rb]).unwrap();
        let (v, v3) = (t.value(off).item(), t.value(off3).item());
        assert!(v > 0.0);
        assert!((v3 - 9.0 * v).abs() < 1e-12 * v3.max(1.0));
    }
}
