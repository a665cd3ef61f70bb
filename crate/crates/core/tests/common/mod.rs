//! Independent oracles shared by the integration and acceptance tests.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use parot::data::gen_classification_set;
use parot::geom::{OrientationFrame, Vec3};
use parot::model::{prepare_cloud, ModelConfig, PatchRotation, PreparedCloud};
use parot::numkernel::{Mode, ParamStore, Session, Tape, Tensor, Var};
use parot::train::{init_model, total_loss, LossWeights};

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradient magnitude below which errors are measured absolutely, so
/// entries whose true gradient is zero do not divide rounding noise by zero.
pub const GRAD_FLOOR: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Central difference of `f` at step `FD_STEP`, or `None` when `f` is not
/// smooth on the stencil: a ReLU or max-pool switch inside `[-h, h]` makes
/// the estimates at `h` and `h / 2` disagree far beyond truncation error.
pub fn central_difference(mut f: impl FnMut(f64) -> f64) -> Option<f64> {
    let h = FD_STEP;
    let wide = (f(h) - f(-h)) / (2.0 * h);
    let narrow = (f(h / 2.0) - f(-h / 2.0)) / h;
    (relative_error(wide, narrow) < 1e-5).then_some(wide)
}

/// Worst relative error and the number of compared and skipped entries.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckReport {
    pub worst: f64,
    pub compared: usize,
    pub skipped: usize,
}

impl CheckReport {
    fn record(&mut self, analytic: f64, numeric: Option<f64>) {
        match numeric {
            Some(n) => {
                self.worst = self.worst.max(relative_error(analytic, n));
                self.compared += 1;
            }
            None => self.skipped += 1,
        }
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.worst = self.worst.max(other.worst);
        self.compared += other.compared;
        self.skipped += other.skipped;
    }
}

enum Step {
    Linear { w: usize, b: Option<usize> },
    MatMul { w: usize },
    Add(Option<usize>),
    Sub(Option<usize>),
    Mul(Option<usize>),
    Scale(f64),
    Relu,
    Leaky(f64),
    BatchNorm { gamma: usize, beta: usize },
    Concat(usize),
    MaxGroups(usize),
    SumGroups(usize),
    Gather(Vec<usize>),
    Normalize,
    Transform3 { w: usize, mats: Vec<[f64; 9]> },
    RowDot(usize),
    Dropout(u64),
}

enum Head {
    Xent(Vec<usize>),
    Weighted(Tensor<f64>),
}

/// A random differentiable program over leaf tensors.
pub struct RandomGraph {
    pub leaves: Vec<Tensor<f64>>,
    steps: Vec<Step>,
    head: Head,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

impl RandomGraph {
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = 2 * rng.random_range(2..5usize);
        let mut cols = rng.random_range(2..5usize);
        let mut leaves = vec![uniform(&mut rng, &[rows, cols])];
        let mut steps = Vec::new();
        let leaf = |rng: &mut ChaCha8Rng, leaves: &mut Vec<Tensor<f64>>, shape: &[usize]| {
            leaves.push(uniform(rng, shape));
            leaves.len() - 1
        };
        for _ in 0..rng.random_range(3..9) {
            let step = match rng.random_range(0..17) {
                0 => {
                    let out = rng.random_range(2..6);
                    let w = leaf(&mut rng, &mut leaves, &[cols, out]);
                    let b = rng.random_bool(0.5).then(|| leaf(&mut rng, &mut leaves, &[out]));
                    cols = out;
                    Step::Linear { w, b }
                }
                1 => {
                    let out = rng.random_range(2..6);
                    let w = leaf(&mut rng, &mut leaves, &[cols, out]);
                    cols = out;
                    Step::MatMul { w }
                }
                k @ 2..=4 => {
                    let other = rng.random_bool(0.6).then(|| leaf(&mut rng, &mut leaves, &[rows, cols]));
                    match k {
                        2 => Step::Add(other),
                        3 => Step::Sub(other),
                        _ => Step::Mul(other),
                    }
                }
                5 => Step::Scale(rng.random_range(-2.0..2.0)),
                6 => Step::Relu,
                7 => Step::Leaky(0.2),
                8 if rows >= 2 => {
                    let gamma = leaf(&mut rng, &mut leaves, &[cols]);
                    let beta = leaf(&mut rng, &mut leaves, &[cols]);
                    Step::BatchNorm { gamma, beta }
                }
                9 => {
                    let extra = rng.random_range(1..3);
                    let other = leaf(&mut rng, &mut leaves, &[rows, extra]);
                    cols += extra;
                    Step::Concat(other)
                }
                10 if rows >= 4 => {
                    rows /= 2;
                    Step::MaxGroups(2)
                }
                11 if rows >= 4 => {
                    rows /= 2;
                    Step::SumGroups(2)
                }
                12 => Step::Gather((0..rows).map(|_| rng.random_range(0..rows)).collect()),
                13 => Step::Normalize,
                14 => {
                    let w = leaf(&mut rng, &mut leaves, &[cols, 3]);
                    let mats = (0..rows)
                        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                        .collect();
                    cols = 3;
                    Step::Transform3 { w, mats }
                }
                15 => {
                    let other = leaf(&mut rng, &mut leaves, &[rows, cols]);
                    cols += 1;
                    Step::RowDot(other)
                }
                _ => Step::Dropout(rng.random()),
            };
            steps.push(step);
        }
        let head = if rng.random_bool(0.5) {
            Head::Xent((0..rows).map(|_| rng.random_range(0..cols)).collect())
        } else {
            Head::Weighted(uniform(&mut rng, &[rows, cols]))
        };
        Self { leaves, steps, head }
    }

    /// Builds the program on a fresh tape with the given leaf values.
    pub fn run(&self, leaves: &[Tensor<f64>]) -> (Tape<f64>, Var, Vec<Var>) {
        let mut t = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| t.leaf(l.clone())).collect();
        let mut h = vars[0];
        for step in &self.steps {
            h = match step {
                Step::Linear { w, b } => t.linear(h, vars[*w], b.map(|b| vars[b])).unwrap(),
                Step::MatMul { w } => t.matmul(h, vars[*w]).unwrap(),
                Step::Add(o) => t.add(h, o.map_or(h, |o| vars[o])).unwrap(),
                Step::Sub(o) => match o {
                    Some(o) => t.sub(h, vars[*o]).unwrap(),
                    None => {
                        let half = t.scale(h, 0.5);
                        t.sub(h, half).unwrap()
                    }
                },
                Step::Mul(o) => t.mul(h, o.map_or(h, |o| vars[o])).unwrap(),
                Step::Scale(c) => t.scale(h, *c),
                Step::Relu => t.relu(h),
                Step::Leaky(s) => t.leaky_relu(h, *s),
                Step::BatchNorm { gamma, beta } => t.batch_norm_train(h, vars[*gamma], vars[*beta], 1e-5).unwrap().0,
                Step::Concat(o) => t.concat(&[h, vars[*o]]).unwrap(),
                Step::MaxGroups(g) => t.max_groups(h, *g).unwrap(),
                Step::SumGroups(g) => t.sum_groups(h, *g).unwrap(),
                Step::Gather(idx) => t.gather_rows(h, idx).unwrap(),
                Step::Normalize => t.row_normalize(h, 1e-12).unwrap(),
                Step::Transform3 { w, mats } => {
                    let p = t.linear(h, vars[*w], None).unwrap();
                    t.row_transform3(p, mats.clone()).unwrap()
                }
                Step::RowDot(o) => {
                    let d = t.row_dot(h, vars[*o]).unwrap();
                    t.concat(&[h, d]).unwrap()
                }
                Step::Dropout(seed) => t.dropout(h, 0.3, &mut ChaCha8Rng::seed_from_u64(*seed)).unwrap(),
            };
        }
        let loss = match &self.head {
            Head::Xent(labels) => t.softmax_cross_entropy(h, labels).unwrap(),
            Head::Weighted(c) => {
                let c = t.constant(c.clone());
                let m = t.mul(h, c).unwrap();
                let lin = t.sum(m);
                let sq = t.sum_squares(h);
                let sq = t.scale(sq, 0.1);
                t.add(lin, sq).unwrap()
            }
        };
        (t, loss, vars)
    }

    pub fn num_scalars(&self) -> usize {
        self.leaves.iter().map(Tensor::numel).sum()
    }

    /// Compares every leaf entry.
    #[allow(clippy::needless_range_loop)]
    pub fn check(&self) -> CheckReport {
        let (t, loss, vars) = self.run(&self.leaves);
        let grads = t.backward(loss).unwrap();
        let mut report = CheckReport::default();
        for (li, leaf) in self.leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[li])
                .map(|g| g.data().to_vec())
                .unwrap_or(vec![0.0; leaf.numel()]);
            for k in 0..leaf.numel() {
                let eval = |delta: f64| {
                    let mut leaves = self.leaves.clone();
                    leaves[li].data_mut()[k] += delta;
                    let (t, loss, _) = self.run(&leaves);
                    t.value(loss).item()
                };
                report.record(analytic[k], central_difference(eval));
            }
        }
        report
    }
}

/// Micro classification model on 64-point clouds with 16 local patches.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_local: 16,
        k_local: 8,
        n_global: 8,
        k_intra: 4,
        ..ModelConfig::classification(4)
    }
}

/// Gradient check of the full training loss of a micro model against
/// central differences. Every trainable block is probed at `per_block`
/// random entries. Orientation frames are constants of the graph, so the
/// perturbed passes reuse the frames of the unperturbed pass.
pub fn micro_model_check(seed: u64, per_block: usize) -> CheckReport {
    let cfg = micro_config();
    let data = gen_classification_set(1, 64, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch: Vec<PreparedCloud> = data
        .samples
        .iter()
        .map(|c| prepare_cloud(c, &cfg, &mut rng).unwrap())
        .collect();
    let labels: Vec<usize> = batch.iter().map(|c| c.class_id.unwrap()).collect();
    let (model, store) = init_model(&cfg, seed);
    let mut store: ParamStore<f64> = store.cast();
    let weights = LossWeights::default();
    type Frames = (Vec<OrientationFrame>, Vec<OrientationFrame>);
    let run = |store: &mut ParamStore<f64>, frames: Option<&Frames>, grads: bool| {
        let mut s = Session::new(store, Mode::Train, ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
        let fixed = frames.map(|(l, g)| (l.as_slice(), g.as_slice()));
        let out = model
            .forward_with_frames(&mut s, &batch, PatchRotation::Random { siamese: true }, fixed)
            .unwrap();
        let task = s.tape.softmax_cross_entropy(out.logits, &labels).unwrap();
        let (l, g) = model.aux_losses(&mut s, &out, &weights).unwrap();
        let loss = total_loss(&mut s.tape, task, &l, &g, &weights).unwrap();
        let value = s.tape.value(loss).item();
        let frames: Frames = (
            out.local.as_ref().unwrap().frames.clone(),
            out.global.as_ref().map_or(Vec::new(), |g| g.frames.clone()),
        );
        let grads = grads.then(|| {
            let g = s.tape.backward(loss).unwrap();
            s.store
                .trainable_ids()
                .into_iter()
                .map(|id| g.param(id).map(|t| t.data().to_vec()))
                .collect::<Vec<_>>()
        });
        (value, frames, grads)
    };
    let (_, frames, grads) = run(&mut store, None, true);
    let grads = grads.unwrap();
    let ids = store.trainable_ids();
    let mut pick = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut report = CheckReport::default();
    for (id, g) in ids.iter().zip(&grads) {
        let n = store.get(*id).numel();
        for _ in 0..per_block.min(n) {
            let k = pick.random_range(0..n);
            let base = store.get(*id).data()[k];
            let numeric = central_difference(|delta| {
                store.get_mut(*id).data_mut()[k] = base + delta;
                let v = run(&mut store, Some(&frames), false).0;
                store.get_mut(*id).data_mut()[k] = base;
                v
            });
            report.record(g.as_ref().map_or(0.0, |g| g[k]), numeric);
        }
    }
    report
}

/// Brute-force nearest neighbours: full sort by (distance, index).
pub fn brute_knn(points: &[Vec3], queries: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let mut order: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| ((p - q).norm_squared(), i))
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.into_iter().take(k).map(|(_, i)| i).collect()
        })
        .collect()
}

/// Brute-force farthest point sampling from a fixed start: each step scans
/// every candidate's distance to every chosen point.
pub fn brute_fps(points: &[Vec3], m: usize, start: usize) -> Vec<usize> {
    let mut chosen = vec![start];
    while chosen.len() < m {
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = chosen
                .iter()
                .map(|&c| (p - points[c]).norm_squared())
                .fold(f64::INFINITY, f64::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        chosen.push(best.1);
    }
    chosen
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    (0..n)
        .map(|_| {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect()
}

/// Brute-force ball query: all members strictly inside the radius in index
/// order, truncated and padded with the first member; an empty ball takes
/// the nearest point by full sort.
pub fn brute_ball(points: &[Vec3], queries: &[Vec3], radius: f64, k_max: usize) -> Vec<Vec<usize>> {
    queries
        .iter()
        .map(|q| {
            let inside: Vec<usize> = (0..points.len()).filter(|&i| (points[i] - q).norm() < radius).collect();
            let mut out: Vec<usize> = if inside.is_empty() {
                brute_knn(points, std::slice::from_ref(q), 1).remove(0)
            } else {
                inside.into_iter().take(k_max).collect()
            };
            let first = out[0];
            out.resize(k_max, first);
            out
        })
        .collect()
}

/// Counts instances where fps, knn or ball query differ from brute force.
pub fn kernel_mismatches(instances: usize, seed: u64) -> usize {
    use parot::geom::{ball_query, fps_from, knn};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(8..=256);
        let mut points = random_points(&mut rng, n);
        // Duplicate a few points so tie-breaking is exercised.
        for _ in 0..rng.random_range(0..4) {
            let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
            points[a] = points[b];
        }
        let m = rng.random_range(1..=n.min(64));
        let start = rng.random_range(0..n);
        let k = rng.random_range(1..=n.min(32));
        let radius = rng.random_range(0.05..0.8);
        let queries: Vec<Vec3> = (0..m).map(|_| points[rng.random_range(0..n)]).collect();
        let ok = fps_from(&points, m, start).unwrap() == brute_fps(&points, m, start)
            && knn(&queries, &points, k).unwrap() == brute_knn(&points, &queries, k)
            && ball_query(&queries, &points, radius, k).unwrap().indices == brute_ball(&points, &queries, radius, k);
        bad += usize::from(!ok);
    }
    bad
}
