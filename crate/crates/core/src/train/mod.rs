//! Loss assembly, the training loop (Adam, cosine-annealed learning rate),
//! evaluation under a rotation protocol, and the CSV metric log.

pub mod invariance;
pub mod metrics;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, Dataset, Protocol, Task};
use crate::disentangle::AuxLosses;
use crate::error::{Error, Result};
use crate::geom::{Patch, Rotate, Rotation};
use crate::model::{prepare_cloud, ModelConfig, ParotModel, PatchRotation, PreparedCloud};
use crate::numkernel::{checkpoint, AdamConfig, AdamState, Mode, ParamStore, Real, Session, Tape, Var};

pub use invariance::{oracle_model, oracle_residual, OracleResidual};
pub use metrics::{accuracy, miou, per_class_accuracy, shape_iou, Metrics};

pub const CSV_HEADER: &str = "epoch,split,protocol,loss,accuracy,imiou,cmiou,inv_gap";

/// Weights of the auxiliary disentanglement losses per scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub equi_local: f64,
    pub equi_global: f64,
    pub inv_local: f64,
    pub inv_global: f64,
    pub orth_local: f64,
    pub orth_global: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            equi_local: 0.2,
            equi_global: 0.1,
            inv_local: 0.0,
            inv_global: 0.0,
            orth_local: 1.0,
            orth_global: 1.0,
        }
    }
}

impl LossWeights {
    /// Whether any term needs the second siamese branch.
    pub fn needs_pair(&self) -> bool {
        [self.equi_local, self.equi_global, self.inv_local, self.inv_global]
            .iter()
            .any(|&w| w != 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub protocol: Protocol,
    pub seed: u64,
    /// Random isotropic scaling of training clouds.
    pub augment: bool,
    /// Evaluate on the test split every this many epochs (0: only after the
    /// last epoch).
    pub eval_every: usize,
    /// Test clouds used for the per-epoch feature-invariance column.
    pub inv_gap_samples: usize,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            epochs: 250,
            batch_size: 32,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weight_decay: 1e-6,
            weights: LossWeights::default(),
            protocol: Protocol::ZSo3,
            seed: 0,
            augment: true,
            eval_every: 1,
            inv_gap_samples: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let weights = [
            w.equi_local,
            w.equi_global,
            w.inv_local,
            w.inv_global,
            w.orth_local,
            w.orth_global,
        ];
        if weights.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_end + (lr_start - lr_end) (1 + cos(π step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_start: f64, lr_end: f64) -> f64 {
    let t = if total_steps == 0 {
        1.0
    } else {
        step.min(total_steps) as f64 / total_steps as f64
    };
    lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Task loss plus the weighted auxiliary terms of both scales; zero weights
/// leave their term out entirely.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    task: Var,
    local: &AuxLosses,
    global: &AuxLosses,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = task;
    let terms = [
        (local.equi, w.equi_local),
        (local.orth, w.orth_local),
        (local.inv, w.inv_local),
        (global.equi, w.equi_global),
        (global.orth, w.orth_global),
        (global.inv, w.inv_global),
    ];
    for (term, weight) in terms {
        if let (Some(v), true) = (term, weight != 0.0) {
            let scaled = tape.scale(v, weight);
            total = tape.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_BATCH: u64 = 3;
const TAG_SESSION: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_PROBE: u64 = 6;

fn task_labels(batch: &[PreparedCloud], task: Task) -> Result<Vec<usize>> {
    match task {
        Task::Classification => batch
            .iter()
            .map(|c| {
                c.class_id
                    .ok_or_else(|| Error::invalid("classification sample without class id"))
            })
            .collect(),
        Task::Segmentation => {
            let mut out = Vec::new();
            for c in batch {
                out.extend(
                    c.labels
                        .as_ref()
                        .ok_or_else(|| Error::invalid("segmentation sample without labels"))?,
                );
            }
            Ok(out)
        }
    }
}

fn row_argmax<T: Real>(tape: &Tape<T>, logits: Var) -> Vec<usize> {
    let v = tape.value(logits);
    let (_, c) = v.dims2();
    v.data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test: Option<Metrics>,
    /// Fraction of degenerate frames during the epoch.
    pub degenerate_rate: f64,
}

pub struct TrainOutcome {
    pub model: ParotModel,
    /// Parameters after the last epoch.
    pub store: ParamStore<f32>,
    /// Parameters of the best evaluated epoch.
    pub best_store: ParamStore<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub csv: String,
}

impl TrainOutcome {
    pub fn final_metrics(&self) -> Option<&Metrics> {
        self.history.last().and_then(|r| r.test.as_ref())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

#[allow(clippy::too_many_arguments)]
fn csv_row(
    epoch: usize,
    split: &str,
    protocol: Protocol,
    loss: f64,
    acc: f64,
    imiou: Option<f64>,
    cmiou: Option<f64>,
    gap: Option<f64>,
) -> String {
    format!(
        "{epoch},{split},{},{loss:.6},{acc:.6},{},{},{}\n",
        protocol.flag(),
        fmt_opt(imiou),
        fmt_opt(cmiou),
        fmt_opt(gap)
    )
}

/// Builds the model from the configuration and a seeded initializer.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> (ParotModel, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_INIT, 0));
    let model = ParotModel::new(&mut store, cfg, &mut rng);
    (model, store)
}

/// Trains on `train`, evaluating on `test` under the configured protocol.
/// With `out_dir`, writes `log.csv`, `last.ckpt` and `best.ckpt`.
pub fn train(
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    cfg.model.validate(train_set.points_per_sample())?;
    let (model, mut store) = init_model(&cfg.model, cfg.seed);
    let mut adam = AdamState::new(
        &store,
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
    );
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let policy = PatchRotation::Random {
        siamese: cfg.weights.needs_pair(),
    };
    let mut csv = format!("{CSV_HEADER}\n");
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            TAG_SHUFFLE,
            epoch as u64,
        )));
        let (mut loss_sum, mut hits, mut seen, mut degenerate, mut frames) = (0.0, 0usize, 0usize, 0usize, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_BATCH, step as u64));
            let batch = chunk
                .iter()
                .map(|&i| {
                    let rotated = train_set.samples[i].rotated(&cfg.protocol.train_rotation(&mut rng));
                    let cloud = if cfg.augment {
                        augment(&rotated, &mut rng).0
                    } else {
                        rotated
                    };
                    prepare_cloud(&cloud, &cfg.model, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels = task_labels(&batch, cfg.model.task)?;
            let session_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_SESSION, step as u64));
            let mut s = Session::new(&mut store, Mode::Train, session_rng);
            let out = model.forward(&mut s, &batch, policy)?;
            let task_loss = s.tape.softmax_cross_entropy(out.logits, &labels)?;
            let (local, global) = model.aux_losses(&mut s, &out, &cfg.weights)?;
            let loss = total_loss(&mut s.tape, task_loss, &local, &global, &cfg.weights)?;
            let loss_value = s.tape.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: b + 1 });
            }
            let pred = row_argmax(&s.tape, out.logits);
            hits += pred.iter().zip(&labels).filter(|(p, t)| p == t).count();
            seen += labels.len();
            loss_sum += loss_value * chunk.len() as f64;
            degenerate += out.degenerate;
            frames += out.frames;
            let grads = s.tape.backward(loss)?;
            drop(s);
            adam.step(
                &mut store,
                &grads,
                cosine_lr(step, total_steps, cfg.lr_start, cfg.lr_end),
            )?;
            step += 1;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let train_accuracy = hits as f64 / seen.max(1) as f64;
        let degenerate_rate = degenerate as f64 / frames.max(1) as f64;
        csv.push_str(&csv_row(
            epoch,
            "train",
            cfg.protocol,
            train_loss,
            train_accuracy,
            None,
            None,
            None,
        ));

        let due = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let test = if due && !test_set.is_empty() {
            let mut m = evaluate(&model, &mut store, test_set, cfg.protocol, cfg.seed, cfg.batch_size)?;
            if cfg.inv_gap_samples > 0 {
                let probe = feature_invariance(&model, &mut store, test_set, cfg.inv_gap_samples, cfg.seed)?;
                m.inv_gap = Some(1.0 - probe.mean_cosine);
            }
            csv.push_str(&csv_row(
                epoch,
                "test",
                cfg.protocol,
                m.loss,
                m.accuracy,
                m.instance_miou,
                m.class_miou,
                m.inv_gap,
            ));
            if best.as_ref().is_none_or(|(score, _, _)| m.score() > *score) {
                best = Some((m.score(), epoch, store.clone()));
                if let Some(dir) = out_dir {
                    checkpoint::save(&store, &dir.join("best.ckpt"))?;
                }
            }
            Some(m)
        } else {
            None
        };
        log::info!(
            "epoch {epoch}/{}: loss {train_loss:.4} train acc {train_accuracy:.4}{}",
            cfg.epochs,
            test.as_ref()
                .map_or(String::new(), |m| format!(" test acc {:.4}", m.accuracy))
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            test,
            degenerate_rate,
        });
        if let Some(dir) = out_dir {
            fs::write(dir.join("log.csv"), &csv)?;
        }
    }
    if let Some(dir) = out_dir {
        checkpoint::save(&store, &dir.join("last.ckpt"))?;
    }
    let (best_epoch, best_store) = match best {
        Some((_, e, s)) => (e, s),
        None => (cfg.epochs, store.clone()),
    };
    Ok(TrainOutcome {
        model,
        store,
        best_store,
        best_epoch,
        history,
        csv,
    })
}

/// Test-time pipeline: one protocol rotation per sample, identity patch
/// rotations, batch-norm running statistics. Deterministic given `seed`
/// and never modifies `store`.
pub fn evaluate<T: Real>(
    model: &ParotModel,
    store: &mut ParamStore<T>,
    data: &Dataset,
    protocol: Protocol,
    seed: u64,
    batch_size: usize,
) -> Result<Metrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_EVAL, 0));
    let task = model.cfg.task;
    let (mut loss_sum, mut preds, mut truth) = (0.0, Vec::new(), Vec::new());
    let mut shapes = Vec::new();
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let batch = chunk
            .iter()
            .map(|c| prepare_cloud(&c.rotated(&protocol.test_rotation(&mut rng)), &model.cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let labels = task_labels(&batch, task)?;
        let mut s = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let out = model.forward(&mut s, &batch, PatchRotation::None)?;
        let loss = s.tape.softmax_cross_entropy(out.logits, &labels)?;
        loss_sum += s.tape.value(loss).item().as_f64() * chunk.len() as f64;
        let pred = row_argmax(&s.tape, out.logits);
        if task == Task::Segmentation {
            let n = data.points_per_sample();
            for (i, c) in batch.iter().enumerate() {
                let range = i * n..(i + 1) * n;
                let cat = c.class_id.unwrap_or(0);
                shapes.push((
                    cat,
                    shape_iou(&pred[range.clone()], &labels[range], model.cfg.num_parts),
                ));
            }
        }
        preds.extend(pred);
        truth.extend(labels);
    }
    let mut m = Metrics {
        loss: loss_sum / data.len().max(1) as f64,
        accuracy: accuracy(&preds, &truth),
        ..Metrics::default()
    };
    match task {
        Task::Classification => m.per_class = per_class_accuracy(&preds, &truth, model.cfg.num_classes),
        Task::Segmentation => {
            let (inst, class, per) = miou(&shapes, model.cfg.num_classes);
            m.instance_miou = Some(inst);
            m.class_miou = Some(class);
            m.per_class = per;
        }
    }
    Ok(m)
}

/// Learned-feature invariance over the local patches of the first `count`
/// samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureInvariance {
    /// Mean cosine similarity of content features of a patch and of its
    /// copy under an independent random rotation.
    pub mean_cosine: f64,
    /// Mean `|d1 · d2|` of the normalized frame directions.
    pub mean_abs_dot: f64,
    pub patches: usize,
}

pub fn feature_invariance<T: Real>(
    model: &ParotModel,
    store: &mut ParamStore<T>,
    data: &Dataset,
    count: usize,
    seed: u64,
) -> Result<FeatureInvariance> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_PROBE, 0));
    let (mut cos_sum, mut dot_sum, mut n) = (0.0, 0.0, 0usize);
    for cloud in data.samples.iter().take(count) {
        let prepared = prepare_cloud(cloud, &model.cfg, &mut rng)?;
        let patches = prepared.local;
        let turned: Vec<Patch> = patches
            .iter()
            .map(|p| p.rotated(&Rotation::random_so3(&mut rng)))
            .collect();
        let mut s = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
        let enc = model.local_disentangler();
        let a = enc.siamese_forward(&mut s, &patches, crate::disentangle::BranchRotations::Identity)?;
        let b = enc.encode_patches(&mut s, &turned)?;
        let (fa, fb) = (s.tape.value(a.content()), s.tape.value(b.content));
        let width = fa.dims2().1;
        for (ra, rb) in fa.data().chunks_exact(width).zip(fb.data().chunks_exact(width)) {
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
            let na = ra.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            cos_sum += if na * nb > 0.0 { dot / (na * nb) } else { 1.0 };
        }
        for f in &a.frames {
            dot_sum += f.d1().dot(f.d2()).abs();
        }
        n += patches.len();
    }
    Ok(FeatureInvariance {
        mean_cosine: cos_sum / n.max(1) as f64,
        mean_abs_dot: dot_sum / n.max(1) as f64,
        patches: n,
    })
}

/// Writes `text` to `dir/name`, returning the path.
pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, text)?;
    Ok(path)
}

/// Renders a metric table for terminal output.
pub fn format_metrics(m: &Metrics, protocol: Protocol, class_names: &[String]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "protocol      {}", protocol.name());
    let _ = writeln!(out, "loss          {:.6}", m.loss);
    let _ = writeln!(out, "accuracy      {:.4}", m.accuracy);
    if let Some(v) = m.instance_miou {
        let _ = writeln!(out, "instance mIoU {v:.4}");
    }
    if let Some(v) = m.class_miou {
        let _ = writeln!(out, "class mIoU    {v:.4}");
    }
    for (name, v) in class_names.iter().zip(&m.per_class) {
        let _ = writeln!(out, "  {name:<20} {v:.4}");
    }
    if let Some(v) = m.inv_gap {
        let _ = writeln!(out, "inv_gap       {v:.6}");
    }
    out
}
