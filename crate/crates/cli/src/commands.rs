//! Command implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use parot::data::{export_colored_ply, gen_split_pair, load_dataset, save_dataset, Dataset, Protocol, Task};
use parot::geom::{knn, Patch, PatchScale, PointCloud, Rotate, Rotation};
use parot::model::{ModelConfig, ParotModel};
use parot::numkernel::{checkpoint, Mode, ParamStore, Session};
use parot::train::{
    evaluate, feature_invariance, format_metrics, init_model, oracle_model, oracle_residual, train, write_text,
    Metrics, CSV_HEADER,
};

use crate::config::{Config, ConfigError};
use crate::CommandKind;

/// Residual above which the oracle-conditioned sweep fails.
const ORACLE_TOLERANCE: f64 = 1e-9;

pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.0)
    }
}

impl From<parot::Error> for Failure {
    fn from(e: parot::Error) -> Self {
        match e {
            parot::Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

pub fn run(kind: CommandKind, cfg: &Config) -> Result<()> {
    match kind {
        CommandKind::GenData => gen_data(cfg),
        CommandKind::TrainCls | CommandKind::TrainSeg => train_cmd(cfg),
        CommandKind::Eval => eval_cmd(cfg),
        CommandKind::CheckInvariance => check_invariance(cfg),
        CommandKind::ExportFeatures => export_features(cfg),
    }
}

fn out_dir(cfg: &Config) -> Result<PathBuf> {
    Ok(cfg.require_path("out")?)
}

fn generated(cfg: &Config) -> Result<(Dataset, Dataset)> {
    Ok(gen_split_pair(
        cfg.task()?,
        cfg.uint("train_count")?,
        cfg.uint("test_count")?,
        cfg.uint("points")?,
        cfg.u64("seed")?,
    )?)
}

/// Training and test splits from directories when configured, generated
/// from the seed otherwise.
fn datasets(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let (train_dir, test_dir) = (cfg.path("train_data"), cfg.path("test_data"));
    if train_dir.is_some() && test_dir.is_some() {
        return Ok((load(train_dir.as_deref())?, load(test_dir.as_deref())?));
    }
    let (train_set, test_set) = generated(cfg)?;
    Ok((
        train_dir.map_or(Ok(train_set), |d| load(Some(&d)))?,
        test_dir.map_or(Ok(test_set), |d| load(Some(&d)))?,
    ))
}

fn load(dir: Option<&Path>) -> Result<Dataset> {
    let dir = dir.expect("caller passes a directory");
    load_dataset(dir).map_err(|e| Failure::Runtime(format!("loading dataset {}: {e}", dir.display())))
}

fn test_set(cfg: &Config) -> Result<Dataset> {
    match cfg.path("test_data") {
        Some(dir) => load(Some(&dir)),
        None => Ok(generated(cfg)?.1),
    }
}

fn check_task(cfg: &Config, data: &Dataset) -> Result<()> {
    if data.task != cfg.task()? {
        return Err(Failure::Usage(format!(
            "dataset holds {} samples but the configured task is {}",
            data.task.name(),
            cfg.task()?.name()
        )));
    }
    Ok(())
}

fn model_config(cfg: &Config, data: &Dataset) -> Result<ModelConfig> {
    check_task(cfg, data)?;
    let mut m = cfg.model_config()?;
    m.num_classes = data.num_classes();
    if m.task == Task::Segmentation {
        m.num_parts = data.num_parts;
    }
    Ok(m)
}

fn load_model(cfg: &Config, data: &Dataset) -> Result<(ParotModel, ParamStore<f32>)> {
    let path = cfg
        .path("checkpoint")
        .ok_or_else(|| Failure::Usage("--checkpoint is required".into()))?;
    let (model, mut store) = init_model(&model_config(cfg, data)?, cfg.u64("seed")?);
    checkpoint::load_into(&mut store, &path)
        .map_err(|e| Failure::Runtime(format!("loading checkpoint {}: {e}", path.display())))?;
    Ok((model, store))
}

fn gen_data(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let (train_set, test_set) = generated(cfg)?;
    save_dataset(&train_set, &out.join("train"))?;
    save_dataset(&test_set, &out.join("test"))?;
    write_text(&out, "config.txt", &cfg.render())?;
    println!(
        "wrote {} training and {} test samples to {}",
        train_set.len(),
        test_set.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let (train_set, test_set) = datasets(cfg)?;
    check_task(cfg, &test_set)?;
    let mut tc = cfg.train_config()?;
    tc.model = model_config(cfg, &train_set)?;
    write_text(&out, "config.txt", &cfg.render())?;
    let outcome = train(&train_set, &test_set, &tc, Some(&out))?;
    if let Some(m) = outcome.final_metrics() {
        print!("{}", format_metrics(m, tc.protocol, &test_set.class_names));
    }
    println!(
        "best epoch {} of {}; wrote {}",
        outcome.best_epoch,
        tc.epochs,
        out.display()
    );
    Ok(())
}

fn csv_line(protocol: Protocol, m: &Metrics) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
    format!(
        "0,test,{},{:.6},{:.6},{},{},{}\n",
        protocol.flag(),
        m.loss,
        m.accuracy,
        opt(m.instance_miou),
        opt(m.class_miou),
        opt(m.inv_gap)
    )
}

fn eval_cmd(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let data = test_set(cfg)?;
    let (model, mut store) = load_model(cfg, &data)?;
    let protocol = cfg.protocol()?;
    let seed = cfg.u64("seed")?;
    let mut m = evaluate(&model, &mut store, &data, protocol, seed, cfg.uint("batch_size")?)?;
    let samples = cfg.uint("inv_gap_samples")?;
    if samples > 0 {
        m.inv_gap = Some(1.0 - feature_invariance(&model, &mut store, &data, samples, seed)?.mean_cosine);
    }
    print!("{}", format_metrics(&m, protocol, &data.class_names));
    let path = write_text(&out, "eval.csv", &format!("{CSV_HEADER}\n{}", csv_line(protocol, &m)))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn check_invariance(cfg: &Config) -> Result<()> {
    let seed = cfg.u64("seed")?;
    let count = cfg.uint("check_clouds")?;
    let task = cfg.task()?;
    let per = match task {
        Task::Classification => count.div_ceil(parot::data::CLASS_NAMES.len()),
        Task::Segmentation => count,
    };
    let clouds: Vec<PointCloud> = gen_split_pair(task, 1, per, cfg.uint("points")?, seed)?
        .1
        .samples
        .into_iter()
        .take(count)
        .collect();
    let mcfg = cfg.model_config()?;
    let (model, mut store) = oracle_model(&mcfg, seed);
    let rotations = cfg.uint("check_rotations")?;
    let r = oracle_residual(&model, &mut store, &clouds, rotations, seed)?;
    let mut report = String::new();
    let _ = writeln!(
        report,
        "oracle-conditioned invariance: {} clouds x {} rotations, max residual {:.3e} (tolerance {ORACLE_TOLERANCE:.0e})",
        r.clouds, r.rotations, r.max_abs
    );
    if cfg.path("checkpoint").is_some() {
        let data = test_set(cfg)?;
        let (model, mut store) = load_model(cfg, &data)?;
        let batch = cfg.uint("batch_size")?;
        let mut accs = Vec::new();
        for p in [Protocol::Zz, Protocol::ZSo3, Protocol::So3So3] {
            let m = evaluate(&model, &mut store, &data, p, seed, batch)?;
            let _ = writeln!(
                report,
                "test rotations of {:<7} accuracy {:.4}{}",
                p.name(),
                m.accuracy,
                m.instance_miou
                    .map_or(String::new(), |v| format!(" instance mIoU {v:.4}"))
            );
            accs.push(m.score());
        }
        let _ = writeln!(
            report,
            "gap z/SO3 vs SO3/SO3 test rotations: {:.4}",
            (accs[1] - accs[2]).abs()
        );
        let fi = feature_invariance(&model, &mut store, &data, cfg.uint("inv_gap_samples")?.max(1), seed)?;
        let _ = writeln!(
            report,
            "content cosine under rotation {:.4} over {} patches; mean |d1.d2| {:.4}",
            fi.mean_cosine, fi.patches, fi.mean_abs_dot
        );
    }
    print!("{report}");
    if let Ok(out) = out_dir(cfg) {
        write_text(&out, "invariance.txt", &report)?;
    }
    if r.max_abs >= ORACLE_TOLERANCE || !r.max_abs.is_finite() {
        return Err(Failure::Runtime(format!(
            "oracle invariance residual {:.3e} exceeds tolerance",
            r.max_abs
        )));
    }
    Ok(())
}

/// Content features of the `k`-point patch around every point.
fn point_features(
    model: &ParotModel,
    store: &mut ParamStore<f32>,
    cloud: &PointCloud,
    k: usize,
) -> Result<Vec<Vec<f64>>> {
    let members = knn(&cloud.points, &cloud.points, k)?;
    let patches: Vec<Patch> = cloud
        .points
        .iter()
        .zip(members)
        .map(|(p, idx)| Patch {
            local_points: idx.iter().map(|&j| cloud.points[j] - p).collect(),
            reference_point: *p,
            anchor: *p,
            scale: PatchScale::Local,
        })
        .collect();
    let mut s = Session::new(store, Mode::Eval, ChaCha8Rng::seed_from_u64(0));
    let enc = model.local_disentangler().encode_patches(&mut s, &patches)?;
    let t = s.tape.value(enc.content);
    let width = t.dims2().1;
    Ok(t.data()
        .chunks_exact(width)
        .map(|row| row.iter().map(|&v| f64::from(v)).collect())
        .collect())
}

fn export_features(cfg: &Config) -> Result<()> {
    let out = out_dir(cfg)?;
    let data = test_set(cfg)?;
    let (model, mut store) = load_model(cfg, &data)?;
    let channels = cfg.channels()?;
    let k = model.cfg.k_local.min(data.points_per_sample());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.u64("seed")?);
    for (i, cloud) in data.samples.iter().take(cfg.uint("export_count")?).enumerate() {
        let turned = cloud.rotated(&Rotation::random_so3(&mut rng));
        let fa = point_features(&model, &mut store, cloud, k)?;
        let fb = point_features(&model, &mut store, &turned, k)?;
        // Shared per-channel range so both copies use one colour scale.
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for row in fa.iter().chain(&fb) {
            for (c, &ch) in channels.iter().enumerate() {
                lo[c] = lo[c].min(row[ch]);
                hi[c] = hi[c].max(row[ch]);
            }
        }
        let colour = |rows: &[Vec<f64>]| -> Vec<[f64; 3]> {
            rows.iter()
                .map(|row| {
                    let mut rgb = [0.0; 3];
                    for (c, &ch) in channels.iter().enumerate() {
                        let span = hi[c] - lo[c];
                        rgb[c] = if span > 0.0 { (row[ch] - lo[c]) / span } else { 0.5 };
                    }
                    rgb
                })
                .collect()
        };
        export_colored_ply(cloud, &colour(&fa), &out.join(format!("sample_{i:03}.ply")))?;
        export_colored_ply(&turned, &colour(&fb), &out.join(format!("sample_{i:03}_rotated.ply")))?;
    }
    println!("wrote feature PLY files to {}", out.display());
    Ok(())
}
