//! Plain-text `key = value` configuration with a typed key registry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use parot::data::{Protocol, Task};
use parot::geom::NeighborSearch;
use parot::hierarchy::RelationMode;
use parot::model::ModelConfig;
use parot::seghead::PropagationMode;
use parot::train::{LossWeights, TrainConfig};

#[derive(Clone, Copy, Debug)]
enum Kind {
    Uint { min: u64 },
    Real { min: f64, exclusive: bool },
    Bool,
    Choice(&'static [&'static str]),
    Path,
    Channels,
}

struct Key {
    name: &'static str,
    kind: Kind,
    help: &'static str,
}

const fn key(name: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, kind, help }
}

const NONNEG: Kind = Kind::Real {
    min: 0.0,
    exclusive: false,
};
const POSITIVE: Kind = Kind::Real {
    min: 0.0,
    exclusive: true,
};
const COUNT: Kind = Kind::Uint { min: 1 };

static REGISTRY: &[Key] = &[
    key(
        "task",
        Kind::Choice(&["cls", "seg"]),
        "classification or part segmentation",
    ),
    key(
        "seed",
        Kind::Uint { min: 0 },
        "seed for data, initialization and sampling",
    ),
    key("out", Kind::Path, "output directory"),
    key(
        "protocol",
        Kind::Choice(&["zz", "zso3", "so3so3"]),
        "train/test rotation protocol",
    ),
    key(
        "relation_mode",
        Kind::Choice(&["full", "orientation", "position", "none"]),
        "geometric relation slice",
    ),
    key(
        "neighbor_search",
        Kind::Choice(&["knn", "ball"]),
        "local patch grouping",
    ),
    key("radius", POSITIVE, "ball query radius"),
    key("n_local", COUNT, "local patches per cloud"),
    key("k_local", COUNT, "points per local patch"),
    key("n_global", COUNT, "points in the global downsample"),
    key("k_intra", COUNT, "neighbours in the intra-scale graph"),
    key("k_prop", COUNT, "references per point in propagation"),
    key("k_dense", COUNT, "points per per-point patch in segmentation"),
    key("intra", Kind::Bool, "enable intra-scale aggregation"),
    key("inter", Kind::Bool, "enable the global branch and inter-scale fusion"),
    key(
        "propagation",
        Kind::Choice(&["pose_aware", "interpolation"]),
        "segmentation feature propagation",
    ),
    key("epochs", COUNT, "training epochs"),
    key("batch_size", COUNT, "clouds per step"),
    key("lr_start", POSITIVE, "initial learning rate"),
    key("lr_end", NONNEG, "final learning rate"),
    key("weight_decay", NONNEG, "Adam weight decay"),
    key("alpha_local", NONNEG, "local equivariance loss weight"),
    key("alpha_global", NONNEG, "global equivariance loss weight"),
    key("beta_local", NONNEG, "local invariance loss weight"),
    key("beta_global", NONNEG, "global invariance loss weight"),
    key("orth_local", NONNEG, "local orthogonality loss weight"),
    key("orth_global", NONNEG, "global orthogonality loss weight"),
    key("augment", Kind::Bool, "random scaling and jitter during training"),
    key(
        "eval_every",
        Kind::Uint { min: 0 },
        "evaluate every n epochs, 0 for last only",
    ),
    key(
        "inv_gap_samples",
        Kind::Uint { min: 0 },
        "test clouds in the per-evaluation invariance probe",
    ),
    key("points", Kind::Uint { min: 64 }, "points per generated cloud"),
    key("train_count", COUNT, "generated training clouds (per class for cls)"),
    key("test_count", COUNT, "generated test clouds (per class for cls)"),
    key("train_data", Kind::Path, "training dataset directory"),
    key("test_data", Kind::Path, "evaluation dataset directory"),
    key("checkpoint", Kind::Path, "model checkpoint"),
    key(
        "channels",
        Kind::Channels,
        "three content channels to export as colours",
    ),
    key("export_count", COUNT, "clouds to export"),
    key("check_clouds", COUNT, "clouds in the oracle invariance sweep"),
    key("check_rotations", COUNT, "rotations per cloud in the oracle sweep"),
];

/// Invalid key, value or file.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

type Result<T> = std::result::Result<T, ConfigError>;

fn lookup(name: &str) -> Option<&'static Key> {
    REGISTRY.iter().find(|k| k.name == name)
}

fn check(k: &Key, value: &str) -> Result<()> {
    let bad = |why: &str| Err(ConfigError(format!("{} = {value:?}: {why}", k.name)));
    match k.kind {
        Kind::Uint { min } => match value.parse::<u64>() {
            Ok(v) if v >= min => Ok(()),
            Ok(_) => bad(&format!("must be at least {min}")),
            Err(_) => bad("expected a non-negative integer"),
        },
        Kind::Real { min, exclusive } => match value.parse::<f64>() {
            Ok(v) if v.is_finite() && (v > min || (!exclusive && v == min)) => Ok(()),
            Ok(_) => bad(if exclusive {
                "must be positive"
            } else {
                "must be non-negative"
            }),
            Err(_) => bad("expected a number"),
        },
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => bad("expected true or false"),
        },
        Kind::Choice(options) => {
            if options.contains(&value) {
                Ok(())
            } else {
                bad(&format!("expected one of {}", options.join(", ")))
            }
        }
        Kind::Path => {
            if value.is_empty() {
                bad("empty path")
            } else {
                Ok(())
            }
        }
        Kind::Channels => {
            let parts: Vec<_> = value.split(',').map(|p| p.trim().parse::<usize>()).collect();
            if parts.len() == 3
                && parts
                    .iter()
                    .all(|p| matches!(p, Ok(c) if *c < parot::disentangle::CONTENT_WIDTH))
            {
                Ok(())
            } else {
                bad(&format!(
                    "expected three channel indices below {}",
                    parot::disentangle::CONTENT_WIDTH
                ))
            }
        }
    }
}

/// Validated key/value settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Sets a registered key after validating its value.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let k = lookup(name).ok_or_else(|| ConfigError(format!("unknown key {name:?}")))?;
        let value = value.trim();
        check(k, value)?;
        self.values.insert(name.to_string(), value.to_string());
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{}:{}: expected key = value", origin.display(), i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| ConfigError(format!("{}:{}: {e}", origin.display(), i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Keys of `other` override keys of `self`.
    pub fn overlay(&mut self, other: &Config) {
        for (k, v) in &other.values {
            self.values.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| ConfigError(format!("missing required key {name:?}")))
    }

    fn parsed<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        self.require(name)?
            .parse()
            .map_err(|_| ConfigError(format!("{name}: unparsable value")))
    }

    pub fn uint(&self, name: &str) -> Result<usize> {
        self.parsed(name)
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        self.parsed(name)
    }

    pub fn real(&self, name: &str) -> Result<f64> {
        self.parsed(name)
    }

    pub fn flag(&self, name: &str) -> Result<bool> {
        self.parsed(name)
    }

    pub fn path(&self, name: &str) -> Option<PathBuf> {
        self.get(name).map(PathBuf::from)
    }

    pub fn require_path(&self, name: &str) -> Result<PathBuf> {
        self.require(name).map(PathBuf::from)
    }

    pub fn task(&self) -> Result<Task> {
        Ok(if self.require("task")? == "seg" {
            Task::Segmentation
        } else {
            Task::Classification
        })
    }

    pub fn protocol(&self) -> Result<Protocol> {
        self.require("protocol")?
            .parse()
            .map_err(|e| ConfigError(format!("protocol: {e}")))
    }

    pub fn channels(&self) -> Result<[usize; 3]> {
        let v: Vec<usize> = self
            .require("channels")?
            .split(',')
            .map(|p| p.trim().parse().unwrap_or(0))
            .collect();
        Ok([v[0], v[1], v[2]])
    }

    /// Settings every command starts from before file and flag overrides.
    pub fn defaults(task: Task) -> Config {
        let model = match task {
            Task::Classification => ModelConfig::classification(parot::data::CLASS_NAMES.len()),
            Task::Segmentation => {
                ModelConfig::segmentation(parot::data::SEG_CATEGORY_NAMES.len(), parot::data::SEG_PARTS)
            }
        };
        let t = TrainConfig::new(model.clone());
        let w = LossWeights::default();
        let (points, train_count, test_count) = match task {
            Task::Classification => (1024, 100, 40),
            Task::Segmentation => (512, 200, 50),
        };
        let mut c = Config::default();
        let mut put = |k: &str, v: String| c.values.insert(k.to_string(), v);
        put("task", if task == Task::Segmentation { "seg" } else { "cls" }.into());
        put("seed", t.seed.to_string());
        put("out", "out".into());
        put("protocol", t.protocol.flag().into());
        put("relation_mode", model.relation_mode.name().into());
        put("neighbor_search", "knn".into());
        put("radius", "0.2".into());
        put("n_local", model.n_local.to_string());
        put("k_local", model.k_local.to_string());
        put("n_global", model.n_global.to_string());
        put("k_intra", model.k_intra.to_string());
        put("k_prop", model.k_prop.to_string());
        put("k_dense", model.k_dense.to_string());
        put("intra", model.intra.to_string());
        put("inter", model.inter.to_string());
        put("propagation", model.propagation.name().into());
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("lr_start", t.lr_start.to_string());
        put("lr_end", t.lr_end.to_string());
        put("weight_decay", t.weight_decay.to_string());
        put("alpha_local", w.equi_local.to_string());
        put("alpha_global", w.equi_global.to_string());
        put("beta_local", w.inv_local.to_string());
        put("beta_global", w.inv_global.to_string());
        put("orth_local", w.orth_local.to_string());
        put("orth_global", w.orth_global.to_string());
        put("augment", t.augment.to_string());
        put("eval_every", t.eval_every.to_string());
        put("inv_gap_samples", t.inv_gap_samples.to_string());
        put("points", points.to_string());
        put("train_count", train_count.to_string());
        put("test_count", test_count.to_string());
        put("channels", "0,1,2".into());
        put("export_count", "4".into());
        put("check_clouds", "20".into());
        put("check_rotations", "20".into());
        c
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let task = self.task()?;
        let base = match task {
            Task::Classification => ModelConfig::classification(parot::data::CLASS_NAMES.len()),
            Task::Segmentation => {
                ModelConfig::segmentation(parot::data::SEG_CATEGORY_NAMES.len(), parot::data::SEG_PARTS)
            }
        };
        let neighbor_search = match self.require("neighbor_search")? {
            "ball" => NeighborSearch::Ball {
                radius: self.real("radius")?,
            },
            _ => NeighborSearch::Knn,
        };
        let relation_mode: RelationMode = self
            .require("relation_mode")?
            .parse()
            .map_err(|e| ConfigError(format!("relation_mode: {e}")))?;
        let propagation: PropagationMode = self
            .require("propagation")?
            .parse()
            .map_err(|e| ConfigError(format!("propagation: {e}")))?;
        Ok(ModelConfig {
            n_local: self.uint("n_local")?,
            k_local: self.uint("k_local")?,
            n_global: self.uint("n_global")?,
            k_intra: self.uint("k_intra")?,
            k_prop: self.uint("k_prop")?,
            k_dense: self.uint("k_dense")?,
            neighbor_search,
            relation_mode,
            intra: self.flag("intra")?,
            inter: self.flag("inter")?,
            propagation,
            ..base
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.uint("epochs")?,
            batch_size: self.uint("batch_size")?,
            lr_start: self.real("lr_start")?,
            lr_end: self.real("lr_end")?,
            weight_decay: self.real("weight_decay")?,
            weights: LossWeights {
                equi_local: self.real("alpha_local")?,
                equi_global: self.real("alpha_global")?,
                inv_local: self.real("beta_local")?,
                inv_global: self.real("beta_global")?,
                orth_local: self.real("orth_local")?,
                orth_global: self.real("orth_global")?,
            },
            protocol: self.protocol()?,
            seed: self.u64("seed")?,
            augment: self.flag("augment")?,
            eval_every: self.uint("eval_every")?,
            inv_gap_samples: self.uint("inv_gap_samples")?,
            ..TrainConfig::new(self.model_config()?)
        })
    }

    /// The settings as a config file that parses back to the same values.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in REGISTRY {
            if let Some(v) = self.values.get(k.name) {
                let _ = writeln!(out, "{} = {v}", k.name);
            }
        }
        out
    }

    /// One line per registered key with its description.
    pub fn help() -> String {
        let mut out = String::from("config keys:\n");
        for k in REGISTRY {
            let _ = writeln!(out, "  {:<16} {}", k.name, k.help);
        }
        out
    }
}
