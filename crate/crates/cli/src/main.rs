//! `parot`: data generation, training, evaluation, invariance checks and
//! feature export for the patch-wise rotation-invariant network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Config, ConfigError};

#[derive(Parser, Debug)]
#[command(name = "parot", version, about, after_help = Config::help())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    GenData,
    TrainCls,
    TrainSeg,
    Eval,
    CheckInvariance,
    ExportFeatures,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic train and test datasets to `<out>/train` and `<out>/test`.
    GenData(Flags),
    /// Train the classification network.
    TrainCls(Flags),
    /// Train the part-segmentation network.
    TrainSeg(Flags),
    /// Evaluate a checkpoint and write `<out>/eval.csv`.
    Eval(Flags),
    /// Oracle-conditioned invariance sweep plus, with a checkpoint, the
    /// trained-model invariance report.
    CheckInvariance(Flags),
    /// Write coloured PLY files of three content-feature channels.
    ExportFeatures(Flags),
}

/// Flags shared by every command. Each maps onto a config key.
#[derive(Args, Debug, Default)]
struct Flags {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// cls or seg (commands without an implied task).
    #[arg(long)]
    task: Option<String>,
    /// zz, zso3 or so3so3.
    #[arg(long)]
    protocol: Option<String>,
    /// full, orientation, position or none.
    #[arg(long)]
    relation_mode: Option<String>,
    #[arg(long)]
    k_prop: Option<String>,
    /// knn or ball.
    #[arg(long)]
    neighbor_search: Option<String>,
    #[arg(long)]
    radius: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Dataset directory to evaluate or export.
    #[arg(long)]
    data: Option<String>,
    /// Three content channels, e.g. `0,5,9`.
    #[arg(long)]
    channels: Option<String>,
    /// Any other config key, repeatable: `--set epochs=60`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Command {
    fn split(self) -> (CommandKind, Flags) {
        match self {
            Command::GenData(f) => (CommandKind::GenData, f),
            Command::TrainCls(f) => (CommandKind::TrainCls, f),
            Command::TrainSeg(f) => (CommandKind::TrainSeg, f),
            Command::Eval(f) => (CommandKind::Eval, f),
            Command::CheckInvariance(f) => (CommandKind::CheckInvariance, f),
            Command::ExportFeatures(f) => (CommandKind::ExportFeatures, f),
        }
    }
}

/// Defaults, then the config file, then flags.
fn effective_config(kind: CommandKind, flags: &Flags) -> Result<Config, ConfigError> {
    let mut explicit = match &flags.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let mut cli = Config::default();
    let named = [
        ("seed", &flags.seed),
        ("out", &flags.out),
        ("task", &flags.task),
        ("protocol", &flags.protocol),
        ("relation_mode", &flags.relation_mode),
        ("k_prop", &flags.k_prop),
        ("neighbor_search", &flags.neighbor_search),
        ("radius", &flags.radius),
        ("checkpoint", &flags.checkpoint),
        ("test_data", &flags.data),
        ("channels", &flags.channels),
    ];
    for (k, v) in named {
        if let Some(v) = v {
            let v = if k == "protocol" {
                v.to_ascii_lowercase().replace('/', "")
            } else {
                v.clone()
            };
            cli.set(k, &v)?;
        }
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("--set {kv:?}: expected KEY=VALUE")))?;
        cli.set(k.trim(), v)?;
    }
    explicit.overlay(&cli);
    match kind {
        CommandKind::TrainCls => explicit.set("task", "cls")?,
        CommandKind::TrainSeg => explicit.set("task", "seg")?,
        _ => {}
    }
    let mut cfg = Config::defaults(explicit.task().unwrap_or(parot::data::Task::Classification));
    cfg.overlay(&explicit);
    cfg.model_config()?;
    cfg.train_config()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (kind, flags) = cli.command.split();
    let cfg = match effective_config(kind, &flags) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    for line in cfg.render().lines() {
        log::info!("config {line}");
    }
    match commands::run(kind, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
