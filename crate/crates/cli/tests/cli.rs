//! End-to-end runs of the `parot` binary on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "points=128",
    "train_count=2",
    "test_count=1",
    "n_local=16",
    "k_local=16",
    "n_global=8",
    "k_intra=4",
    "epochs=1",
    "batch_size=4",
    "inv_gap_samples=1",
    "check_clouds=2",
    "check_rotations=2",
    "export_count=1",
];

fn parot(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parot"))
        .args(args)
        .arg("--out")
        .arg(out)
        .args(TINY.iter().flat_map(|kv| ["--set", kv]))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["train", "test"] {
        let mut names: Vec<_> = std::fs::read_dir(dir.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        names.sort();
        for p in names {
            files.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    files
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_ok(&parot(&["gen-data", "--seed", "5"], d.path()));
    }
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(!ta.is_empty());
    assert_eq!(ta, tb);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = parot(&["gen-data", "--set", "no_such_key=1"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
}

#[test]
fn bad_config_file_line_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nepochs = many\n").unwrap();
    let o = parot(&["train-cls", "--config", cfg.to_str().unwrap()], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("run.cfg:2"));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = parot(&["eval"], d.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_eval_check_and_export() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path();
    assert_ok(&parot(&["train-cls", "--seed", "3"], out));
    let ckpt = out.join("last.ckpt");
    assert!(ckpt.exists());
    let ckpt = ckpt.to_str().unwrap();

    assert_ok(&parot(
        &["eval", "--seed", "3", "--protocol", "z/SO3", "--checkpoint", ckpt],
        out,
    ));
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    assert_ok(&parot(&["check-invariance", "--seed", "3", "--checkpoint", ckpt], out));
    let report = std::fs::read_to_string(out.join("invariance.txt")).unwrap();
    assert!(report.contains("max residual"));

    assert_ok(&parot(
        &[
            "export-features",
            "--seed",
            "3",
            "--checkpoint",
            ckpt,
            "--channels",
            "0,5,9",
        ],
        out,
    ));
    let plys: Vec<_> = std::fs::read_dir(out)
        .unwrap()
        .filter_map(|e| e.unwrap().file_name().into_string().ok())
        .filter(|n| n.ends_with(".ply"))
        .collect();
    assert_eq!(plys.len(), 2, "{plys:?}");
}
