//! Times and reports a desk-scale classification run.
//!
//! `cargo run --release --example train_probe -- <epochs> <protocol> <relation> [eval_every]`

use std::time::Instant;

use parot::data::{gen_split_pair, Protocol, Task};
use parot::hierarchy::RelationMode;
use parot::model::ModelConfig;
use parot::train::{evaluate, feature_invariance, train, TrainConfig};

fn main() -> parot::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(2, |s| s.parse().unwrap());
    let protocol: Protocol = args.get(2).map_or(Ok(Protocol::ZSo3), |s| s.parse())?;
    let relation: RelationMode = args.get(3).map_or(Ok(RelationMode::Full), |s| s.parse())?;
    let eval_every = args.get(4).map_or(10, |s| s.parse().unwrap());
    let (train_set, test_set) = gen_split_pair(
        Task::Classification,
        std::env::var("PROBE_TRAIN").map_or(100, |v| v.parse().unwrap()),
        40,
        256,
        0,
    )?;
    let model = ModelConfig {
        n_local: 64,
        k_local: 32,
        n_global: 16,
        k_intra: 16,
        relation_mode: relation,
        ..ModelConfig::classification(4)
    };
    let cfg = TrainConfig {
        epochs,
        eval_every,
        seed: 1,
        protocol,
        ..TrainConfig::new(model)
    };
    let t = Instant::now();
    let mut out = train(&train_set, &test_set, &cfg, None)?;
    println!("train time {:.1}s", t.elapsed().as_secs_f64());
    for r in &out.history {
        println!(
            "epoch {} loss {:.4} acc {:.3} degen {:.4} test {:?}",
            r.epoch,
            r.train_loss,
            r.train_accuracy,
            r.degenerate_rate,
            r.test.as_ref().map(|m| (m.accuracy, m.inv_gap))
        );
    }
    for p in [Protocol::Zz, Protocol::ZSo3, Protocol::So3So3] {
        let m = evaluate(&out.model, &mut out.store, &test_set, p, 7, 32)?;
        println!("{p}: acc {:.4}", m.accuracy);
    }
    let fi = feature_invariance(&out.model, &mut out.store, &test_set, 40, 3)?;
    println!("feature invariance {fi:?}");
    Ok(())
}
