//! Trains one case and prints per-epoch progress and test metrics.
//!
//! `cargo run --release --example train_bench -- <case> [n] [max_epochs] [variant] [seed]`

use nwn_harness::cases::CaseName;
use nwn_harness::dataset::build_dataset;
use nwn_harness::experiment::{run_case, Labels};
use nwn_model::{TrainConfig, Variant};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let case: CaseName = args.get(1).map_or(CaseName::ForbiddenZone, |s| s.parse().expect("case"));
    let n: usize = args.get(2).map_or(400, |s| s.parse().expect("n"));
    let epochs: usize = args.get(3).map_or(5, |s| s.parse().expect("max_epochs"));
    let variant: Variant = args.get(4).map_or(Variant::Ours, |s| s.parse().expect("variant"));
    let seed: u64 = args.get(5).map_or(1, |s| s.parse().expect("seed"));

    let spec = case.load().expect("shipped case");
    let ds = build_dataset(&spec, n, seed).expect("dataset");
    let cfg = TrainConfig {
        max_epochs: epochs,
        seed,
        variant,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let run = run_case(&spec, &ds, &cfg, Labels::True).expect("training");
    for r in &run.outcome.log {
        println!(
            "epoch {:>3} train {:.4} val {:.4} acc {:.3}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy
        );
    }
    let m = run.metrics;
    println!(
        "{case} {variant} seed {seed}: acc {:.3} f1 {:.3} best epoch {} ({:.0}s)",
        m.accuracy,
        m.f1,
        run.outcome.best_epoch,
        start.elapsed().as_secs_f64()
    );
}
