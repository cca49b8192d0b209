//! Regroups the test set into batches balanced by predicted labels and
//! re-predicts, repeatedly; errors barely move.
//!
//!     cargo run --release --example rebalance [checkpoint]

use batchlens::checkpoint::load_checkpoint;
use batchlens::config::{RawConfig, RunConfig};
use batchlens::experiments::{rebalance_iterate, train, Evaluator};
use batchlens::rng::Rng;

fn main() -> batchlens::Result<()> {
    let mut raw = RawConfig::default();
    raw.merge_file(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk_synthetic.cfg"))?;
    let cfg = RunConfig::from_raw(raw)?;
    let (train_set, test_set) = cfg.experiment.dataset.load()?;
    let network = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path.as_ref(), &cfg.experiment.model_spec()?)?,
        None => train(&cfg.experiment, &train_set, &test_set)?.network,
    };
    let ev = Evaluator {
        network: &network,
        crop: network.spec.input[1],
    };
    let report = rebalance_iterate(&ev, &test_set, 20, &mut Rng::new(0))?;
    for row in &report.rows {
        println!(
            "iteration {:>2}: error {:>6.2}%  labels changed {}",
            row.iteration,
            100.0 * row.error_rate,
            row.changed
        );
    }
    match report.fixed_point {
        Some(k) => println!("no label changed at iteration {k}"),
        None => println!("still moving after 20 iterations"),
    }
    Ok(())
}
