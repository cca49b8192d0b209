//! Visitor circulation: a misclassified image placed in a batch of confident
//! images takes whichever class the batch is missing.
//!
//!     cargo run --release --example circulation [checkpoint]
//!
//! Without a checkpoint a small network is trained first (about a minute).

use batchlens::checkpoint::load_checkpoint;
use batchlens::cli::circulation_grid;
use batchlens::config::{RawConfig, RunConfig};
use batchlens::experiments::{circulate, train, Evaluator, VisitorSpec};
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
    for spec in ["weak:1", "strong:1", "weak:2"] {
        let report = circulate(&ev, &test_set, &VisitorSpec::parse(spec)?, cfg.theta, &mut Rng::new(1))?;
        println!(
            "{spec}: visitors {:?} with labels {:?}, standard predictions {:?}",
            report.visitors, report.visitor_labels, report.visitor_standard_predictions
        );
        print!("{}", circulation_grid(&report));
        println!(
            "missing-class rate {:.2}, visitor correct {:.2}, residents kept {:.2}\n",
            report.missing_class_rate, report.visitor_correct_rate, report.residents_kept_rate
        );
    }
    Ok(())
}
