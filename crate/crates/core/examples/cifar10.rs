//! Loads the CIFAR-10 binary files and trains the desk CIFAR configuration.
//!
//!     BATCHLENS_DATA_DIR=/path/to/cifar-10-batches-bin cargo run --release --example cifar10 [epochs]

use batchlens::config::{RawConfig, RunConfig, DATA_DIR_ENV};
use batchlens::data::load_cifar10;
use batchlens::experiments::train;

fn main() -> batchlens::Result<()> {
    env_logger::init();
    let Some(dir) = std::env::var_os(DATA_DIR_ENV) else {
        eprintln!("set {DATA_DIR_ENV} to the directory holding data_batch_1.bin ... test_batch.bin");
        std::process::exit(1);
    };
    let (train_set, test_set, norm) = load_cifar10(dir.as_ref())?;
    println!(
        "{} train / {} test images, channel means {:?}",
        train_set.len(),
        test_set.len(),
        norm.mean
    );

    let mut raw = RawConfig::default();
    raw.merge_file(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk_cifar.cfg"))?;
    if let Some(epochs) = std::env::args().nth(1) {
        raw.set("epochs", &epochs)?;
    }
    let cfg = RunConfig::from_raw(raw)?;
    let outcome = train(&cfg.experiment, &train_set, &test_set)?;
    for (protocol, err) in &outcome.final_errors {
        println!("{:<18} {:>6.2}%", protocol.name(), 100.0 * err);
    }
    Ok(())
}
