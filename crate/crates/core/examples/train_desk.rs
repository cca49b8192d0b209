//! Trains the desk configuration with both training plans and compares the
//! three inference protocols, then saves the balanced-trained checkpoint.
//!
//!     cargo run --release --example train_desk [out_dir]

use std::path::PathBuf;

use batchlens::checkpoint::save_checkpoint;
use batchlens::config::{RawConfig, RunConfig};
use batchlens::experiments::{output_path, train, write_metrics_csv};

fn main() -> batchlens::Result<()> {
    env_logger::init();
    let out_dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out".into()));
    let cfg_path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/desk_synthetic.cfg");

    println!("{:<10} {:<18} {:>8}", "training", "testing", "error");
    for plan in ["balanced", "random"] {
        let mut raw = RawConfig::default();
        raw.merge_file(&cfg_path)?;
        raw.set("train_plan", plan)?;
        raw.set("run_name", &format!("desk-{plan}"))?;
        raw.set("out_dir", out_dir.to_str().unwrap_or("out"))?;
        let cfg = RunConfig::from_raw(raw)?;
        let (train_set, test_set) = cfg.experiment.dataset.load()?;
        let outcome = train(&cfg.experiment, &train_set, &test_set)?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| batchlens::Error::io(&cfg.out_dir, e))?;
        write_metrics_csv(
            &outcome.rows,
            &output_path(&cfg.out_dir, &cfg.experiment.run_name, "metrics.csv"),
        )?;
        save_checkpoint(&outcome.network, &cfg.checkpoint)?;
        for (protocol, err) in &outcome.final_errors {
            println!("{plan:<10} {:<18} {:>7.2}%", protocol.name(), 100.0 * err);
        }
    }
    println!("balanced-batch rows are conditional: they group test images by their true labels");
    Ok(())
}
