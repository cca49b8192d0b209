//! Balanced batches: one image per class, every image once per epoch.
//!
//!     cargo run --example balanced_sampling

use batchlens::data::{BatchPlan, Sampler, SyntheticSpec};

fn main() -> batchlens::Result<()> {
    let (train, _) = SyntheticSpec {
        classes: 5,
        train_per_class: 3,
        test_per_class: 1,
        channels: 1,
        size: 4,
        noise: 1.0,
        seed: 0,
    }
    .generate()?;

    for plan in [BatchPlan::balanced(5, 1), BatchPlan::random(5, 1)] {
        println!("{:?}", plan.kind);
        let mut sampler = Sampler::new(plan);
        for epoch in 0..2 {
            for batch in sampler.next_epoch(&train)? {
                let labels: Vec<usize> = batch.iter().map(|&i| train.image(i).label).collect();
                println!("  epoch {epoch} images {batch:?} labels {labels:?}");
            }
        }
    }
    Ok(())
}
