//! The three batch-norm modes on one small batch: training and batch-stats
//! inference couple the images, population inference does not.
//!
//!     cargo run --example batchnorm_modes

use batchlens::batchnorm::{BatchNormLayer, BnMode};
use batchlens::rng::Rng;
use batchlens::tensor::Tensor;

fn main() -> batchlens::Result<()> {
    let mut rng = Rng::new(0);
    let x = Tensor::from_vec(
        &[4, 2, 2, 2],
        (0..32).map(|_| (3.0 + 2.0 * rng.next_gaussian()) as f32).collect(),
    )?;
    let mut bn = BatchNormLayer::new("bn", 2)?;

    // a few training steps move the running averages towards the batch statistics
    for _ in 0..50 {
        bn.forward(&x, BnMode::Train)?;
    }
    println!("running mean {:?}", bn.running_mean.data());
    println!("running var  {:?}", bn.running_var.data());

    // perturb every image except the first and look at the first image's output
    let mut y = x.clone();
    y.data_mut()[8..].iter_mut().for_each(|v| *v = *v * 2.0 - 5.0);
    for mode in [BnMode::EvalPopulation, BnMode::EvalBatchStats] {
        let (a, _) = bn.normalize(&x, mode)?;
        let (b, _) = bn.normalize(&y, mode)?;
        let delta = a.data()[..8]
            .iter()
            .zip(&b.data()[..8])
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f32::max);
        println!("{:<16} max change of image 0: {delta:.4}", mode.name());
    }
    Ok(())
}
