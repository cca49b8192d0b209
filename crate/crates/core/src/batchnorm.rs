//! Per-channel batch normalization with three inference regimes.
//!
//! For a `m x N x h x w` input every channel is reduced over its
//! `m' = m * h * w` positions:
//!
//! ```text
//! mu      = (1/m') sum x_i
//! sigma^2 = (1/m') sum (x_i - mu)^2          (clamped at 0)
//! x_hat_i = (x_i - mu) / sqrt(sigma^2 + eps)
//! y_i     = gamma * x_hat_i + beta
//! ```
//!
//! `Train` and `EvalBatchStats` normalize with the statistics of the batch
//! itself, which couples the outputs of all images in the batch.
//! `EvalPopulation` normalizes with the stored running statistics and treats
//! every image independently.
//!
//! Running statistics are an exponential moving average,
//! `running = momentum * running + (1 - momentum) * batch`, of the biased
//! (population) batch variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    EvalPopulation,
    EvalBatchStats,
}

impl BnMode {
    pub fn uses_batch_stats(self) -> bool {
        !matches!(self, BnMode::EvalPopulation)
    }

    pub fn name(self) -> &'static str {
        match self {
            BnMode::Train => "train",
            BnMode::EvalPopulation => "eval-population",
            BnMode::EvalBatchStats => "eval-batch-stats",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T = f32> {
    pub name: String,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub epsilon: T,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub num_batches_tracked: u64,
}

/// Values saved by the forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T = f32> {
    pub mode: BnMode,
    pub dims: Vec<usize>,
    /// Normalized input, same layout as the input.
    pub x_hat: Vec<T>,
    /// `1 / sqrt(sigma^2 + eps)` per channel.
    pub inv_std: Vec<T>,
    /// Statistics that normalized this batch (batch or running, depending on mode).
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T = f32> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Signature of a batch-norm backward routine; lets the gradient checker
/// exercise alternative (or deliberately broken) implementations.
pub type BnBackwardFn<T> = fn(&BatchNormLayer<T>, &BnCache<T>, &Tensor<T>) -> Result<BnGrads<T>>;

/// Two-pass per-channel mean and biased variance.
pub fn batch_stats<T: Real>(input: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (m, n, plane) = nchw(input)?;
    let count = m * plane;
    let mut mean = vec![0f64; n];
    for b in 0..m {
        for (c, acc) in mean.iter_mut().enumerate() {
            let base = (b * n + c) * plane;
            *acc += input.data()[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= count as f64);
    let mut var = vec![0f64; n];
    for b in 0..m {
        for c in 0..n {
            let base = (b * n + c) * plane;
            var[c] += input.data()[base..base + plane]
                .iter()
                .map(|v| (v.as_f64() - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    Ok((
        mean.into_iter().map(T::lit).collect(),
        var.into_iter().map(|v| T::lit((v / count as f64).max(0.0))).collect(),
    ))
}

fn nchw<T: Real>(input: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match input.dims() {
        &[m, n, h, w] => Ok((m, n, h * w)),
        d => Err(Error::InvalidShape(format!("batch norm expects 4-D input, got {d:?}"))),
    }
}

impl<T: Real> BatchNormLayer<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Result<Self> {
        Ok(BatchNormLayer {
            name: name.into(),
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
            epsilon: T::lit(DEFAULT_EPSILON),
            running_mean: Tensor::zeros(&[channels])?,
            running_var: Tensor::full(&[channels], T::one())?,
            momentum: T::lit(DEFAULT_MOMENTUM),
            num_batches_tracked: 0,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes `input` without touching the running statistics.
    pub fn normalize(&self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (m, n, plane) = nchw(input)?;
        if n != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "bn_forward",
                left: input.dims().to_vec(),
                right: vec![self.channels()],
            });
        }
        let (mean, var) = if mode.uses_batch_stats() {
            if m * plane < 2 {
                return Err(Error::TooFewValues(m * plane));
            }
            batch_stats(input)?
        } else {
            (self.running_mean.data().to_vec(), self.running_var.data().to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.epsilon).sqrt()).collect();
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        let mut x_hat = vec![T::zero(); input.len()];
        let mut out = vec![T::zero(); input.len()];
        for b in 0..m {
            for c in 0..n {
                let base = (b * n + c) * plane;
                for i in base..base + plane {
                    let xh = (input.data()[i] - mean[c]) * inv_std[c];
                    x_hat[i] = xh;
                    out[i] = gamma[c] * xh + beta[c];
                }
            }
        }
        let output = Tensor::from_op(input.dims(), out, "bn_forward")?;
        Ok((
            output,
            BnCache {
                mode,
                dims: input.dims().to_vec(),
                x_hat,
                inv_std,
                mean,
                var,
            },
        ))
    }

    /// Forward pass; in `Train` mode the batch statistics are folded into the running averages.
    pub fn forward(&mut self, input: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, BnCache<T>)> {
        let (out, cache) = self.normalize(input, mode)?;
        if mode == BnMode::Train {
            self.absorb(&cache);
        }
        Ok((out, cache))
    }

    /// EMA update of the running statistics from a batch-statistics cache.
    pub fn absorb(&mut self, cache: &BnCache<T>) {
        if !cache.mode.uses_batch_stats() {
            return;
        }
        let keep = self.momentum;
        let take = T::one() - keep;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.mean) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.var) {
            *r = keep * *r + take * b;
        }
        self.num_batches_tracked += 1;
    }

    pub fn set_running(&mut self, mean: &[T], var: &[T]) -> Result<()> {
        if mean.len() != self.channels() || var.len() != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "set_running",
                left: vec![mean.len(), var.len()],
                right: vec![self.channels()],
            });
        }
        self.running_mean = Tensor::from_vec(&[mean.len()], mean.to_vec())?;
        self.running_var = Tensor::from_vec(&[var.len()], var.iter().map(|&v| v.max(T::zero())).collect())?;
        Ok(())
    }

    pub fn backward(&self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
        bn_backward(self, cache, grad_out)
    }
}

/// Exact gradient of the batch-statistics forward pass.
///
/// With `g = dL/dy * gamma`, per channel:
/// `dL/dx_i = inv_std / m' * (m' g_i - sum g - x_hat_i * sum(g x_hat))`,
/// which includes the dependence of `mu` and `sigma^2` on every input.
pub fn bn_backward<T: Real>(layer: &BatchNormLayer<T>, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<BnGrads<T>> {
    if !cache.mode.uses_batch_stats() {
        return Err(Error::ModeMismatch(cache.mode.name()));
    }
    if grad_out.dims() != cache.dims.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "bn_backward",
            left: grad_out.dims().to_vec(),
            right: cache.dims.clone(),
        });
    }
    let (m, n, plane) = nchw(grad_out)?;
    let count = T::lit((m * plane) as f64);
    let dy = grad_out.data();
    let mut sum_dy = vec![T::zero(); n];
    let mut sum_dy_xhat = vec![T::zero(); n];
    for b in 0..m {
        for c in 0..n {
            let base = (b * n + c) * plane;
            for (&g, &xh) in dy[base..base + plane].iter().zip(&cache.x_hat[base..base + plane]) {
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * xh;
            }
        }
    }
    let gamma = layer.gamma.data();
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..m {
        for c in 0..n {
            let base = (b * n + c) * plane;
            let k = gamma[c] * cache.inv_std[c] / count;
            for i in base..base + plane {
                dx[i] = k * (count * dy[i] - sum_dy[c] - cache.x_hat[i] * sum_dy_xhat[c]);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_op(grad_out.dims(), dx, "bn_backward")?,
        gamma: Tensor::from_op(&[n], sum_dy_xhat, "bn_backward")?,
        beta: Tensor::from_op(&[n], sum_dy, "bn_backward")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::channel_moments;

    fn random(dims: &[usize], scale: f64, offset: f64, rng: &mut Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| offset + scale * rng.next_gaussian()).collect()).unwrap()
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let mut bn = BatchNormLayer::<f32>::new("bn", 1).unwrap();
        let x = Tensor::full(&[3, 1, 2, 2], 4.0f32).unwrap();
        let (y, _) = bn.forward(&x, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn four_value_example() {
        let bn = BatchNormLayer::<f64>::new("bn", 1).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = bn.normalize(&x, BnMode::Train).unwrap();
        assert_eq!(cache.mean[0], 2.5);
        assert!((cache.var[0] - 1.25).abs() < 1e-15);
        // (x - 2.5) / sqrt(1.25 + 1e-5), evaluated independently
        let expect = [-1.341635, -0.447212, 0.447212, 1.341635];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn population_identity_statistics() {
        let bn = BatchNormLayer::<f64>::new("bn", 2).unwrap();
        let mut rng = Rng::new(1);
        let x = random(&[2, 2, 3, 3], 1.0, 0.0, &mut rng);
        let (y, _) = bn.normalize(&x, BnMode::EvalPopulation).unwrap();
        let s = (1.0 + DEFAULT_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b / s).abs() < 1e-15);
        }
    }

    #[test]
    fn population_mode_leaves_state_alone() {
        let mut bn = BatchNormLayer::<f32>::new("bn", 2).unwrap();
        let before = bn.clone();
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 5.0]).unwrap();
        bn.forward(&x, BnMode::EvalPopulation).unwrap();
        bn.forward(&x, BnMode::EvalBatchStats).unwrap();
        assert_eq!(bn, before);
        bn.forward(&x, BnMode::Train).unwrap();
        assert_ne!(bn.running_mean, before.running_mean);
        assert_eq!(bn.num_batches_tracked, 1);
    }

    #[test]
    fn rejects_single_value_channels_and_bad_width() {
        let bn = BatchNormLayer::<f32>::new("bn", 2).unwrap();
        let x = Tensor::<f32>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(matches!(bn.normalize(&x, BnMode::Train), Err(Error::TooFewValues(1))));
        assert!(bn.normalize(&x, BnMode::EvalPopulation).is_ok());
        let y = Tensor::<f32>::zeros(&[2, 3, 2, 2]).unwrap();
        assert!(bn.normalize(&y, BnMode::Train).is_err());
    }

    #[test]
    fn backward_rejects_population_cache() {
        let bn = BatchNormLayer::<f64>::new("bn", 1).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let (y, cache) = bn.normalize(&x, BnMode::EvalPopulation).unwrap();
        assert!(matches!(bn.backward(&cache, &y), Err(Error::ModeMismatch(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = Rng::new(2);
        let bn = BatchNormLayer::<f64>::new("bn", 2).unwrap();
        let x = random(&[2, 2, 2, 2], 1.0, 0.0, &mut rng);
        let (_, cache) = bn.normalize(&x, BnMode::Train).unwrap();
        let g = bn.backward(&cache, &Tensor::zeros(&[2, 2, 2, 2]).unwrap()).unwrap();
        assert!(g
            .input
            .data()
            .iter()
            .chain(g.gamma.data())
            .chain(g.beta.data())
            .all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_sums_to_zero_per_channel() {
        let mut rng = Rng::new(3);
        let bn = BatchNormLayer::<f64>::new("bn", 3).unwrap();
        let x = random(&[4, 3, 2, 2], 2.0, 1.0, &mut rng);
        let (_, cache) = bn.normalize(&x, BnMode::Train).unwrap();
        let dy = random(&[4, 3, 2, 2], 1.0, 0.0, &mut rng);
        let g = bn.backward(&cache, &dy).unwrap();
        for c in 0..3 {
            let s: f64 = (0..4)
                .flat_map(|b| (0..4).map(move |i| (b * 3 + c) * 4 + i))
                .map(|i| g.input.data()[i])
                .sum();
            assert!(s.abs() < 1e-10, "channel {c}: {s}");
        }
    }

    #[test]
    fn grads_match_central_differences_at_every_position() {
        let mut rng = Rng::new(4);
        let mut bn = BatchNormLayer::<f64>::new("bn", 2).unwrap();
        bn.gamma = random(&[2], 0.5, 1.0, &mut rng);
        bn.beta = random(&[2], 0.5, 0.0, &mut rng);
        let x = random(&[2, 2, 2, 2], 1.5, 0.3, &mut rng);
        let r = random(&[2, 2, 2, 2], 1.0, 0.0, &mut rng);
        let loss = |bn: &BatchNormLayer<f64>, x: &Tensor<f64>| {
            let (y, _) = bn.normalize(x, BnMode::Train).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = bn.normalize(&x, BnMode::Train).unwrap();
        let g = bn.backward(&cache, &r).unwrap();
        let h = 1e-3;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let numeric = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h);
            let analytic = g.input.data()[i];
            assert!(
                (numeric - analytic).abs() <= 1e-4 * analytic.abs().max(1e-2),
                "{i}: {numeric} vs {analytic}"
            );
        }
        for c in 0..2 {
            let mut bp = bn.clone();
            bp.gamma.data_mut()[c] += h;
            let mut bm = bn.clone();
            bm.gamma.data_mut()[c] -= h;
            let numeric = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * h);
            assert!((numeric - g.gamma.data()[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn one_pass_and_two_pass_variance_agree() {
        let mut rng = Rng::new(5);
        let x = random(&[4, 3, 5, 5], 1.3, 0.7, &mut rng);
        let (mean2, var2) = batch_stats(&x).unwrap();
        let (mean1, sq) = channel_moments(&x).unwrap();
        for c in 0..3 {
            assert!((mean1[c] - mean2[c]).abs() < 1e-12);
            let one_pass = sq[c] - mean1[c] * mean1[c];
            assert!((one_pass - var2[c]).abs() <= 1e-4 * var2[c]);
        }
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut rng = Rng::new(6);
        let mut bn = BatchNormLayer::<f64>::new("bn", 2).unwrap();
        let x = random(&[3, 2, 2, 2], 2.0, 3.0, &mut rng);
        let (mean, var) = batch_stats(&x).unwrap();
        let m0: Vec<f64> = bn.running_mean.data().to_vec();
        let v0: Vec<f64> = bn.running_var.data().to_vec();
        let k = 50;
        for _ in 0..k {
            bn.forward(&x, BnMode::Train).unwrap();
        }
        let factor = DEFAULT_MOMENTUM.powi(k);
        for c in 0..2 {
            let dm = (bn.running_mean.data()[c] - mean[c]).abs();
            let dv = (bn.running_var.data()[c] - var[c]).abs();
            assert!(dm <= factor * (m0[c] - mean[c]).abs() * (1.0 + 1e-9) + 1e-12);
            assert!(dv <= factor * (v0[c] - var[c]).abs() * (1.0 + 1e-9) + 1e-12);
        }
    }
}
