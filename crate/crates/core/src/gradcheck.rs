//! Finite-difference verification of every backward pass, in `f64`.
//!
//! Each check draws several random instances, contracts the layer output with
//! a random projection `r` so the loss is `sum(r * y)`, and compares the
//! analytic gradient against central differences with step `h`. The error of
//! an instance is `|analytic - numeric| / max(|analytic|, |numeric|)` in the
//! Euclidean norm; a check reports the worst instance.

use serde::Serialize;

use crate::batchnorm::{bn_backward, BatchNormLayer, BnBackwardFn, BnMode};
use crate::error::{Error, Result};
use crate::layers::{
    global_avgpool_backward, global_avgpool_forward, softmax_xent, ConvLayer, FcLayer, Gradients, Layer, LayerCache,
    MaxPool, ResidualBlock,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// Composite instances are redrawn until every ReLU input is at least this far
/// from zero, so no `+-h` probe crosses the kink.
pub const KINK_MARGIN: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Random instances per check.
    pub instances: usize,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { seed: 0, instances: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

/// Norm-relative difference between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Central-difference gradient of `f` with respect to every element of `x`.
pub fn numeric_gradient(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> Result<f64>) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * STEP));
    }
    Ok(out)
}

fn gaussian(dims: &[usize], scale: f64, rng: &mut Rng) -> Result<Tensor<f64>> {
    let n: usize = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| scale * rng.next_gaussian()).collect())
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

struct Check<'a> {
    name: &'a str,
    tolerance: f64,
    worst: f64,
}

impl Check<'_> {
    fn record(&mut self, analytic: &Tensor<f64>, numeric: &[f64]) {
        self.worst = self.worst.max(relative_error(analytic.data(), numeric));
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            name: self.name.to_string(),
            max_rel_error: self.worst,
            tolerance: self.tolerance,
        }
    }
}

fn check(name: &str, tolerance: f64) -> Check<'_> {
    Check {
        name,
        tolerance,
        worst: 0.0,
    }
}

fn conv_checks(opts: &GradcheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    for (label, k, s, p) in [
        ("conv3x3", 3, 1, 1),
        ("conv3x3_s2", 3, 2, 1),
        ("conv1x1", 1, 1, 0),
        ("conv5x5", 5, 1, 2),
    ] {
        let mut rng = Rng::new(opts.seed).fork(0x100 + k as u64 * 10 + s as u64);
        let mut input_check = check(label, LAYER_TOLERANCE);
        let weight_name = format!("{label}.weight");
        let mut weight_check = check(&weight_name, LAYER_TOLERANCE);
        for _ in 0..opts.instances {
            let conv = ConvLayer::<f64>::he("c", 2, 3, k, s, p, &mut rng)?;
            let x = gaussian(&[2, 2, 5, 5], 1.0, &mut rng)?;
            let (y, cache) = conv.forward(&x)?;
            let r = gaussian(y.dims(), 1.0, &mut rng)?;
            let g = conv.backward(&cache, &r)?;
            input_check.record(&g.input, &numeric_gradient(&x, |x| Ok(dot(&conv.forward(x)?.0, &r)))?);
            let numeric = numeric_gradient(&conv.weight, |w| {
                let mut c = conv.clone();
                c.weight = w.clone();
                Ok(dot(&c.forward(&x)?.0, &r))
            })?;
            weight_check.record(&g.weight, &numeric);
        }
        out.push(input_check.finish());
        out.push(weight_check.finish());
    }
    Ok(())
}

fn pool_checks(opts: &GradcheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::new(opts.seed).fork(0x200);
    let pool = MaxPool::default();
    let mut c = check("maxpool", LAYER_TOLERANCE);
    for _ in 0..opts.instances {
        // distinct, well-separated values keep every window maximum stable under +-h
        let dims = [2, 2, 6, 6];
        let n: usize = dims.iter().product();
        let mut values: Vec<f64> = (0..n).map(|i| 0.05 * i as f64).collect();
        rng.shuffle(&mut values);
        let x = Tensor::from_vec(&dims, values)?;
        let (y, cache) = pool.forward(&x)?;
        let r = gaussian(y.dims(), 1.0, &mut rng)?;
        let g = pool.backward(&cache, &r)?;
        c.record(&g, &numeric_gradient(&x, |x| Ok(dot(&pool.forward(x)?.0, &r)))?);
    }
    out.push(c.finish());

    let mut c = check("global_avgpool", LAYER_TOLERANCE);
    for _ in 0..opts.instances {
        let x = gaussian(&[2, 3, 4, 4], 1.0, &mut rng)?;
        let r = gaussian(&[2, 3], 1.0, &mut rng)?;
        let g = global_avgpool_backward(x.dims(), &r)?;
        c.record(&g, &numeric_gradient(&x, |x| Ok(dot(&global_avgpool_forward(x)?, &r)))?);
    }
    out.push(c.finish());
    Ok(())
}

fn dense_checks(opts: &GradcheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = Rng::new(opts.seed).fork(0x300);
    let mut ci = check("fc", LAYER_TOLERANCE);
    let mut cw = check("fc.weight", LAYER_TOLERANCE);
    let mut cb = check("fc.bias", LAYER_TOLERANCE);
    for _ in 0..opts.instances {
        let mut fc = FcLayer::<f64>::he("fc", 6, 4, &mut rng)?;
        fc.bias = gaussian(&[4], 0.5, &mut rng)?;
        let x = gaussian(&[3, 6], 1.0, &mut rng)?;
        let r = gaussian(&[3, 4], 1.0, &mut rng)?;
        let g = fc.backward(&x, &r)?;
        ci.record(&g.input, &numeric_gradient(&x, |x| Ok(dot(&fc.forward(x)?, &r)))?);
        let nw = numeric_gradient(&fc.weight, |w| {
            let mut f = fc.clone();
            f.weight = w.clone();
            Ok(dot(&f.forward(&x)?, &r))
        })?;
        cw.record(&g.weight, &nw);
        let nb = numeric_gradient(&fc.bias, |b| {
            let mut f = fc.clone();
            f.bias = b.clone();
            Ok(dot(&f.forward(&x)?, &r))
        })?;
        cb.record(&g.bias, &nb);
    }
    out.extend([ci.finish(), cw.finish(), cb.finish()]);

    let mut c = check("softmax_xent", LAYER_TOLERANCE);
    for _ in 0..opts.instances {
        let logits = gaussian(&[4, 5], 2.0, &mut rng)?;
        let labels: Vec<usize> = (0..4).map(|_| rng.next_below(5)).collect();
        let g = softmax_xent(&logits, &labels)?.grad;
        c.record(&g, &numeric_gradient(&logits, |l| Ok(softmax_xent(l, &labels)?.loss))?);
    }
    out.push(c.finish());
    Ok(())
}

fn random_bn(rng: &mut Rng, channels: usize) -> Result<BatchNormLayer<f64>> {
    let mut bn = BatchNormLayer::<f64>::new("bn", channels)?;
    bn.gamma = Tensor::from_vec(&[channels], (0..channels).map(|_| 0.5 + rng.next_uniform()).collect())?;
    bn.beta = gaussian(&[channels], 0.5, rng)?;
    Ok(bn)
}

/// BN checks with a pluggable backward, so a corrupted implementation can be
/// shown to fail.
pub fn batchnorm_checks(opts: &GradcheckOptions, backward: BnBackwardFn<f64>) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(opts.seed).fork(0x400);
    let mut ci = check("batchnorm", LAYER_TOLERANCE);
    let mut cg = check("batchnorm.gamma", LAYER_TOLERANCE);
    let mut cb = check("batchnorm.beta", LAYER_TOLERANCE);
    for i in 0..opts.instances {
        // the first instance is the minimal 2x2x2x2 case
        let dims = if i == 0 { [2, 2, 2, 2] } else { [3, 2, 3, 3] };
        let bn = random_bn(&mut rng, dims[1])?;
        let offset = 3.0 * rng.next_gaussian();
        let x = gaussian(&dims, 1.0 + rng.next_uniform(), &mut rng)?.add(&Tensor::full(&dims, offset)?)?;
        let (y, cache) = bn.normalize(&x, BnMode::Train)?;
        let r = gaussian(y.dims(), 1.0, &mut rng)?;
        let g = backward(&bn, &cache, &r)?;
        let loss = |layer: &BatchNormLayer<f64>, x: &Tensor<f64>| -> Result<f64> {
            Ok(dot(&layer.normalize(x, BnMode::Train)?.0, &r))
        };
        ci.record(&g.input, &numeric_gradient(&x, |x| loss(&bn, x))?);
        let ng = numeric_gradient(&bn.gamma, |v| {
            let mut b = bn.clone();
            b.gamma = v.clone();
            loss(&b, &x)
        })?;
        cg.record(&g.gamma, &ng);
        let nb = numeric_gradient(&bn.beta, |v| {
            let mut b = bn.clone();
            b.beta = v.clone();
            loss(&b, &x)
        })?;
        cb.record(&g.beta, &nb);
    }
    Ok(vec![ci.finish(), cg.finish(), cb.finish()])
}

fn min_abs(values: impl Iterator<Item = f64>) -> f64 {
    values.map(f64::abs).fold(f64::INFINITY, f64::min)
}

/// Smallest distance of any ReLU input in the stack from zero.
fn kink_margin(layers: &[Layer<f64>], caches: &[LayerCache<f64>]) -> f64 {
    let mut margin = f64::INFINITY;
    for (layer, cache) in layers.iter().zip(caches) {
        match (layer, cache) {
            (_, LayerCache::Relu(input)) => margin = margin.min(min_abs(input.data().iter().copied())),
            (Layer::Residual(b), LayerCache::Residual(c)) => {
                let plane = c.bn1.dims[2] * c.bn1.dims[3];
                let ch = c.bn1.dims[1];
                let (g, be) = (b.bn1.gamma.data(), b.bn1.beta.data());
                let pre = c.bn1.x_hat.iter().enumerate().map(|(i, &v)| {
                    let k = (i / plane) % ch;
                    g[k] * v + be[k]
                });
                margin = margin.min(min_abs(pre)).min(min_abs(c.sum.data().iter().copied()));
            }
            _ => {}
        }
    }
    margin
}

/// Forward through a layer stack and return `(kink margin, parameter grads, input grad)`.
fn run_stack(layers: &[Layer<f64>], x: &Tensor<f64>, labels: &[usize]) -> Result<(f64, Gradients<f64>, Tensor<f64>)> {
    let mut act = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward(&act, BnMode::Train)?;
        caches.push(cache);
        act = y;
    }
    let margin = kink_margin(layers, &caches);
    let xent = softmax_xent(&act, labels)?;
    let mut grads = Gradients::new();
    let mut g = xent.grad;
    for (layer, cache) in layers.iter().zip(&caches).rev() {
        g = layer.backward(cache, &g, &mut grads)?;
    }
    Ok((margin, grads, g))
}

fn stack_loss(layers: &[Layer<f64>], x: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let mut act = x.clone();
    for layer in layers {
        act = layer.forward(&act, BnMode::Train)?.0;
    }
    Ok(softmax_xent(&act, labels)?.loss)
}

/// Mutable references to every parameter of a stack, keyed like the gradients.
fn stack_params(layers: &mut [Layer<f64>]) -> Vec<(String, &mut Tensor<f64>)> {
    let mut out = Vec::new();
    for layer in layers {
        match layer {
            Layer::Conv(c) => out.push((format!("{}.weight", c.name), &mut c.weight)),
            Layer::BatchNorm(bn) => {
                out.push((format!("{}.gamma", bn.name), &mut bn.gamma));
                out.push((format!("{}.beta", bn.name), &mut bn.beta));
            }
            Layer::Residual(b) => {
                out.push((format!("{}.weight", b.conv1.name), &mut b.conv1.weight));
                out.push((format!("{}.gamma", b.bn1.name), &mut b.bn1.gamma));
                out.push((format!("{}.beta", b.bn1.name), &mut b.bn1.beta));
                out.push((format!("{}.weight", b.conv2.name), &mut b.conv2.weight));
                out.push((format!("{}.gamma", b.bn2.name), &mut b.bn2.gamma));
                out.push((format!("{}.beta", b.bn2.name), &mut b.bn2.beta));
            }
            Layer::Fc(fc) => {
                out.push((format!("{}.weight", fc.name), &mut fc.weight));
                out.push((format!("{}.bias", fc.name), &mut fc.bias));
            }
            Layer::Relu | Layer::MaxPool(_) | Layer::GlobalAvgPool => {}
        }
    }
    out
}

/// Checks input and all parameter gradients of a stack ending in softmax cross-entropy.
fn stack_check(
    name: &str,
    build: impl Fn(&mut Rng) -> Result<(Vec<Layer<f64>>, Tensor<f64>)>,
    opts: &GradcheckOptions,
    stream: u64,
) -> Result<CheckResult> {
    let mut rng = Rng::new(opts.seed).fork(stream);
    let mut c = check(name, END_TO_END_TOLERANCE);
    for _ in 0..opts.instances {
        let mut attempts = 0;
        let (layers, x, labels, grads, grad_x) = loop {
            let (layers, x) = build(&mut rng)?;
            let labels: Vec<usize> = (0..x.dims()[0]).map(|_| rng.next_below(3)).collect();
            let (margin, grads, grad_x) = run_stack(&layers, &x, &labels)?;
            if margin >= KINK_MARGIN {
                break (layers, x, labels, grads, grad_x);
            }
            attempts += 1;
            if attempts == 10_000 {
                return Err(Error::Spec(format!("{name}: no kink-free instance found")));
            }
        };
        let mut analytic = grad_x.data().to_vec();
        let mut numeric = numeric_gradient(&x, |x| stack_loss(&layers, x, &labels))?;
        let mut probe = layers.clone();
        let names: Vec<String> = stack_params(&mut probe).into_iter().map(|(n, _)| n).collect();
        for (k, pname) in names.iter().enumerate() {
            analytic.extend_from_slice(grads[pname].data());
            let base = stack_params(&mut probe)[k].1.clone();
            let n = numeric_gradient(&base, |v| {
                let mut l = layers.clone();
                *stack_params(&mut l)[k].1 = v.clone();
                stack_loss(&l, &x, &labels)
            })?;
            numeric.extend(n);
        }
        c.worst = c.worst.max(relative_error(&analytic, &numeric));
    }
    Ok(c.finish())
}

fn end_to_end_checks(opts: &GradcheckOptions, out: &mut Vec<CheckResult>) -> Result<()> {
    out.push(stack_check(
        "micro_net",
        |rng| {
            let layers = vec![
                Layer::Conv(ConvLayer::he("conv", 2, 3, 3, 1, 1, rng)?),
                Layer::BatchNorm(random_bn(rng, 3)?),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::Fc(FcLayer::he("fc", 3, 3, rng)?),
            ];
            Ok((layers, gaussian(&[4, 2, 4, 4], 1.0, rng)?))
        },
        opts,
        0x500,
    )?);
    out.push(stack_check(
        "residual_block",
        |rng| {
            let layers = vec![
                Layer::Residual(ResidualBlock::new("block", 2, 3, rng)?),
                Layer::GlobalAvgPool,
                Layer::Fc(FcLayer::he("fc", 3, 3, rng)?),
            ];
            Ok((layers, gaussian(&[2, 2, 3, 3], 1.0, rng)?))
        },
        opts,
        0x600,
    )?);
    Ok(())
}

/// The full suite with a caller-supplied batch-norm backward.
pub fn run_with(opts: &GradcheckOptions, bn: BnBackwardFn<f64>) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    conv_checks(opts, &mut checks)?;
    pool_checks(opts, &mut checks)?;
    dense_checks(opts, &mut checks)?;
    checks.extend(batchnorm_checks(opts, bn)?);
    end_to_end_checks(opts, &mut checks)?;
    Ok(GradcheckReport { checks })
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    run_with(opts, bn_backward::<f64>)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batchnorm::{BnCache, BnGrads};

    /// Drops the batch-coupling terms: treats mean and variance as constants.
    fn uncoupled(layer: &BatchNormLayer<f64>, cache: &BnCache<f64>, grad: &Tensor<f64>) -> Result<BnGrads<f64>> {
        let mut g = bn_backward(layer, cache, grad)?;
        let plane = cache.dims[2] * cache.dims[3];
        let c = cache.dims[1];
        for (i, v) in g.input.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = grad.data()[i] * layer.gamma.data()[ch] * cache.inv_std[ch];
        }
        Ok(g)
    }

    #[test]
    fn full_suite_passes() {
        let report = run(&GradcheckOptions::default()).unwrap();
        for c in &report.checks {
            assert!(c.passed(), "{} {:e}", c.name, c.max_rel_error);
        }
        assert!(report.checks.len() >= 15);
    }

    #[test]
    fn outcome_is_seed_independent() {
        for seed in 1..=10 {
            let report = run(&GradcheckOptions { seed, instances: 5 }).unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.failures());
        }
    }

    #[test]
    fn corrupted_batchnorm_is_caught() {
        let report = run_with(&GradcheckOptions::default(), uncoupled).unwrap();
        let failures: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        assert_eq!(failures, vec!["batchnorm"]);
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }
}
