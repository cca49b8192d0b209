use serde::{Deserialize, Serialize};

use super::Evaluator;
use crate::batchnorm::BnMode;
use crate::data::{center_crop, BatchPlan, Dataset, Sampler};
use crate::error::{Error, Result};
use crate::layers::{argmax, softmax};
use crate::model::Network;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Fixed batch size for standard inference; any value gives identical predictions.
pub const EVAL_BATCH: usize = 100;

/// How shuffled balanced evaluation combines its groupings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShuffleVote {
    /// Average each image's class probabilities over groupings, then take the argmax.
    MeanProbability,
    /// Score every grouping separately and average the error rates.
    MeanError,
}

impl ShuffleVote {
    pub fn name(self) -> &'static str {
        match self {
            ShuffleVote::MeanProbability => "mean_probability",
            ShuffleVote::MeanError => "mean_error",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean_probability" => Ok(ShuffleVote::MeanProbability),
            "mean_error" => Ok(ShuffleVote::MeanError),
            other => Err(Error::Config(format!(
                "unknown shuffle vote '{other}' (mean_probability|mean_error)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub error_rate: f64,
    /// Mean negative log-likelihood of the true labels.
    pub loss: f64,
    /// Predicted class per test image, in dataset order.
    pub predictions: Vec<usize>,
    /// Probability assigned to the predicted class.
    pub confidence: Vec<f32>,
}

impl EvalResult {
    fn from_probabilities(probs: &[Vec<f64>], labels: &[usize]) -> Self {
        let mut wrong = 0;
        let mut nll = 0.0;
        let mut predictions = Vec::with_capacity(labels.len());
        let mut confidence = Vec::with_capacity(labels.len());
        for (p, &l) in probs.iter().zip(labels) {
            let k = argmax(p);
            wrong += usize::from(k != l);
            nll -= p[l].max(1e-300).ln();
            predictions.push(k);
            confidence.push(p[k] as f32);
        }
        let n = labels.len().max(1) as f64;
        EvalResult {
            error_rate: wrong as f64 / n,
            loss: nll / n,
            predictions,
            confidence,
        }
    }
}

/// Class probabilities for the images `indices`, evaluated together as one batch.
pub fn predict(ev: &Evaluator, dataset: &Dataset, indices: &[usize], mode: BnMode) -> Result<Tensor> {
    let batch = dataset.gather(indices)?;
    let x = center_crop(&batch.images, ev.crop)?;
    softmax(&ev.network.logits(&x, mode)?)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.dims()[1];
    t.data()
        .chunks(c)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Standard inference with population statistics over fixed-order batches.
pub fn eval_standard(ev: &Evaluator, test: &Dataset) -> Result<EvalResult> {
    let order: Vec<usize> = (0..test.len()).collect();
    let mut probs = Vec::with_capacity(test.len());
    for chunk in order.chunks(EVAL_BATCH) {
        probs.extend(rows(&predict(ev, test, chunk, BnMode::EvalPopulation)?));
    }
    Ok(EvalResult::from_probabilities(&probs, &test.labels()))
}

/// Balanced batches over `test` built from the true labels.
///
/// Returns `(batch, scored)` pairs. Batch `t` holds element `t` of every class
/// list, wrapping around for classes with fewer images; only the first visit
/// of an image is scored, so every image is scored exactly once. Without an
/// `rng` the class lists stay in dataset order and positions follow class id.
pub fn balanced_groups(test: &Dataset, mut rng: Option<&mut Rng>) -> Result<Vec<(Vec<usize>, Vec<bool>)>> {
    if let Some(k) = test.class_indices().iter().position(Vec::is_empty) {
        return Err(Error::Experiment(format!("class {k} has no test images")));
    }
    let mut lists: Vec<Vec<usize>> = test.class_indices().to_vec();
    if let Some(r) = rng.as_deref_mut() {
        lists.iter_mut().for_each(|l| r.shuffle(l));
    }
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(longest);
    for t in 0..longest {
        let mut batch: Vec<(usize, bool)> = lists.iter().map(|l| (l[t % l.len()], t < l.len())).collect();
        if let Some(r) = rng.as_deref_mut() {
            r.shuffle(&mut batch);
        }
        out.push(batch.into_iter().unzip());
    }
    Ok(out)
}

/// Conditional inference: every test batch is balanced by ground truth and
/// normalized with its own statistics.
///
/// With `shuffled`, `repeats` independent groupings are combined according to
/// `vote`; otherwise a single deterministic grouping is used.
pub fn eval_balanced(
    ev: &Evaluator,
    test: &Dataset,
    shuffled: bool,
    rng: &mut Rng,
    repeats: usize,
    vote: ShuffleVote,
) -> Result<EvalResult> {
    let repeats = if shuffled { repeats.max(1) } else { 1 };
    let classes = test.classes();
    let labels = test.labels();
    let mut sum = vec![vec![0f64; classes]; test.len()];
    let mut per_repeat = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let groups = balanced_groups(test, if shuffled { Some(&mut *rng) } else { None })?;
        let mut probs = vec![Vec::new(); test.len()];
        for (batch, scored) in groups {
            let p = rows(&predict(ev, test, &batch, BnMode::EvalBatchStats)?);
            for ((i, keep), row) in batch.into_iter().zip(scored).zip(p) {
                if keep {
                    probs[i] = row;
                }
            }
        }
        for (acc, p) in sum.iter_mut().zip(&probs) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        per_repeat.push(EvalResult::from_probabilities(&probs, &labels));
    }
    Ok(match vote {
        ShuffleVote::MeanProbability => {
            sum.iter_mut().flatten().for_each(|v| *v /= repeats as f64);
            EvalResult::from_probabilities(&sum, &labels)
        }
        ShuffleVote::MeanError => {
            let n = repeats as f64;
            let mut first = per_repeat[0].clone();
            first.error_rate = per_repeat.iter().map(|r| r.error_rate).sum::<f64>() / n;
            first.loss = per_repeat.iter().map(|r| r.loss).sum::<f64>() / n;
            first
        }
    })
}

/// Replaces every layer's running statistics with the plain average of the
/// per-batch mean and variance over one epoch of `plan` on `dataset`.
pub fn freeze_population(network: &mut Network, dataset: &Dataset, plan: &BatchPlan, crop: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Experiment("cannot freeze statistics on an empty dataset".into()));
    }
    let epoch = Sampler::new(plan.clone()).next_epoch(dataset)?;
    let layers = network.batchnorms().len();
    let mut means: Vec<Vec<f64>> = network.batchnorms().iter().map(|b| vec![0.0; b.channels()]).collect();
    let mut vars = means.clone();
    for indices in &epoch {
        let batch = dataset.gather(indices)?;
        let x = center_crop(&batch.images, crop)?;
        let (_, caches) = network.run(&x, BnMode::EvalBatchStats)?;
        let bn_caches: Vec<_> = caches.iter().flat_map(|c| c.batchnorm_caches()).collect();
        debug_assert_eq!(bn_caches.len(), layers);
        for (l, c) in bn_caches.into_iter().enumerate() {
            means[l].iter_mut().zip(&c.mean).for_each(|(a, &v)| *a += v as f64);
            vars[l].iter_mut().zip(&c.var).for_each(|(a, &v)| *a += v as f64);
        }
    }
    let n = epoch.len() as f64;
    for (bn, (m, v)) in network.batchnorms_mut().into_iter().zip(means.iter().zip(&vars)) {
        let m: Vec<f32> = m.iter().map(|x| (x / n) as f32).collect();
        let v: Vec<f32> = v.iter().map(|x| (x / n) as f32).collect();
        bn.set_running(&m, &v)?;
    }
    Ok(())
}
