use serde::{Deserialize, Serialize};

use super::eval::{eval_standard, predict};
use super::Evaluator;
use crate::batchnorm::BnMode;
use crate::data::Dataset;
use crate::error::Result;
use crate::layers::argmax;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceRow {
    pub iteration: usize,
    pub error_rate: f64,
    /// Labels that differ from the previous iteration.
    pub changed: usize,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceReport {
    /// Row 0 holds the standard-inference labels.
    pub rows: Vec<RebalanceRow>,
    /// Iteration that reproduced its predecessor's labels, if the loop stopped early.
    pub fixed_point: Option<usize>,
}

impl RebalanceReport {
    pub fn initial_error(&self) -> f64 {
        self.rows[0].error_rate
    }

    pub fn final_error(&self) -> f64 {
        self.rows.last().expect("at least iteration 0").error_rate
    }

    /// Error after `iteration` passes; past a fixed point the last value repeats.
    pub fn error_at(&self, iteration: usize) -> f64 {
        self.rows
            .get(iteration)
            .map_or_else(|| self.final_error(), |r| r.error_rate)
    }
}

/// Groups images into batches balanced by (predicted) `labels`.
///
/// Each batch first takes one image from every non-empty bucket; while it
/// holds fewer than `classes` images it is topped up from the largest
/// remaining buckets, so over-represented predicted classes spill into
/// batches alongside whatever classes are left.
pub fn semi_balanced_groups(labels: &[usize], classes: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut buckets = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        buckets[l].push(i);
    }
    buckets.iter_mut().for_each(|b| rng.shuffle(b));
    let mut out = Vec::new();
    while buckets.iter().any(|b| !b.is_empty()) {
        let mut batch: Vec<usize> = buckets.iter_mut().filter_map(Vec::pop).collect();
        while batch.len() < classes {
            let Some(fullest) = (0..classes)
                .filter(|&k| !buckets[k].is_empty())
                .max_by_key(|&k| (buckets[k].len(), classes - k))
            else {
                break;
            };
            batch.push(buckets[fullest].pop().expect("non-empty bucket"));
        }
        rng.shuffle(&mut batch);
        out.push(batch);
    }
    out
}

fn error_rate(labels: &[usize], truth: &[usize]) -> f64 {
    labels.iter().zip(truth).filter(|(a, b)| a != b).count() as f64 / truth.len().max(1) as f64
}

/// Repeatedly balances test batches using the current predicted labels and
/// relabels every image with batch-statistics inference.
///
/// Produces up to `iterations + 1` rows; stops once an iteration leaves every
/// label unchanged.
pub fn rebalance_iterate(ev: &Evaluator, test: &Dataset, iterations: usize, rng: &mut Rng) -> Result<RebalanceReport> {
    let truth = test.labels();
    let classes = test.classes();
    let standard = eval_standard(ev, test)?;
    let mut rows = vec![RebalanceRow {
        iteration: 0,
        error_rate: standard.error_rate,
        changed: 0,
        labels: standard.predictions,
    }];
    let mut fixed_point = None;
    for iteration in 1..=iterations {
        let current = &rows.last().expect("row 0").labels;
        let mut next = vec![0; test.len()];
        for batch in semi_balanced_groups(current, classes, rng) {
            let probs = predict(ev, test, &batch, BnMode::EvalBatchStats)?;
            for (&i, row) in batch.iter().zip(probs.data().chunks(classes)) {
                next[i] = argmax(row);
            }
        }
        let changed = next.iter().zip(current).filter(|(a, b)| a != b).count();
        rows.push(RebalanceRow {
            iteration,
            error_rate: error_rate(&next, &truth),
            changed,
            labels: next,
        });
        if changed == 0 {
            fixed_point = Some(iteration);
            break;
        }
    }
    Ok(RebalanceReport { rows, fixed_point })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_labels_give_balanced_groups() {
        let labels: Vec<usize> = (0..30).map(|i| i % 10).collect();
        let groups = semi_balanced_groups(&labels, 10, &mut Rng::new(1));
        assert_eq!(groups.len(), 3);
        for g in &groups {
            let mut l: Vec<usize> = g.iter().map(|&i| labels[i]).collect();
            l.sort();
            assert_eq!(l, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn skewed_labels_spill_but_cover_everything_once() {
        let labels = vec![0, 0, 0, 0, 0, 1, 2, 2];
        let groups = semi_balanced_groups(&labels, 3, &mut Rng::new(2));
        let mut all: Vec<usize> = groups.concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert!(groups.iter().all(|g| g.len() <= 3));
        // first batch still has one image of every predicted class
        let mut first: Vec<usize> = groups[0].iter().map(|&i| labels[i]).collect();
        first.sort();
        assert_eq!(first, vec![0, 1, 2]);
    }
}
