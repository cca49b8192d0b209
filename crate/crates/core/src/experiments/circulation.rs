use serde::{Deserialize, Serialize};

use super::eval::{eval_standard, predict};
use super::Evaluator;
use crate::batchnorm::BnMode;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::argmax;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VisitorKind {
    /// Misclassified under standard inference.
    Weak,
    /// Correctly classified with confidence at least the threshold.
    Strong,
    /// Explicit test-set indices.
    Index(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitorSpec {
    pub kind: VisitorKind,
    pub count: usize,
}

impl VisitorSpec {
    /// `weak:N`, `strong:N` or `index:I[,J]`, with `N` in `{1, 2}`.
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("visitor spec '{s}' is not KIND:ARG")))?;
        let spec = match kind {
            "weak" | "strong" => {
                let count = arg
                    .parse()
                    .map_err(|_| Error::Config(format!("visitor count '{arg}' is not a number")))?;
                let kind = if kind == "weak" {
                    VisitorKind::Weak
                } else {
                    VisitorKind::Strong
                };
                VisitorSpec { kind, count }
            }
            "index" => {
                let idx = arg
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad visitor index '{v}'")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                VisitorSpec {
                    count: idx.len(),
                    kind: VisitorKind::Index(idx),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown visitor kind '{other}' (weak|strong|index)"
                )))
            }
        };
        if !(1..=2).contains(&spec.count) {
            return Err(Error::Config(format!("{} visitors; expected 1 or 2", spec.count)));
        }
        Ok(spec)
    }

    pub fn describe(&self) -> String {
        match &self.kind {
            VisitorKind::Weak => format!("weak:{}", self.count),
            VisitorKind::Strong => format!("strong:{}", self.count),
            VisitorKind::Index(i) => {
                format!("index:{}", i.iter().map(usize::to_string).collect::<Vec<_>>().join(","))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirculationStep {
    /// Batch positions taken over by the visitors.
    pub positions: Vec<usize>,
    /// Classes of the residents that were removed.
    pub missing_classes: Vec<usize>,
    /// Predicted label of every batch position.
    pub predictions: Vec<usize>,
    pub visitor_predictions: Vec<usize>,
    /// Every visitor was predicted as one of the missing classes.
    pub visitors_in_missing: bool,
    pub visitors_correct: bool,
    /// Every remaining resident kept its own class.
    pub residents_kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CirculationReport {
    pub theta: f64,
    pub visitors_spec: String,
    /// Position `k` holds a confident image of class `k`.
    pub base: Vec<usize>,
    /// Balanced-inference predictions for the unmodified base batch.
    pub base_predictions: Vec<usize>,
    pub visitors: Vec<usize>,
    pub visitor_labels: Vec<usize>,
    /// Standard-inference predictions for the visitors.
    pub visitor_standard_predictions: Vec<usize>,
    pub steps: Vec<CirculationStep>,
    pub missing_class_rate: f64,
    pub visitor_correct_rate: f64,
    pub residents_kept_rate: f64,
}

impl CirculationReport {
    /// Among steps whose residents all kept their classes, the fraction in
    /// which the visitors took the missing classes.
    pub fn missing_rule_rate(&self) -> Option<f64> {
        let eligible: Vec<&CirculationStep> = self.steps.iter().filter(|s| s.residents_kept).collect();
        if eligible.is_empty() {
            return None;
        }
        Some(eligible.iter().filter(|s| s.visitors_in_missing).count() as f64 / eligible.len() as f64)
    }
}

fn fraction(steps: &[CirculationStep], f: impl Fn(&CirculationStep) -> bool) -> f64 {
    steps.iter().filter(|s| f(s)).count() as f64 / steps.len().max(1) as f64
}

fn pick(pool: &[usize], count: usize, rng: &mut Rng, what: &str) -> Result<Vec<usize>> {
    if pool.len() < count {
        return Err(Error::Experiment(format!(
            "need {count} {what} visitor(s), only {} available",
            pool.len()
        )));
    }
    let mut pool = pool.to_vec();
    rng.shuffle(&mut pool);
    Ok(pool[..count].to_vec())
}

/// Circulates visitor images through a balanced batch of confidently
/// recognized images, one position (or adjacent pair of positions) per step.
pub fn circulate(
    ev: &Evaluator,
    test: &Dataset,
    visitors: &VisitorSpec,
    theta: f64,
    rng: &mut Rng,
) -> Result<CirculationReport> {
    let classes = test.classes();
    let standard = eval_standard(ev, test)?;
    let confident = |i: usize| standard.predictions[i] == test.image(i).label && standard.confidence[i] as f64 >= theta;
    let mut base = Vec::with_capacity(classes);
    for (k, members) in test.class_indices().iter().enumerate() {
        let best = members
            .iter()
            .copied()
            .filter(|&i| confident(i))
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if standard.confidence[b] >= standard.confidence[i] => Some(b),
                _ => Some(i),
            })
            .ok_or_else(|| {
                Error::Experiment(format!(
                    "no image of class {k} reaches confidence {theta}; cannot build a base batch"
                ))
            })?;
        base.push(best);
    }
    let base_probs = predict(ev, test, &base, BnMode::EvalBatchStats)?;
    let base_predictions: Vec<usize> = base_probs.data().chunks(classes).map(argmax).collect();

    let chosen = match &visitors.kind {
        VisitorKind::Weak => {
            let pool: Vec<usize> = (0..test.len())
                .filter(|&i| standard.predictions[i] != test.image(i).label)
                .collect();
            pick(&pool, visitors.count, rng, "weak")?
        }
        VisitorKind::Strong => {
            let pool: Vec<usize> = (0..test.len())
                .filter(|&i| confident(i) && !base.contains(&i))
                .collect();
            pick(&pool, visitors.count, rng, "strong")?
        }
        VisitorKind::Index(idx) => {
            if let Some(&bad) = idx.iter().find(|&&i| i >= test.len()) {
                return Err(Error::Experiment(format!("visitor index {bad} out of range")));
            }
            idx.clone()
        }
    };
    let visitor_labels: Vec<usize> = chosen.iter().map(|&i| test.image(i).label).collect();

    let mut steps = Vec::with_capacity(classes);
    for p in 0..classes {
        let positions: Vec<usize> = (0..chosen.len()).map(|j| (p + j) % classes).collect();
        let mut batch = base.clone();
        for (&pos, &v) in positions.iter().zip(&chosen) {
            batch[pos] = v;
        }
        let probs = predict(ev, test, &batch, BnMode::EvalBatchStats)?;
        let predictions: Vec<usize> = probs.data().chunks(classes).map(argmax).collect();
        let visitor_predictions: Vec<usize> = positions.iter().map(|&q| predictions[q]).collect();
        // position k of the base batch holds class k
        let missing_classes = positions.clone();
        let residents_kept = (0..classes)
            .filter(|q| !positions.contains(q))
            .all(|q| predictions[q] == q);
        steps.push(CirculationStep {
            visitors_in_missing: visitor_predictions.iter().all(|v| missing_classes.contains(v)),
            visitors_correct: visitor_predictions == visitor_labels,
            residents_kept,
            positions,
            missing_classes,
            predictions,
            visitor_predictions,
        });
    }
    Ok(CirculationReport {
        theta,
        visitors_spec: visitors.describe(),
        base,
        base_predictions,
        visitor_standard_predictions: chosen.iter().map(|&i| standard.predictions[i]).collect(),
        visitors: chosen,
        visitor_labels,
        missing_class_rate: fraction(&steps, |s| s.visitors_in_missing),
        visitor_correct_rate: fraction(&steps, |s| s.visitors_correct),
        residents_kept_rate: fraction(&steps, |s| s.residents_kept),
        steps,
    })
}
