//! Training under a batch plan, the inference protocols, the circulation and
//! self-rebalancing experiments, and their reports.

mod circulation;
mod eval;
mod rebalance;
mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use circulation::{circulate, CirculationReport, CirculationStep, VisitorKind, VisitorSpec};
pub use eval::{
    balanced_groups, eval_balanced, eval_standard, freeze_population, predict, EvalResult, ShuffleVote, EVAL_BATCH,
};
pub use rebalance::{rebalance_iterate, semi_balanced_groups, RebalanceReport, RebalanceRow};
pub use report::{metrics_csv, parse_metrics_csv, write_json, write_metrics_csv, MetricsRow};

use crate::batchnorm::BnMode;
use crate::data::{self, augment, AugmentConfig, BatchPlan, Dataset, Sampler, SyntheticSpec};
use crate::error::{Error, Result};
use crate::layers::{argmax, softmax_xent};
use crate::model::{ModelSpec, Network};
use crate::optim::{LrSchedule, Optimizer, OptimizerKind};
use crate::rng::Rng;
use crate::tensor::{exec_mode, ExecMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainPlan {
    Random,
    Balanced,
}

impl TrainPlan {
    pub fn name(self) -> &'static str {
        match self {
            TrainPlan::Random => "random",
            TrainPlan::Balanced => "balanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(TrainPlan::Random),
            "balanced" => Ok(TrainPlan::Balanced),
            other => Err(Error::Config(format!("unknown train plan '{other}' (random|balanced)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    Standard,
    BalancedBatch,
    ShuffledBalancedBatch,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [
        Protocol::Standard,
        Protocol::BalancedBatch,
        Protocol::ShuffledBalancedBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Standard => "standard",
            Protocol::BalancedBatch => "balanced",
            Protocol::ShuffledBalancedBatch => "shuffled_balanced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Protocol::Standard),
            "balanced" => Ok(Protocol::BalancedBatch),
            "shuffled_balanced" | "shuffled" => Ok(Protocol::ShuffledBalancedBatch),
            other => Err(Error::Config(format!(
                "unknown protocol '{other}' (standard|balanced|shuffled_balanced)"
            ))),
        }
    }

    pub fn conditional(self) -> bool {
        self != Protocol::Standard
    }
}

/// How population statistics for standard inference are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PopulationStats {
    /// Running averages accumulated during training.
    Ema,
    /// Average of per-batch statistics over one pass of the training set.
    FullPass,
}

impl PopulationStats {
    pub fn name(self) -> &'static str {
        match self {
            PopulationStats::Ema => "ema",
            PopulationStats::FullPass => "full_pass",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ema" => Ok(PopulationStats::Ema),
            "full_pass" | "fullpass" => Ok(PopulationStats::FullPass),
            other => Err(Error::Config(format!(
                "unknown population strategy '{other}' (ema|full_pass)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    /// CIFAR-10 binaries; `None` means the directory comes from the environment.
    Cifar10 {
        dir: Option<PathBuf>,
    },
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic(s) => s.classes,
            DatasetSpec::Cifar10 { .. } => 10,
        }
    }

    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic(s) => s.generate(),
            DatasetSpec::Cifar10 { dir } => {
                let dir = dir
                    .as_deref()
                    .ok_or_else(|| Error::Config("CIFAR-10 needs a data directory".into()))?;
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "data directory {} does not exist",
                        dir.display()
                    )));
                }
                let (train, test, _) = data::load_cifar10(dir)?;
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub model: String,
    pub dataset: DatasetSpec,
    pub train_plan: TrainPlan,
    /// Random-plan batch size; balanced batches always hold one image per class.
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub eval: Vec<Protocol>,
    pub population: PopulationStats,
    pub bn_momentum: f64,
    pub eval_every: usize,
    pub shuffled_repeats: usize,
    pub shuffle_vote: ShuffleVote,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.shuffled_repeats == 0 {
            return Err(Error::Config("shuffled_repeats must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum {} outside (0, 1)",
                self.bn_momentum
            )));
        }
        self.model_spec()?;
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let input = match &self.dataset {
            DatasetSpec::Synthetic(s) => Some([s.channels, s.size, s.size]),
            DatasetSpec::Cifar10 { .. } => None,
        };
        ModelSpec::named(&self.model, self.dataset.classes(), input)
    }

    pub fn plan(&self, classes: usize) -> BatchPlan {
        let seed = Rng::new(self.seed).fork(1).next_u64();
        match self.train_plan {
            TrainPlan::Random => BatchPlan::random(self.batch_size, seed),
            TrainPlan::Balanced => BatchPlan::balanced(classes, seed),
        }
    }
}

/// A network with frozen parameters ready for one of the inference protocols.
pub struct Evaluator<'a> {
    pub network: &'a Network,
    /// Side length images are center-cropped to.
    pub crop: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub rows: Vec<MetricsRow>,
    /// Final error per requested protocol.
    pub final_errors: Vec<(Protocol, f64)>,
    /// Set when training stopped on a non-finite loss.
    pub diverged: Option<(usize, f64)>,
}

fn elapsed(start: Instant) -> f64 {
    // wall time would break byte-identical reports in deterministic mode
    match exec_mode() {
        ExecMode::Deterministic => 0.0,
        ExecMode::Fast => start.elapsed().as_secs_f64(),
    }
}

/// Runs every requested protocol on a snapshot of `network`.
pub fn evaluate_protocols(
    network: &Network,
    config: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
    epoch: usize,
) -> Result<Vec<(Protocol, EvalResult)>> {
    let crop = network.spec.input[1];
    let mut snapshot = network.clone();
    if config.population == PopulationStats::FullPass && config.eval.contains(&Protocol::Standard) {
        freeze_population(&mut snapshot, train, &config.plan(train.classes()), crop)?;
    }
    let ev = Evaluator {
        network: &snapshot,
        crop,
    };
    let mut out = Vec::new();
    for &p in &config.eval {
        let mut rng = Rng::new(config.seed).fork(1000 + epoch as u64);
        let r = match p {
            Protocol::Standard => eval_standard(&ev, test)?,
            Protocol::BalancedBatch => eval_balanced(&ev, test, false, &mut rng, 1, config.shuffle_vote)?,
            Protocol::ShuffledBalancedBatch => {
                eval_balanced(&ev, test, true, &mut rng, config.shuffled_repeats, config.shuffle_vote)?
            }
        };
        out.push((p, r));
    }
    Ok(out)
}

/// Trains a fresh network according to `config`, evaluating every `eval_every` epochs.
pub fn train(config: &ExperimentConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    let spec = config.model_spec()?;
    let classes = train_set.classes();
    if classes != spec.classes || test_set.classes() != classes {
        return Err(Error::Experiment(format!(
            "model has {} classes, data has {classes}/{}",
            spec.classes,
            test_set.classes()
        )));
    }
    if config.eval.iter().any(|p| p.conditional()) {
        if let Some(k) = test_set.class_indices().iter().position(Vec::is_empty) {
            return Err(Error::Experiment(format!(
                "balanced evaluation needs test images of class {k}"
            )));
        }
    }
    let root = Rng::new(config.seed);
    let mut network = Network::build(&spec, &mut root.fork(0))?;
    for bn in network.batchnorms_mut() {
        bn.momentum = config.bn_momentum as f32;
    }
    let opt_cfg = &config.optimizer;
    let mut optimizer = Optimizer::new(opt_cfg.kind, opt_cfg.schedule.lr_at(0), opt_cfg.weight_decay)?;
    let plan = config.plan(classes);
    let mut sampler = Sampler::new(plan.clone());
    let mut aug_rng = root.fork(2);
    let crop = spec.input[1];
    let aug = AugmentConfig {
        crop: Some(crop),
        ..config.augment.clone()
    };

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut final_errors = Vec::new();
    for epoch in 1..=config.epochs {
        optimizer.lr = opt_cfg.schedule.lr_at(epoch - 1);
        let (mut loss_sum, mut wrong, mut seen) = (0f64, 0usize, 0usize);
        for indices in sampler.next_epoch(train_set)? {
            let batch = train_set.gather(&indices)?;
            if config.train_plan == TrainPlan::Balanced {
                let mut labels = batch.labels.clone();
                labels.sort_unstable();
                if labels != (0..classes).collect::<Vec<_>>() {
                    return Err(Error::Experiment(format!("unbalanced training batch {labels:?}")));
                }
            }
            let x = augment(&batch.images, &mut aug_rng, &aug)?;
            let (logits, caches) = network.forward(&x, BnMode::Train)?;
            let xent = softmax_xent(&logits, &batch.labels)?;
            let loss = xent.loss as f64;
            if !loss.is_finite() {
                rows.push(MetricsRow {
                    epoch,
                    protocol: "diverged".into(),
                    error_rate: 1.0,
                    loss,
                    seconds: elapsed(start),
                });
                return Ok(TrainOutcome {
                    network,
                    rows,
                    final_errors,
                    diverged: Some((epoch, loss)),
                });
            }
            loss_sum += loss * batch.labels.len() as f64;
            seen += batch.labels.len();
            let c = logits.dims()[1];
            wrong += logits
                .data()
                .chunks(c)
                .zip(&batch.labels)
                .filter(|(row, &l)| argmax(row) != l)
                .count();
            let grads = network.backward(&caches, &xent.grad)?;
            optimizer.step(network.params_mut(), &grads)?;
        }
        rows.push(MetricsRow {
            epoch,
            protocol: "train".into(),
            error_rate: wrong as f64 / seen.max(1) as f64,
            loss: loss_sum / seen.max(1) as f64,
            seconds: elapsed(start),
        });
        log::info!("epoch {epoch}: train error {:.4}", wrong as f64 / seen.max(1) as f64);
        if epoch % config.eval_every == 0 || epoch == config.epochs {
            let results = evaluate_protocols(&network, config, train_set, test_set, epoch)?;
            final_errors = results.iter().map(|(p, r)| (*p, r.error_rate)).collect();
            for (p, r) in results {
                rows.push(MetricsRow {
                    epoch,
                    protocol: p.name().into(),
                    error_rate: r.error_rate,
                    loss: r.loss,
                    seconds: elapsed(start),
                });
            }
        }
    }
    if config.population == PopulationStats::FullPass {
        freeze_population(&mut network, train_set, &plan, crop)?;
    }
    Ok(TrainOutcome {
        network,
        rows,
        final_errors,
        diverged: None,
    })
}

/// `<out_dir>/<run>.<suffix>`
pub fn output_path(out_dir: &Path, run: &str, suffix: &str) -> PathBuf {
    out_dir.join(format!("{run}.{suffix}"))
}
