//! Flat `key = value` run configuration.
//!
//! One pair per line, `#` starts a comment, unknown keys are rejected. Every
//! key has a default; files and command-line overrides are layered on top and
//! the merged result can be written back out with [`RunConfig::resolved`].

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{AugmentConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::experiments::{
    DatasetSpec, ExperimentConfig, OptimizerConfig, PopulationStats, Protocol, ShuffleVote, TrainPlan, VisitorSpec,
};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::tensor::ExecMode;

pub const DATA_DIR_ENV: &str = "BATCHLENS_DATA_DIR";

/// Every accepted key with its default value.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("augment", "false"),
    ("batch_size", "0"),
    ("bn_momentum", "0.99"),
    ("brightness", "0.1"),
    ("channels", "3"),
    ("checkpoint", ""),
    ("classes", "10"),
    ("data_dir", ""),
    ("data_seed", "0"),
    ("dataset", "synthetic"),
    ("epochs", "30"),
    ("eval", "standard,balanced"),
    ("eval_every", "5"),
    ("flip", "true"),
    ("iterations", "20"),
    ("lr", "0.05"),
    ("lr_schedule", "step"),
    ("mode", "deterministic"),
    ("model", "toy-6"),
    ("momentum", "0.9"),
    ("noise", "1.0"),
    ("optimizer", "sgd"),
    ("out_dir", "out"),
    ("population", "ema"),
    ("protocol", "balanced"),
    ("run_name", "run"),
    ("seed", "0"),
    ("shuffle_vote", "mean_probability"),
    ("shuffled_repeats", "8"),
    ("size", "12"),
    ("test_per_class", "50"),
    ("theta", "0.99"),
    ("train_per_class", "100"),
    ("train_plan", "balanced"),
    ("visitors", "weak:1"),
    ("weight_decay", "0.0001"),
];

/// Merged key/value pairs, before interpretation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key '{key}'"))),
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key from DEFAULTS")
    }

    /// Applies the pairs in `text` on top of the current values.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    /// All pairs, sorted by key, in the file format.
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let v = self.get(key);
        if v.is_empty() {
            return Ok(None);
        }
        std::path::absolute(v)
            .map(Some)
            .map_err(|e| Error::Config(format!("cannot resolve {key} '{v}': {e}")))
    }
}

fn parse_schedule(spec: &str, lr: f64, epochs: usize) -> Result<LrSchedule> {
    match spec {
        "step" => LrSchedule::step_decay(lr, epochs),
        "constant" => LrSchedule::constant(lr),
        list => {
            let steps = list
                .split(',')
                .map(|pair| {
                    let (e, v) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::Config(format!("schedule entry '{pair}' is not EPOCH:LR")))?;
                    let e = e
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad epoch in '{pair}'")))?;
                    let v = v
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad lr in '{pair}'")))?;
                    Ok((e, v))
                })
                .collect::<Result<Vec<_>>>()?;
            LrSchedule::new(steps).map_err(|e| Error::Config(e.to_string()))
        }
    }
}

/// A fully interpreted run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub raw: RawConfig,
    pub experiment: ExperimentConfig,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub mode: ExecMode,
    pub protocol: Protocol,
    pub iterations: usize,
    pub visitors: VisitorSpec,
    pub theta: f64,
}

impl RunConfig {
    pub fn from_raw(mut raw: RawConfig) -> Result<Self> {
        // the environment only fills an unset data directory; the resolved
        // file then records the actual path
        if raw.get("data_dir").is_empty() {
            if let Ok(dir) = env::var(DATA_DIR_ENV) {
                raw.set("data_dir", &dir)?;
            }
        }
        let epochs: usize = raw.parse("epochs")?;
        let classes: usize = raw.parse("classes")?;
        let data_dir = raw.path("data_dir")?;
        if let Some(d) = &data_dir {
            raw.set("data_dir", &d.display().to_string())?;
        }
        let dataset = match raw.get("dataset") {
            "synthetic" => DatasetSpec::Synthetic(SyntheticSpec {
                classes,
                train_per_class: raw.parse("train_per_class")?,
                test_per_class: raw.parse("test_per_class")?,
                channels: raw.parse("channels")?,
                size: raw.parse("size")?,
                noise: raw.parse("noise")?,
                seed: raw.parse("data_seed")?,
            }),
            "cifar10" => {
                let dir = data_dir
                    .clone()
                    .ok_or_else(|| Error::Config(format!("dataset cifar10 needs data_dir (or {DATA_DIR_ENV})")))?;
                if !dir.is_dir() {
                    return Err(Error::Config(format!(
                        "data directory {} does not exist",
                        dir.display()
                    )));
                }
                DatasetSpec::Cifar10 { dir: Some(dir) }
            }
            other => return Err(Error::Config(format!("unknown dataset '{other}' (synthetic|cifar10)"))),
        };
        let kind = match raw.get("optimizer") {
            "sgd" => OptimizerKind::Sgd {
                momentum: raw.parse("momentum")?,
            },
            "rmsprop" => OptimizerKind::rmsprop(),
            other => return Err(Error::Config(format!("unknown optimizer '{other}' (sgd|rmsprop)"))),
        };
        let lr: f64 = raw.parse("lr")?;
        let eval = raw
            .get("eval")
            .split(',')
            .map(|p| Protocol::parse(p.trim()))
            .collect::<Result<Vec<_>>>()?;
        let batch_size: usize = raw.parse("batch_size")?;
        let experiment = ExperimentConfig {
            run_name: raw.get("run_name").to_string(),
            model: raw.get("model").to_string(),
            batch_size: if batch_size == 0 { dataset.classes() } else { batch_size },
            dataset,
            train_plan: TrainPlan::parse(raw.get("train_plan"))?,
            epochs,
            optimizer: OptimizerConfig {
                kind,
                schedule: parse_schedule(raw.get("lr_schedule"), lr, epochs)?,
                weight_decay: raw.parse("weight_decay")?,
            },
            eval,
            population: PopulationStats::parse(raw.get("population"))?,
            bn_momentum: raw.parse("bn_momentum")?,
            eval_every: raw.parse("eval_every")?,
            shuffled_repeats: raw.parse("shuffled_repeats")?,
            shuffle_vote: ShuffleVote::parse(raw.get("shuffle_vote"))?,
            augment: AugmentConfig {
                enabled: raw.flag("augment")?,
                crop: None,
                flip: raw.flag("flip")?,
                brightness: raw.parse("brightness")?,
            },
            seed: raw.parse("seed")?,
        };
        experiment.validate()?;
        let out_dir = raw.path("out_dir")?.unwrap_or_else(|| PathBuf::from("."));
        raw.set("out_dir", &out_dir.display().to_string())?;
        let checkpoint = match raw.path("checkpoint")? {
            Some(p) => p,
            None => out_dir.join(format!("{}.ckpt", experiment.run_name)),
        };
        raw.set("checkpoint", &checkpoint.display().to_string())?;
        let mode = match raw.get("mode") {
            "deterministic" => ExecMode::Deterministic,
            "fast" => ExecMode::Fast,
            other => return Err(Error::Config(format!("unknown mode '{other}' (deterministic|fast)"))),
        };
        let theta: f64 = raw.parse("theta")?;
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::Config(format!("theta {theta} outside [0, 1]")));
        }
        Ok(RunConfig {
            protocol: Protocol::parse(raw.get("protocol"))?,
            iterations: raw.parse("iterations")?,
            visitors: VisitorSpec::parse(raw.get("visitors"))?,
            theta,
            experiment,
            out_dir,
            checkpoint,
            mode,
            raw,
        })
    }

    /// The merged configuration in file format; loading it reproduces this run.
    pub fn resolved(&self) -> String {
        self.raw.to_text()
    }
}
