//! Command-line front end: `train`, `eval`, `circulate`, `rebalance`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure,
//! 3 gradient check failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::batchnorm::{bn_backward, BnBackwardFn};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RawConfig, RunConfig};
use crate::error::{Error, Result};
use crate::experiments::{
    circulate, eval_balanced, eval_standard, output_path, rebalance_iterate, train, write_json, write_metrics_csv,
    CirculationReport, Evaluator, Protocol,
};
use crate::gradcheck::{self, GradcheckOptions, GradcheckReport};
use crate::model::Network;
use crate::rng::Rng;
use crate::tensor::set_exec_mode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

pub const CONDITIONAL_WARNING: &str = "warning: balanced-batch results are CONDITIONAL: test batches were grouped using ground-truth labels, which a deployed classifier does not have";

#[derive(Debug, Parser)]
#[command(
    name = "batchlens",
    version,
    about = "Batch-normalization experiments on balanced batches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write metrics, checkpoint and resolved config.
    Train(Common),
    /// Evaluate a checkpoint under one inference protocol.
    Eval(Common),
    /// Circulate visitor images through a confident balanced batch.
    Circulate(Common),
    /// Iteratively rebalance test batches by predicted labels.
    Rebalance(Common),
    /// Finite-difference check of every backward pass.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// random | balanced
    #[arg(long)]
    train_plan: Option<String>,
    /// Comma-separated protocols: standard, balanced, shuffled_balanced.
    #[arg(long)]
    eval: Option<String>,
    /// Protocol for `eval`.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    /// weak:N, strong:N or index:I[,J]
    #[arg(long)]
    visitors: Option<String>,
    /// deterministic | fast
    #[arg(long)]
    mode: Option<String>,
    /// Any other config key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut raw = RawConfig::default();
        if let Some(path) = &self.config {
            raw.merge_file(path)?;
        }
        let path_str = |p: &PathBuf| p.display().to_string();
        let overrides = [
            ("seed", self.seed.map(|s| s.to_string())),
            ("data_dir", self.data_dir.as_ref().map(path_str)),
            ("out_dir", self.out_dir.as_ref().map(path_str)),
            ("checkpoint", self.checkpoint.as_ref().map(path_str)),
            ("train_plan", self.train_plan.clone()),
            ("eval", self.eval.clone()),
            ("protocol", self.protocol.clone()),
            ("iterations", self.iterations.map(|n| n.to_string())),
            ("visitors", self.visitors.clone()),
            ("mode", self.mode.clone()),
        ];
        for (k, v) in overrides {
            if let Some(v) = v {
                raw.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            raw.set(k.trim(), v.trim())?;
        }
        RunConfig::from_raw(raw)
    }
}

type Handler = fn(&RunConfig, &mut dyn Write) -> Result<i32>;

/// Parses `args` (including the program name), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = write!(out, "{e}");
            return code;
        }
    };
    let (common, cmd): (&Common, Handler) = match &cli.command {
        Command::Train(c) => (c, cmd_train),
        Command::Eval(c) => (c, cmd_eval),
        Command::Circulate(c) => (c, cmd_circulate),
        Command::Rebalance(c) => (c, cmd_rebalance),
        Command::Gradcheck(c) => (c, cmd_gradcheck),
    };
    let outcome = common.resolve().and_then(|cfg| {
        set_exec_mode(cfg.mode);
        write_resolved(&cfg)?;
        cmd(&cfg, out)
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::Experiment(format!("cannot write output: {e}"))
}

fn write_resolved(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let path = output_path(&cfg.out_dir, &cfg.experiment.run_name, "config.resolved");
    fs::write(&path, cfg.resolved()).map_err(|e| Error::io(&path, e))
}

fn print_table(out: &mut dyn Write, plan: &str, rows: &[(Protocol, f64)]) -> Result<()> {
    writeln!(out, "{:<12} {:<20} {:>9}", "training", "testing", "error").map_err(io_err)?;
    for (p, err) in rows {
        writeln!(out, "{:<12} {:<20} {:>8.2}%", plan, p.name(), 100.0 * err).map_err(io_err)?;
    }
    if rows.iter().any(|(p, _)| p.conditional()) {
        writeln!(out, "{CONDITIONAL_WARNING}").map_err(io_err)?;
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let exp = &cfg.experiment;
    let (train_set, test_set) = exp.dataset.load()?;
    let outcome = train(exp, &train_set, &test_set)?;
    write_metrics_csv(&outcome.rows, &output_path(&cfg.out_dir, &exp.run_name, "metrics.csv"))?;
    if let Some((epoch, loss)) = outcome.diverged {
        return Err(Error::Diverged { epoch, loss });
    }
    save_checkpoint(&outcome.network, &cfg.checkpoint)?;
    print_table(out, exp.train_plan.name(), &outcome.final_errors)?;
    writeln!(out, "checkpoint: {}", cfg.checkpoint.display()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn load(cfg: &RunConfig) -> Result<(Network, crate::data::Dataset)> {
    let spec = cfg.experiment.model_spec()?;
    let network = load_checkpoint(&cfg.checkpoint, &spec)?;
    let (_, test) = cfg.experiment.dataset.load()?;
    Ok((network, test))
}

#[derive(Serialize)]
struct EvalReport<'a> {
    protocol: &'a str,
    conditional: bool,
    error_rate: f64,
    loss: f64,
    predictions: &'a [usize],
}

fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (network, test) = load(cfg)?;
    let ev = Evaluator {
        crop: network.spec.input[1],
        network: &network,
    };
    let exp = &cfg.experiment;
    let mut rng = Rng::new(exp.seed).fork(0xe7a1);
    let result = match cfg.protocol {
        Protocol::Standard => eval_standard(&ev, &test)?,
        Protocol::BalancedBatch => eval_balanced(&ev, &test, false, &mut rng, 1, exp.shuffle_vote)?,
        Protocol::ShuffledBalancedBatch => {
            eval_balanced(&ev, &test, true, &mut rng, exp.shuffled_repeats, exp.shuffle_vote)?
        }
    };
    let report = EvalReport {
        protocol: cfg.protocol.name(),
        conditional: cfg.protocol.conditional(),
        error_rate: result.error_rate,
        loss: result.loss,
        predictions: &result.predictions,
    };
    write_json(&report, &output_path(&cfg.out_dir, &exp.run_name, "eval.json"))?;
    print_table(out, "checkpoint", &[(cfg.protocol, result.error_rate)])?;
    Ok(EXIT_OK)
}

/// One column per step, one row per batch position; visitor cells are starred.
pub fn circulation_grid(report: &CirculationReport) -> String {
    let mut s = String::from("pos |");
    for i in 0..report.steps.len() {
        s.push_str(&format!(" {i:>3}"));
    }
    s.push('\n');
    for pos in 0..report.base.len() {
        s.push_str(&format!("{pos:>3} |"));
        for step in &report.steps {
            let mark = if step.positions.contains(&pos) { '*' } else { ' ' };
            s.push_str(&format!(" {:>2}{mark}", step.predictions[pos]));
        }
        s.push('\n');
    }
    s
}

fn cmd_circulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (network, test) = load(cfg)?;
    let ev = Evaluator {
        crop: network.spec.input[1],
        network: &network,
    };
    let mut rng = Rng::new(cfg.experiment.seed).fork(0xc1c);
    let report = circulate(&ev, &test, &cfg.visitors, cfg.theta, &mut rng)?;
    write_json(
        &report,
        &output_path(&cfg.out_dir, &cfg.experiment.run_name, "circulation.json"),
    )?;
    let w = |out: &mut dyn Write, s: String| writeln!(out, "{s}").map_err(io_err);
    w(
        out,
        format!(
            "visitors {:?} (true {:?}, standard {:?})",
            report.visitors, report.visitor_labels, report.visitor_standard_predictions
        ),
    )?;
    w(out, circulation_grid(&report))?;
    w(
        out,
        format!(
            "missing-class rate {:.2}  visitor-correct rate {:.2}  residents-kept rate {:.2}",
            report.missing_class_rate, report.visitor_correct_rate, report.residents_kept_rate
        ),
    )?;
    w(out, CONDITIONAL_WARNING.to_string())?;
    Ok(EXIT_OK)
}

fn cmd_rebalance(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let (network, test) = load(cfg)?;
    let ev = Evaluator {
        crop: network.spec.input[1],
        network: &network,
    };
    let mut rng = Rng::new(cfg.experiment.seed).fork(0x4eba);
    let report = rebalance_iterate(&ev, &test, cfg.iterations, &mut rng)?;
    write_json(
        &report,
        &output_path(&cfg.out_dir, &cfg.experiment.run_name, "rebalance.json"),
    )?;
    writeln!(out, "{:>9} {:>9} {:>8}", "iteration", "error", "changed").map_err(io_err)?;
    for r in &report.rows {
        writeln!(
            out,
            "{:>9} {:>8.2}% {:>8}",
            r.iteration,
            100.0 * r.error_rate,
            r.changed
        )
        .map_err(io_err)?;
    }
    if let Some(k) = report.fixed_point {
        writeln!(out, "fixed point reached at iteration {k}").map_err(io_err)?;
    }
    Ok(EXIT_OK)
}

/// Prints one line per check and maps the outcome to an exit code.
pub fn report_gradcheck(report: &GradcheckReport, out: &mut dyn Write) -> Result<i32> {
    for c in &report.checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<20} max rel error {:.3e}  (tol {:.0e})  {verdict}",
            c.name, c.max_rel_error, c.tolerance
        )
        .map_err(io_err)?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        writeln!(out, "all {} checks passed", report.checks.len()).map_err(io_err)?;
        Ok(EXIT_OK)
    } else {
        let names: Vec<&str> = failures.iter().map(|c| c.name.as_str()).collect();
        writeln!(out, "failed: {}", names.join(", ")).map_err(io_err)?;
        Ok(EXIT_GRADCHECK)
    }
}

/// The gradcheck subcommand with a replaceable batch-norm backward.
pub fn gradcheck_with(seed: u64, bn: BnBackwardFn<f64>, out: &mut dyn Write) -> Result<i32> {
    let report = gradcheck::run_with(&GradcheckOptions { seed, instances: 5 }, bn)?;
    report_gradcheck(&report, out)
}

fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    gradcheck_with(cfg.experiment.seed, bn_backward::<f64>, out)
}
