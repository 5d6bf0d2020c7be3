//! Command-line front end: subcommand dispatch, config assembly from file
//! plus overrides, and plot-data emission. All heavy lifting lives in the
//! library; this file is argv plumbing and small text reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use euclid::config::Config;
use euclid::orchestrator::{self, METRICS_HEADER};

/// Print a status line, swallowing broken-pipe errors so that piping the
/// output through tools like `head` does not turn into a panic.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "euclid",
    version,
    about = "Reward-free pre-training of latent dynamics models, then planning-based fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every run-producing subcommand.
#[derive(Args)]
struct RunArgs {
    /// Config file with `key = value` lines; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run seed; every random draw in the run derives from it.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,

    /// Environment name (pointmass, pendulum, twomode).
    #[arg(long, value_name = "NAME")]
    env: Option<String>,

    /// Downstream task name.
    #[arg(long, value_name = "NAME")]
    task: Option<String>,

    /// Intrinsic explorer (disagreement, apt, diayn).
    #[arg(long, value_name = "NAME")]
    explorer: Option<String>,

    /// Single config override, repeatable. Applied after the config file,
    /// before the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Reward-free pre-training; writes pt.ckpt and metrics.csv under --out.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory, created if absent.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Override the pre-training step budget.
        #[arg(long, value_name = "INT")]
        steps: Option<u64>,
    },
    /// Fine-tune from a pre-training checkpoint; writes ft.ckpt and
    /// metrics.csv under --out.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Pre-training checkpoint to start from.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Override the fine-tuning step budget.
        #[arg(long, value_name = "INT")]
        steps: Option<u64>,
    },
    /// Run planning-based evaluation episodes from a checkpoint.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Where to write eval.csv; stdout-only when omitted.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Episode count; defaults to the config's eval_episodes.
        #[arg(long, value_name = "INT")]
        episodes: Option<usize>,
    },
    /// Report zero-shot head selection for a checkpoint on one task.
    SelectHead {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Where to write selection.csv; stdout-only when omitted.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics CSVs into per-task curve data plus a render script.
    Plot {
        /// Metrics file, repeatable; one per run/seed.
        #[arg(long, value_name = "PATH", required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

/// Failures split by exit code: 1 for bad invocations, 2 for runtime errors.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version land here too; they are not failures.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Assemble the effective config: file, then --set pairs, then named flags.
fn build_config(run: &RunArgs) -> Result<Config, Failure> {
    let mut config = match &run.config {
        Some(path) => Config::from_file(path)
            .map_err(|e| Failure::Usage(format!("--config {}: {e}", path.display())))?,
        None => Config::default(),
    };
    for pair in &run.set {
        let Some((key, value)) = pair.split_once('=') else {
            return Err(Failure::Usage(format!("--set `{pair}` is not of the form key=value")));
        };
        config
            .apply(key.trim(), value.trim())
            .map_err(|e| Failure::Usage(format!("--set `{pair}`: {e}")))?;
    }
    if let Some(seed) = run.seed {
        config.seed = seed;
    }
    if let Some(env) = &run.env {
        config.env = env.clone();
    }
    if let Some(task) = &run.task {
        config.task = task.clone();
    }
    if let Some(explorer) = &run.explorer {
        config.explorer = explorer.clone();
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Pretrain { run, out, steps } => {
            let mut config = build_config(&run)?;
            if let Some(steps) = steps {
                config.pt_steps = steps;
            }
            let outcome = orchestrator::pretrain(&config, &out).context("pretrain failed")?;
            say!(
                "pretrain done: {} env steps, checkpoint {}, metrics {}",
                outcome.env_steps,
                outcome.checkpoint.display(),
                outcome.metrics.display()
            );
            Ok(())
        }
        Command::Finetune { run, checkpoint, out, steps } => {
            let mut config = build_config(&run)?;
            if let Some(steps) = steps {
                config.ft_steps = steps;
            }
            let outcome = orchestrator::finetune(&config, &checkpoint, &out)
                .context("finetune failed")?;
            let zero_shot = outcome
                .zero_shot_returns
                .iter()
                .map(|r| format!("{r:.3}"))
                .collect::<Vec<_>>()
                .join(", ");
            say!(
                "finetune done: task {}, selected head {} (zero-shot returns [{zero_shot}]), \
                 {} episodes, final return {:.3}",
                config.task,
                outcome.selected_head,
                outcome.episode_returns.len(),
                outcome.final_return
            );
            say!(
                "checkpoint {}, metrics {}",
                outcome.checkpoint.display(),
                outcome.metrics.display()
            );
            Ok(())
        }
        Command::Evaluate { run, checkpoint, out, episodes } => {
            let config = build_config(&run)?;
            let episodes = episodes.unwrap_or(config.eval_episodes);
            let report = orchestrator::evaluate(&config, &checkpoint, episodes)
                .context("evaluate failed")?;
            say!(
                "evaluate: task {}, {} episodes, return {:.3} +/- {:.3}",
                config.task,
                report.returns.len(),
                report.mean,
                report.ci_half
            );
            if let Some(out) = out {
                std::fs::create_dir_all(&out).context("cannot create --out")?;
                let mut text = String::from("episode,return\n");
                for (i, r) in report.returns.iter().enumerate() {
                    let _ = writeln!(text, "{i},{r}");
                }
                let path = out.join("eval.csv");
                std::fs::write(&path, text).context("cannot write eval.csv")?;
                say!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::SelectHead { run, checkpoint, out } => {
            let config = build_config(&run)?;
            let report = orchestrator::head_selection(&config, &checkpoint)
                .context("head selection failed")?;
            for (h, r) in report.returns.iter().enumerate() {
                say!("head {h}: return {r:.3}");
            }
            say!("selected head {} for task {}", report.selected, config.task);
            if let Some(out) = out {
                std::fs::create_dir_all(&out).context("cannot create --out")?;
                let mut text = String::from("head,return\n");
                for (h, r) in report.returns.iter().enumerate() {
                    let _ = writeln!(text, "{h},{r}");
                }
                let path = out.join("selection.csv");
                std::fs::write(&path, text).context("cannot write selection.csv")?;
                say!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Plot { metrics, out } => {
            let emitted = emit_plots(&metrics, &out)?;
            for path in &emitted {
                say!("wrote {}", path.display());
            }
            Ok(())
        }
    }
}

/// Aggregate fine-tuning returns across runs into per-task curves with 95%
/// confidence bands, and drop a matplotlib script beside them. Inputs are
/// only read; all outputs go under `out`.
fn emit_plots(metrics: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    // task -> step -> one return per input file that has the (task, step).
    let mut series: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for path in metrics {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read metrics file {}", path.display()))?;
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("");
        if header != METRICS_HEADER {
            bail!(
                "{}: header `{header}` does not match the metrics format `{METRICS_HEADER}`",
                path.display()
            );
        }
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 11 {
                bail!("{} line {}: expected 11 fields, got {}", path.display(), i + 2, fields.len());
            }
            let task = fields[2];
            if task == "none" {
                // Reward-free rows carry no return signal.
                continue;
            }
            let step: u64 = fields[1]
                .parse()
                .with_context(|| format!("{} line {}: bad step", path.display(), i + 2))?;
            let ret: f64 = fields[3]
                .parse()
                .with_context(|| format!("{} line {}: bad return", path.display(), i + 2))?;
            series.entry(task.to_string()).or_default().entry(step).or_default().push(ret);
        }
    }

    std::fs::create_dir_all(out).context("cannot create --out")?;
    let mut emitted = Vec::new();
    for (task, by_step) in &series {
        let mut text = String::from("step,mean,ci_half,runs\n");
        for (step, returns) in by_step {
            let n = returns.len();
            let mean = returns.iter().sum::<f64>() / n as f64;
            let ci_half = if n < 2 {
                0.0
            } else {
                let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
                    / (n - 1) as f64;
                1.96 * var.sqrt() / (n as f64).sqrt()
            };
            let _ = writeln!(text, "{step},{mean},{ci_half},{n}");
        }
        let path = out.join(format!("curve_{task}.csv"));
        std::fs::write(&path, text)
            .with_context(|| format!("cannot write {}", path.display()))?;
        emitted.push(path);
    }

    let script = out.join("plot.py");
    std::fs::write(&script, PLOT_SCRIPT).context("cannot write plot.py")?;
    emitted.push(script);
    Ok(emitted)
}

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Render return-vs-step curves with 95% confidence bands.

Reads every curve_*.csv beside this script and writes curves.png there.
"""
import csv
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = os.path.dirname(os.path.abspath(__file__))
fig, ax = plt.subplots(figsize=(6.0, 4.0))
found = False
for path in sorted(glob.glob(os.path.join(here, "curve_*.csv"))):
    task = os.path.basename(path)[len("curve_"):-len(".csv")]
    steps, means, lows, highs = [], [], [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            step = int(row["step"])
            mean = float(row["mean"])
            half = float(row["ci_half"])
            steps.append(step)
            means.append(mean)
            lows.append(mean - half)
            highs.append(mean + half)
    ax.plot(steps, means, label=task)
    ax.fill_between(steps, lows, highs, alpha=0.2)
    found = True

ax.set_xlabel("environment step")
ax.set_ylabel("episode return")
if found:
    ax.legend()
fig.tight_layout()
target = os.path.join(here, "curves.png")
fig.savefig(target, dpi=120)
print("wrote", target)
"#;
